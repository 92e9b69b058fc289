"""
Bounded rejection sampling
"""

import pytest

from errors import InvalidParams, PlacementFailed
from logging_monitor import MetricsCollector
from retry_strategies import RejectedSample, RetryConfig, RetryManager


def _rejecting(times, result="placed"):
    calls = []

    def draw():
        calls.append(len(calls))
        if len(calls) <= times:
            raise RejectedSample(f"overlap: attempt {len(calls)}")
        return result
    return draw, calls


def test_accepts_after_rejections():
    metrics = MetricsCollector()
    manager = RetryManager(metrics=metrics)
    draw, calls = _rejecting(3)
    assert manager.retry("target_placement", draw, RetryConfig(5), PlacementFailed) == "placed"
    assert len(calls) == 4
    assert metrics.get_metrics()['retry_counts'] == {"target_placement": 3}
    stats = manager.get_retry_statistics("target_placement")
    assert stats['total_retries'] == 3
    assert stats['operations']['target_placement']['reasons'] == {"overlap": 3}


def test_exhaustion_raises_the_operation_error():
    manager = RetryManager()
    draw, calls = _rejecting(10)
    with pytest.raises(PlacementFailed) as excinfo:
        manager.retry("target_placement", draw, RetryConfig(4), PlacementFailed)
    assert len(calls) == 4
    assert excinfo.value.detail == {'attempts': 4}


def test_other_errors_are_not_retried():
    manager = RetryManager()
    calls = []

    def draw():
        calls.append(1)
        raise InvalidParams("gap index out of range")

    with pytest.raises(InvalidParams):
        manager.retry("target_placement", draw, RetryConfig(10), PlacementFailed)
    assert len(calls) == 1
    assert manager.get_retry_statistics()['total_retries'] == 0


def test_should_retry():
    manager = RetryManager()
    config = RetryConfig(3)
    assert manager.should_retry(RejectedSample("x"), 2, config)
    assert not manager.should_retry(RejectedSample("x"), 3, config)
    assert not manager.should_retry(InvalidParams("x"), 1, config)


def test_retry_config_needs_an_attempt():
    with pytest.raises(ValueError):
        RetryConfig(0)
