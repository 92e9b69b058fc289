"""
Bounded retry of randomized operations (rejection sampling of placements and start poses)
"""

import time
from collections import deque
from typing import Any, Callable, Dict, Optional, Type

from errors import ScanPlannerError


class RejectedSample(Exception):
    """A randomized attempt produced an unacceptable sample; draw again"""


class RetryConfig:
    """Configuration for retry operations"""

    def __init__(self, max_retries: int = 100):
        if max_retries < 1:
            raise ValueError("max_retries must be at least 1")
        self.max_retries = max_retries


class RetryManager:
    """Runs an operation until it stops rejecting, up to a fixed attempt cap"""

    DEFAULT_CONFIGS = {
        'target_placement': RetryConfig(max_retries=100),
        'start_pose': RetryConfig(max_retries=100),
    }

    def __init__(self, logger: Optional[Any] = None, metrics: Optional[Any] = None,
                 history_size: int = 1000):
        self.logger = logger
        self.metrics = metrics
        self.retry_history: deque = deque(maxlen=history_size)

    def should_retry(self, error: Exception, attempt: int, config: RetryConfig) -> bool:
        """Only rejected samples are retried, and only while attempts remain"""
        return attempt < config.max_retries and isinstance(error, RejectedSample)

    def retry(self, operation: str, func: Callable[[], Any],
              config: Optional[RetryConfig] = None,
              exhausted_error: Type[ScanPlannerError] = ScanPlannerError) -> Any:
        """
        Call func until it returns without raising RejectedSample

        Args:
            operation: Name of operation for logging and statistics
            func: Attempt function; raises RejectedSample to request another draw
            config: Retry configuration (uses default for the operation if None)
            exhausted_error: Raised when every attempt was rejected

        Any other exception from func propagates on the first attempt.

        Returns:
            Result of the first accepted attempt
        """
        if config is None:
            config = self.DEFAULT_CONFIGS.get(operation, RetryConfig())

        start_time = time.time()
        last_exception: Optional[Exception] = None
        for attempt in range(1, config.max_retries + 1):
            try:
                result = func()
                if self.metrics:
                    self.metrics.record_operation(operation, time.time() - start_time, success=True)
                if attempt > 1 and self.logger:
                    self.logger.debug(f"{operation} accepted on attempt {attempt}")
                return result
            except RejectedSample as e:
                last_exception = e
                self.retry_history.append({
                    'operation': operation,
                    'attempt': attempt,
                    'reason': str(e),
                })
                if self.metrics:
                    self.metrics.record_retry(operation)
                if not self.should_retry(e, attempt, config):
                    break

        if self.metrics:
            self.metrics.record_operation(operation, time.time() - start_time, success=False)
        if self.logger:
            self.logger.warning(f"{operation} rejected {config.max_retries} times: {last_exception}")
        raise exhausted_error(
            f"{operation} failed after {config.max_retries} attempts (last: {last_exception})",
            {'attempts': config.max_retries},
        )

    def get_retry_statistics(self, operation: Optional[str] = None) -> Dict[str, Any]:
        """Get retry statistics"""
        if operation:
            records = [r for r in self.retry_history if r['operation'] == operation]
        else:
            records = list(self.retry_history)

        if not records:
            return {'total_retries': 0, 'operations': {}}

        operations: Dict[str, Dict[str, Any]] = {}
        for record in records:
            op = operations.setdefault(record['operation'], {'total_retries': 0, 'max_attempts': 0, 'reasons': {}})
            op['total_retries'] += 1
            op['max_attempts'] = max(op['max_attempts'], record['attempt'])
            reason = record['reason'].split(':', 1)[0]
            op['reasons'][reason] = op['reasons'].get(reason, 0) + 1

        return {'total_retries': len(records), 'operations': operations}
