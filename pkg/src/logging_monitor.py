"""
Logging and training metrics for the scan planner
"""

import json
import logging
import logging.handlers
import sys
import threading
import time
import traceback
from collections import defaultdict, deque
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

EXTRA_FIELDS = ('step', 'episode', 'node', 'loss', 'operation', 'duration')


class MetricsCollector:
    """Collects training and environment metrics; safe to call from actor threads"""

    def __init__(self, history_size: int = 10000):
        self._lock = threading.Lock()
        self.operation_times: Dict[str, List[float]] = defaultdict(list)
        self.success_rates: Dict[str, List[bool]] = defaultdict(list)
        self.retry_counts: Dict[str, int] = defaultdict(int)
        self.error_counts: Dict[str, int] = defaultdict(int)
        self.losses: deque = deque(maxlen=history_size)
        self.td_errors: deque = deque(maxlen=history_size)
        self.episode_returns: deque = deque(maxlen=history_size)
        self.outcomes: Dict[str, int] = defaultdict(int)
        self.target_syncs: List[int] = []
        self.stale_skips: int = 0
        self.queue_depths: Dict[int, deque] = defaultdict(lambda: deque(maxlen=1000))
        self.state_history: deque = deque(maxlen=1000)
        self.start_time = time.time()

    def record_operation(self, operation: str, duration: float, success: bool = True):
        with self._lock:
            self.operation_times[operation].append(duration)
            self.success_rates[operation].append(success)

    def record_retry(self, operation: str):
        with self._lock:
            self.retry_counts[operation] += 1

    def record_error(self, error_type: str):
        with self._lock:
            self.error_counts[error_type] += 1

    def record_loss(self, loss: float, td_errors: Optional[List[float]] = None):
        with self._lock:
            self.losses.append(float(loss))
            if td_errors is not None:
                self.td_errors.extend(float(x) for x in td_errors)

    def record_episode(self, episode_return: float, outcome: str):
        with self._lock:
            self.episode_returns.append(float(episode_return))
            self.outcomes[outcome] += 1

    def record_target_sync(self, step: int):
        with self._lock:
            self.target_syncs.append(int(step))

    def record_stale_skips(self, count: int):
        with self._lock:
            self.stale_skips += int(count)

    def record_queue_depth(self, node: int, depth: int):
        with self._lock:
            self.queue_depths[node].append(int(depth))

    def record_state_transition(self, from_state: str, to_state: str, timestamp: float):
        with self._lock:
            self.state_history.append({
                'from': from_state,
                'to': to_state,
                'timestamp': timestamp,
                'time': datetime.fromtimestamp(timestamp).isoformat()
            })

    @staticmethod
    def _summary(values) -> Dict[str, float]:
        values = list(values)
        return {
            'count': len(values),
            'average': sum(values) / len(values) if values else 0,
            'min': min(values) if values else 0,
            'max': max(values) if values else 0,
        }

    def get_metrics(self) -> Dict[str, Any]:
        """Get all collected metrics"""
        with self._lock:
            return {
                'uptime': time.time() - self.start_time,
                'operation_times': {op: self._summary(times) for op, times in self.operation_times.items()},
                'success_rates': {
                    op: {
                        'total': len(results),
                        'successes': sum(results),
                        'rate': sum(results) / len(results) if results else 0
                    }
                    for op, results in self.success_rates.items()
                },
                'retry_counts': dict(self.retry_counts),
                'errors': dict(self.error_counts),
                'loss': self._summary(self.losses),
                'td_error': self._summary(self.td_errors),
                'episode_return': self._summary(self.episode_returns),
                'outcomes': dict(self.outcomes),
                'target_syncs': list(self.target_syncs),
                'stale_skips': self.stale_skips,
                'queue_depths': {str(node): self._summary(d) for node, d in self.queue_depths.items()},
                'state_transitions': list(self.state_history)[-100:],
            }


class StructuredFormatter(logging.Formatter):
    """JSON formatter for structured logging"""

    def format(self, record: logging.LogRecord) -> str:
        log_entry = {
            'timestamp': datetime.fromtimestamp(record.created).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno,
        }

        if record.exc_info:
            log_entry['exception'] = {
                'type': record.exc_info[0].__name__ if record.exc_info[0] else None,
                'message': str(record.exc_info[1]) if record.exc_info[1] else None,
                'traceback': traceback.format_exception(*record.exc_info)
            }

        for name in EXTRA_FIELDS:
            if hasattr(record, name):
                log_entry[name] = getattr(record, name)

        return json.dumps(log_entry)


class LoggingMonitor:
    """Console, rotating text and JSON logs plus the metrics collector"""

    def __init__(self, log_dir: str = "logs", monitoring_dir: str = "monitoring",
                 log_level: str = "INFO", enable_console: bool = True):
        self.log_dir = Path(log_dir)
        self.monitoring_dir = Path(monitoring_dir)
        self.log_level = getattr(logging, log_level.upper(), logging.INFO)
        self.enable_console = enable_console

        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.monitoring_dir.mkdir(parents=True, exist_ok=True)

        self.metrics = MetricsCollector()

        self.logger = self._setup_logger()
        self.episode_logger = self._setup_file_logger(
            'scan_planner.episodes', 'episodes',
            '%(asctime)s [node %(node)s] episode %(episode)s: %(message)s')
        self.state_logger = self._setup_file_logger(
            'scan_planner.state', 'state',
            '%(asctime)s [%(from_state)s -> %(to_state)s] %(reason)s')

    def _rotating_handler(self, stem: str, suffix: str) -> logging.Handler:
        log_file = self.log_dir / f"{stem}_{datetime.now().strftime('%Y-%m-%d')}.{suffix}"
        return logging.handlers.RotatingFileHandler(
            log_file,
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=30,
            encoding='utf-8'
        )

    def _setup_logger(self) -> logging.Logger:
        """Main logger: console, text file and JSON file"""
        logger = logging.getLogger('scan_planner')
        logger.setLevel(logging.DEBUG)
        logger.handlers.clear()

        if self.enable_console:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setLevel(self.log_level)
            console_handler.setFormatter(logging.Formatter(
                '%(asctime)s [%(levelname)-8s] %(name)s: %(message)s',
                datefmt='%Y-%m-%d %H:%M:%S'
            ))
            logger.addHandler(console_handler)

        file_handler = self._rotating_handler('scan_planner', 'log')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s.%(msecs)03d [%(levelname)-8s] %(name)s:%(module)s:%(funcName)s:%(lineno)d: %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        ))
        logger.addHandler(file_handler)

        json_handler = self._rotating_handler('scan_planner', 'json')
        json_handler.setLevel(logging.DEBUG)
        json_handler.setFormatter(StructuredFormatter())
        logger.addHandler(json_handler)

        return logger

    def _setup_file_logger(self, name: str, stem: str, fmt: str) -> logging.Logger:
        logger = logging.getLogger(name)
        logger.setLevel(logging.DEBUG)
        logger.handlers.clear()
        logger.propagate = False
        handler = self._rotating_handler(stem, 'log')
        handler.setFormatter(logging.Formatter(fmt, datefmt='%Y-%m-%d %H:%M:%S'))
        logger.addHandler(handler)
        return logger

    def set_level(self, log_level: str):
        self.log_level = getattr(logging, log_level.upper(), logging.INFO)
        for handler in self.logger.handlers:
            if isinstance(handler, logging.StreamHandler) and not isinstance(handler, logging.FileHandler):
                handler.setLevel(self.log_level)

    def log_state_transition(self, from_state: str, to_state: str, reason: str = ""):
        """Log an episode outcome transition"""
        extra = {'from_state': from_state, 'to_state': to_state, 'reason': reason}
        self.state_logger.info(f"{from_state} -> {to_state}", extra=extra)
        self.metrics.record_state_transition(from_state, to_state, time.time())

    def log_episode(self, node: int, episode: int, steps: int, episode_return: float, outcome: str,
                    coverage: float):
        extra = {'node': node, 'episode': episode}
        self.episode_logger.info(
            f"steps={steps} return={episode_return:.4f} outcome={outcome} coverage={coverage:.3f}", extra=extra)
        self.metrics.record_episode(episode_return, outcome)

    def log_training(self, step: int, loss: float, message: str, level: str = "DEBUG"):
        self.logger.log(getattr(logging, level.upper(), logging.DEBUG), message,
                        extra={'step': step, 'loss': loss})

    def log_operation(self, operation: str, message: str, level: str = "INFO",
                      duration: Optional[float] = None, success: Optional[bool] = None):
        """Log an operation with context"""
        extra: Dict[str, Any] = {'operation': operation}
        if duration is not None:
            extra['duration'] = duration
            self.metrics.record_operation(operation, duration, success if success is not None else True)
        self.logger.log(getattr(logging, level.upper(), logging.INFO), message, extra=extra)

    def log_exception(self, exception: Exception, context: str = ""):
        """Log an exception with full traceback"""
        self.logger.error(f"Exception in {context}: {exception}", exc_info=True)
        self.metrics.record_error(type(exception).__name__)

    def export_metrics(self, filename: Optional[str] = None) -> str:
        """Export metrics to JSON file"""
        if filename is None:
            filename = f"metrics_{datetime.now().strftime('%Y-%m-%d_%H%M%S')}.json"

        metrics_file = self.monitoring_dir / filename
        metrics_data = {
            'timestamp': datetime.now().isoformat(),
            'metrics': self.metrics.get_metrics()
        }

        with open(metrics_file, 'w') as f:
            json.dump(metrics_data, f, indent=2)

        self.logger.info(f"Metrics exported to {metrics_file}")
        return str(metrics_file)

    def get_current_metrics(self) -> Dict[str, Any]:
        return self.metrics.get_metrics()

    def close(self):
        for logger in (self.logger, self.episode_logger, self.state_logger):
            for handler in list(logger.handlers):
                handler.close()
                logger.removeHandler(handler)
