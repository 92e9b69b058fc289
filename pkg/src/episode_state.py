"""
Episode outcome tracking for the scanning environment
"""

from enum import Enum
from typing import Any, Dict, List, Optional


class EpisodeOutcome(Enum):
    """Episode outcomes; every state except RUNNING is terminal"""
    RUNNING = "running"
    SUCCESS = "success"
    STEP_LIMIT = "step_limit"
    ANGLE_ABORT = "angle_abort"


class EpisodeStateMachine:
    """Tracks one episode from reset to its terminal outcome"""

    VALID_TRANSITIONS = {
        EpisodeOutcome.RUNNING: [EpisodeOutcome.SUCCESS, EpisodeOutcome.STEP_LIMIT, EpisodeOutcome.ANGLE_ABORT],
        EpisodeOutcome.SUCCESS: [],
        EpisodeOutcome.STEP_LIMIT: [],
        EpisodeOutcome.ANGLE_ABORT: [],
    }

    def __init__(self, log_monitor: Optional[Any] = None, label: str = ""):
        self.current_state = EpisodeOutcome.RUNNING
        self.state_history: List[Dict[str, Any]] = []
        self.log_monitor = log_monitor
        self.label = label

    def transition(self, new_state: EpisodeOutcome, step: int, reason: str = "") -> bool:
        """
        Move to a terminal outcome

        Returns:
            True if the transition is valid, False otherwise
        """
        if new_state not in self.VALID_TRANSITIONS.get(self.current_state, []):
            if self.log_monitor:
                self.log_monitor.logger.error(
                    f"Invalid episode transition: {self.current_state.value} -> {new_state.value}"
                )
            return False

        old_state = self.current_state
        self.current_state = new_state
        self.state_history.append({
            'from_state': old_state.value,
            'to_state': new_state.value,
            'step': step,
            'reason': reason,
        })
        if self.log_monitor:
            context = f"{self.label} step {step}" if self.label else f"step {step}"
            self.log_monitor.log_state_transition(old_state.value, new_state.value,
                                                  f"{context}: {reason}" if reason else context)
        return True

    def is_terminal_state(self) -> bool:
        return self.current_state is not EpisodeOutcome.RUNNING

    def get_state_history(self) -> List[Dict[str, Any]]:
        return self.state_history.copy()
