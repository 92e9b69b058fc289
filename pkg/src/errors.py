"""
Exception hierarchy for the intercostal scan planner
"""

from typing import Optional


class ScanPlannerError(Exception):
    """Base class for all planner errors"""

    code = "ScanPlannerError"

    def __init__(self, message: str = "", detail: Optional[dict] = None):
        super().__init__(message)
        self.detail = detail or {}

    def one_line(self) -> str:
        """Machine-parseable single line for CLI output"""
        text = str(self).replace('"', "'").replace("\n", " ")
        return f'error code={self.code} message="{text}"'


# Geometry

class DegenerateInput(ScanPlannerError):
    code = "DegenerateInput"


class NoContact(ScanPlannerError):
    code = "NoContact"


# Scene

class InvalidParams(ScanPlannerError):
    code = "InvalidParams"


class ParseError(ScanPlannerError):
    code = "ParseError"


class OpenMesh(ScanPlannerError):
    code = "OpenMesh"


class PlacementFailed(ScanPlannerError):
    code = "PlacementFailed"


class TargetOutsideGrid(ScanPlannerError):
    code = "TargetOutsideGrid"


class SceneFormatError(ParseError):
    code = "SceneFormatError"


# Environment

class ResetFailed(ScanPlannerError):
    code = "ResetFailed"


class SteppedDone(ScanPlannerError):
    code = "SteppedDone"


class EmptyEpisode(ScanPlannerError):
    code = "EmptyEpisode"


# Agent

class ShapeMismatch(ScanPlannerError):
    code = "ShapeMismatch"


class NonFiniteLoss(ScanPlannerError):
    code = "NonFiniteLoss"


class FormatVersionMismatch(ScanPlannerError):
    code = "FormatVersionMismatch"


class CorruptFile(ScanPlannerError):
    code = "CorruptFile"


# Replay

class Underfilled(ScanPlannerError):
    code = "Underfilled"


class StaleIndex(ScanPlannerError):
    code = "StaleIndex"


class ChannelClosed(ScanPlannerError):
    code = "ChannelClosed"


# CLI

class NoFeasiblePositions(ScanPlannerError):
    code = "NoFeasiblePositions"


class ConfigError(ScanPlannerError):
    code = "ConfigError"
