"""Exception hierarchy shared by every module."""


class EngineError(Exception):
    """Base class for all engine failures."""


class ShapeError(EngineError):
    """Tensor extents incompatible with the requested operation."""


class GeometryError(ShapeError):
    """Convolution stride/padding does not tile the input exactly."""


class NumericError(EngineError):
    """Non-finite input, accumulator overflow, or vanishing divisor."""


class StateError(EngineError):
    """Backward called without the forward cache it needs."""


class GraphError(EngineError):
    """Layer graph is malformed (cycle, bad edge, fusion pattern mismatch)."""


class SolverError(EngineError):
    """PnP solver hit a degenerate point configuration."""


class BehindCameraError(SolverError):
    """A 3-D point has non-positive depth under the candidate pose."""


class MetricError(EngineError):
    """Pose metric undefined for the given inputs (e.g. zero translation)."""


class LatencyModelError(EngineError):
    """PIM latency requested for a workload containing float layers."""


class CalibrationError(EngineError):
    """Observed latency is faster than the ideal model allows."""


class ConfigError(EngineError):
    """Malformed or unknown run configuration."""
