"""Adaptive video streaming over LEO satellite links: trace-driven
simulation plus joint bitrate/handoff planning."""

from .simcore import (
    ChunkOutcome,
    Decision,
    PlayerState,
    QoEBreakdown,
    SimConfig,
    VideoSpec,
)
from .traces import PassGeometry, TraceGenConfig, TraceSet, gen_trace_set

__version__ = "0.1.0"

__all__ = [
    "ChunkOutcome",
    "Decision",
    "PassGeometry",
    "PlayerState",
    "QoEBreakdown",
    "SimConfig",
    "TraceGenConfig",
    "TraceSet",
    "VideoSpec",
    "gen_trace_set",
    "__version__",
]
