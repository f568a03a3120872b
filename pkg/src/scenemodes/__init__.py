"""Multi-agent traffic prediction with a tokenized, interpretable latent:
per-agent lane assignments plus per-pair interaction (winding) classes."""

__version__ = "0.1.0"

from .scene import (
    AgentStatic,
    AgentTrack,
    AgentType,
    LaneGraph,
    LanePolyline,
    LaneRelation,
    Pose4,
    Scene,
    StateSeq,
)

__all__ = [
    "AgentStatic",
    "AgentTrack",
    "AgentType",
    "LaneGraph",
    "LanePolyline",
    "LaneRelation",
    "Pose4",
    "Scene",
    "StateSeq",
    "__version__",
]
