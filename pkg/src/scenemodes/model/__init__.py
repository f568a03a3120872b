from .config import ModelConfig
from .encoder import ContextTensors, SceneEncoder
from .network import PredictionResult, ScenePredictionModel, build_mode_tokens, sample_with_fallback

__all__ = [
    "ModelConfig",
    "ContextTensors",
    "SceneEncoder",
    "PredictionResult",
    "ScenePredictionModel",
    "build_mode_tokens",
    "sample_with_fallback",
]
