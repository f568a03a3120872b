"""Model hyperparameters, serializable for checkpoint echo."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    encoder_rounds: int = 2
    energy_rounds: int = 2
    decoder_rounds: int = 5
    history_len: int = 4
    future_len: int = 12
    theta_hat: float = math.pi / 6
    align_thresh: float = math.pi / 4
    lane_resample_points: int = 8
    token_dim: int = 16
    pos_scale: float = 0.1  # multiplies meter-valued inputs before embedding
    use_dynamics: bool = True
    decode_strategy: str = "one_shot"  # "one_shot" | "autoregressive"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.decoder_rounds < 1:
            raise ValueError("decoder_rounds must be >= 1")
        if self.decode_strategy not in ("one_shot", "autoregressive"):
            raise ValueError(f"unknown decode strategy {self.decode_strategy!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)
