"""Full model: encoder, marginal heads, joint energy head, decoder.

Also owns the checkpoint format (versioned torch archive with a config echo)
and the single-scene prediction pipeline used by the CLI and the evaluator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from ..batching import SceneBatch, batch_scenes
from ..modes import HomotopyClass, SceneMode
from ..sampling import InsufficientModes, MarginalDist, SMSampleSet, ScoreWeights, sample_scene_modes
from ..scene import Scene, iter_pairs
from .config import ModelConfig
from .decoder import TrajectoryDecoder
from .encoder import ContextTensors, SceneEncoder
from .heads import PAIR_TOKEN_SELF, InteractionHead, JointEnergyHead, LaneAssignmentHead, pair_logp_rows

CHECKPOINT_FORMAT = "scenemodes-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class PredictionResult:
    """Numpy view of one scene's prediction."""

    samples: list[SceneMode]
    energies: np.ndarray  # [K]
    probs: np.ndarray  # [K] softmax of energies
    approx_logp: np.ndarray  # [K] proposal log-probs
    poses: np.ndarray  # [K, N, Tf, 4]
    speeds: np.ndarray  # [K, N, Tf]
    a2l_logp: np.ndarray  # [N, M+1]
    a2a_logp: np.ndarray  # [P, 3]

    @property
    def ml_index(self) -> int:
        return int(np.argmax(self.probs))


def build_mode_tokens(
    sample_sets: Sequence[SMSampleSet],
    n_agents: int,
    k: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Token tensors for a batch of sample sets, padded to k samples.

    Returns lane_choice [B, K, N], pair_class [B, K, N, N], sample_mask [B, K]
    and gt_index [B] (-1 when a set carries no ground truth).
    """
    b = len(sample_sets)
    lane_choice = torch.zeros(b, k, n_agents, dtype=torch.long)
    pair_class = torch.full((b, k, n_agents, n_agents), PAIR_TOKEN_SELF, dtype=torch.long)
    sample_mask = torch.zeros(b, k, dtype=torch.bool)
    gt_index = torch.full((b,), -1, dtype=torch.long)
    for bi, sset in enumerate(sample_sets):
        if len(sset) > k:
            raise ValueError(f"sample set has {len(sset)} entries, expected at most {k}")
        if sset.gt_index is not None:
            gt_index[bi] = sset.gt_index
        for ki in range(k):
            mode = sset.samples[min(ki, len(sset) - 1)]  # pad by repeating the last sample
            sample_mask[bi, ki] = ki < len(sset)
            n = mode.num_agents
            lane_choice[bi, ki, :n] = torch.tensor(mode.a2l, dtype=torch.long)
            for p, (i, j) in enumerate(iter_pairs(n)):
                pair_class[bi, ki, i, j] = int(mode.a2a[p])
                pair_class[bi, ki, j, i] = int(mode.a2a[p])
    return lane_choice, pair_class, sample_mask, gt_index


def sample_with_fallback(
    marginals: MarginalDist,
    scene: Scene,
    k: int,
    n_factors: int,
    gtsm: Optional[SceneMode] = None,
    dls: bool = False,
    weights: Optional[ScoreWeights] = None,
) -> SMSampleSet:
    """sample_scene_modes, widening the factor selection (then shrinking k)
    when too few distinct modes exist."""
    total = marginals.num_factors()
    n_factors = min(n_factors, total)
    try:
        return sample_scene_modes(marginals, scene, k, n_factors, gtsm=gtsm, dls=dls, weights=weights)
    except InsufficientModes:
        pass
    try:
        return sample_scene_modes(marginals, scene, k, total, gtsm=gtsm, dls=dls, weights=weights)
    except InsufficientModes:
        pass
    for smaller in range(k - 1, 0, -1):
        try:
            return sample_scene_modes(marginals, scene, smaller, total, gtsm=gtsm, dls=dls, weights=weights)
        except InsufficientModes:
            continue
    raise InsufficientModes("no joint mode could be enumerated")


class ScenePredictionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SceneEncoder(cfg)
        self.lane_head = LaneAssignmentHead(cfg)
        self.interaction_head = InteractionHead(cfg)
        self.energy_head = JointEnergyHead(cfg)
        self.decoder = TrajectoryDecoder(cfg)
        self.double()

    def encode(self, batch: SceneBatch) -> ContextTensors:
        return self.encoder(batch)

    def embed_scene(self, scene: Scene) -> ContextTensors:
        """Round-free block embedding of a single scene."""
        return self.encoder.embed(batch_scenes([scene], align_thresh=self.cfg.align_thresh))

    def marginal_logp(self, ctx: ContextTensors) -> tuple[torch.Tensor, torch.Tensor]:
        """(a2l log-probs [B, N, M+1], a2a log-prob matrix [B, N, N, 3])."""
        return self.lane_head(ctx), self.interaction_head(ctx)

    def scene_marginals(
        self, a2l_logp: torch.Tensor, a2a_matrix: torch.Tensor, scene_index: int, scene: Scene
    ) -> MarginalDist:
        """Detached per-scene MarginalDist for the sampling stage."""
        n, m = scene.num_agents, scene.num_lanes
        a2l = a2l_logp[scene_index, :n, : m + 1].detach().cpu().numpy()
        a2l = a2l - _np_logsumexp(a2l)
        if n > 1:
            rows = pair_logp_rows(a2a_matrix[scene_index, :n, :n], n).detach().cpu().numpy()
            rows = rows - _np_logsumexp(rows)
        else:
            rows = np.zeros((0, 3))
        return MarginalDist(a2l, rows)

    def save_checkpoint(self, path, extra: Optional[dict] = None) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "state_dict": self.state_dict(),
        }
        if extra is not None:
            payload["extra"] = extra
        torch.save(payload, path)

    @staticmethod
    def load_checkpoint(path) -> tuple["ScenePredictionModel", dict]:
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as e:  # noqa: BLE001 - surface as a checkpoint problem
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a model checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {payload.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
            )
        model = ScenePredictionModel(ModelConfig.from_dict(payload["config"]))
        model.load_state_dict(payload["state_dict"])
        return model, payload.get("extra", {})

    @torch.no_grad()
    def predict(
        self,
        scene: Scene,
        k: Optional[int] = None,
        n_factors: int = 4,
        mode_override: Optional[SceneMode] = None,
        strategy: Optional[str] = None,
        score_weights: Optional[ScoreWeights] = None,
    ) -> PredictionResult:
        """Top-k mode sampling (no ground-truth forcing, no lane augmentation)
        and conditioned decoding for a single scene."""
        batch = batch_scenes([scene], align_thresh=self.cfg.align_thresh)
        ctx = self.encode(batch)
        a2l_logp, a2a_matrix = self.marginal_logp(ctx)
        marg = self.scene_marginals(a2l_logp, a2a_matrix, 0, scene)

        if mode_override is not None:
            if mode_override.num_agents != scene.num_agents:
                raise ValueError("override mode does not match the scene's agent count")
            sset = SMSampleSet([mode_override], np.array([0.0]), None)
        else:
            sset = sample_with_fallback(marg, scene, k or 1, n_factors, weights=score_weights)

        k_eff = len(sset)
        lane_choice, pair_class, _, _ = build_mode_tokens([sset], scene.num_agents, k_eff)
        energies = self.energy_head(ctx, lane_choice, pair_class)[0]
        probs = torch.softmax(energies, dim=-1)
        dec = self.decoder(ctx, batch, lane_choice, pair_class, strategy=strategy)
        return PredictionResult(
            samples=list(sset.samples),
            energies=energies.cpu().numpy(),
            probs=probs.cpu().numpy(),
            approx_logp=np.asarray(sset.approx_logp),
            poses=dec["poses"][0].cpu().numpy(),
            speeds=dec["speeds"][0].cpu().numpy(),
            a2l_logp=marg.a2l_logp,
            a2a_logp=marg.a2a_logp,
        )


def _np_logsumexp(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(rows - m).sum(axis=-1, keepdims=True))
