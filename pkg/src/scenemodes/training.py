"""Training loop: shared encoder, marginal/energy heads, conditioned decoder.

Each step encodes a padded batch, samples joint modes per scene (ground
truth forced in, lane proposal optionally widened), scores them with the
energy head, decodes conditioned trajectories, and applies the full
objective. Deterministic given (data, seed); checkpoints carry optimizer
and RNG state so resumed runs continue the loss curve exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .batching import batch_scenes
from .losses import (
    LossWeights,
    loss_consistency_a2a,
    loss_consistency_a2l,
    loss_joint_sm,
    loss_marginal,
    loss_recon,
    loss_reg,
    total_loss,
)
from .model.heads import pair_logp_rows
from .model.network import ScenePredictionModel, build_mode_tokens, sample_with_fallback
from .modes import ModeMargins, SceneMode, extract_gtsm
from .sampling import ScoreWeights
from .scene import Scene, iter_pairs

__all__ = ["TrainConfig", "LabeledScene", "label_scenes", "Trainer", "TrainingDiverged"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    lr_floor: float = 0.1  # cosine decay toward lr * lr_floor over `steps`
    seed: int = 0
    k_train: int = 4
    n_factors: int = 4
    diverse_lane_sampling: bool = True
    grad_clip: float = 10.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    score_weights: ScoreWeights = field(default_factory=ScoreWeights)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            lw = dict(d["loss_weights"])
            if "reg_parts" in lw:
                from .losses import RegWeights

                lw["reg_parts"] = RegWeights(**lw["reg_parts"])
            d["loss_weights"] = LossWeights(**lw)
        if "score_weights" in d:
            d["score_weights"] = ScoreWeights(**d["score_weights"])
        return TrainConfig(**d)


@dataclass
class LabeledScene:
    scene: Scene
    gtsm: SceneMode
    margins: ModeMargins


def label_scenes(scenes: Sequence[Scene], theta_hat: float) -> list[LabeledScene]:
    out = []
    for s in scenes:
        gtsm, margins = extract_gtsm(s, theta_hat)
        out.append(LabeledScene(s, gtsm, margins))
    return out


def pair_target_matrix(labeled: Sequence[LabeledScene], n_max: int) -> torch.Tensor:
    """[B, N, N] long matrix of GT pair classes (diagonal/padding arbitrary 0)."""
    b = len(labeled)
    mat = torch.zeros(b, n_max, n_max, dtype=torch.long)
    for bi, item in enumerate(labeled):
        n = item.scene.num_agents
        for p, (i, j) in enumerate(iter_pairs(n)):
            mat[bi, i, j] = int(item.gtsm.a2a[p])
            mat[bi, j, i] = int(item.gtsm.a2a[p])
    return mat


class Trainer:
    def __init__(
        self,
        model: ScenePredictionModel,
        cfg: TrainConfig,
        labeled: Sequence[LabeledScene],
    ):
        if not labeled:
            raise ValueError("need at least one labeled scene")
        self.model = model
        self.cfg = cfg
        self.labeled = list(labeled)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.history: list[dict] = []
        self.step_count = 0

    # -- one optimization step --------------------------------------------

    def train_step(self, batch_items: Sequence[LabeledScene]) -> dict:
        model, cfg = self.model, self.cfg
        scenes = [it.scene for it in batch_items]
        batch = batch_scenes(scenes, align_thresh=model.cfg.align_thresh)
        b, n_max = batch.batch_size, batch.max_agents

        ctx = model.encode(batch)
        a2l_logp, a2a_matrix = model.marginal_logp(ctx)

        # the joint-mode loss always uses the plain proposal; the decoder's
        # conditioning set may widen lanes around the ground truth (DLS)
        energy_sets, decode_sets = [], []
        for bi, item in enumerate(batch_items):
            marg = model.scene_marginals(a2l_logp, a2a_matrix, bi, item.scene)
            args = dict(gtsm=item.gtsm, weights=cfg.score_weights)
            energy_sets.append(
                sample_with_fallback(marg, item.scene, cfg.k_train, cfg.n_factors, dls=False, **args)
            )
            if cfg.diverse_lane_sampling:
                decode_sets.append(
                    sample_with_fallback(marg, item.scene, cfg.k_train, cfg.n_factors, dls=True, **args)
                )
        if not cfg.diverse_lane_sampling:
            decode_sets = energy_sets
        e_lane, e_pair, e_mask, e_gt = build_mode_tokens(energy_sets, n_max, cfg.k_train)
        lane_choice, pair_class, sample_mask, gt_index = build_mode_tokens(decode_sets, n_max, cfg.k_train)

        energies = model.energy_head(ctx, e_lane, e_pair)
        dec = model.decoder(ctx, batch, lane_choice, pair_class)
        poses = dec["poses"]

        a2l_targets = torch.zeros(b, n_max, dtype=torch.long)
        for bi, item in enumerate(batch_items):
            a2l_targets[bi, : item.scene.num_agents] = torch.tensor(item.gtsm.a2l)
        pair_targets_mat = pair_target_matrix(batch_items, n_max)
        if n_max > 1:
            pair_rows = pair_logp_rows(a2a_matrix, n_max)
            idx_i, idx_j = torch.triu_indices(n_max, n_max, offset=1)
            pair_targets = pair_targets_mat[:, idx_i, idx_j]
            pair_mask = batch.agent_mask[:, idx_i] & batch.agent_mask[:, idx_j]
        else:
            pair_rows = torch.zeros(b, 0, 3, dtype=poses.dtype)
            pair_targets = torch.zeros(b, 0, dtype=torch.long)
            pair_mask = torch.zeros(b, 0, dtype=torch.bool)

        fut_valid = batch.fut_mask & batch.agent_mask[..., None]
        radii = 0.5 * batch.agent_size.norm(dim=-1)
        parts = {
            "marginal_a2l": loss_marginal(a2l_logp, a2l_targets, batch.agent_mask),
            "marginal_a2a": loss_marginal(pair_rows, pair_targets, pair_mask)
            if pair_targets.numel()
            else poses.sum() * 0.0,
            "joint_mode": loss_joint_sm(energies, e_gt, e_mask),
            "recon": loss_recon(poses[..., :2], batch.fut_pose[..., :2], fut_valid, gt_index),
            "consistency_a2l": loss_consistency_a2l(
                poses[..., -1, :],
                lane_choice,
                batch.lane_pts,
                batch.lane_pt_mask,
                batch.lane_half_width,
                batch.agent_mask,
                sample_mask,
            ),
            "consistency_a2a": loss_consistency_a2a(
                poses[..., :2],
                batch.current_pose()[..., :2],
                pair_class,
                model.cfg.theta_hat,
                batch.agent_mask,
                sample_mask,
            ),
            "reg": loss_reg(
                model.parameters(),
                dec["controls"],
                poses[..., :2],
                radii,
                batch.agent_mask,
                cfg.loss_weights.reg_parts,
                sample_mask,
            ),
        }
        total, breakdown = total_loss(parts, cfg.loss_weights)
        if not torch.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at step {self.step_count}: {breakdown}")

        self.optimizer.zero_grad()
        total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        return breakdown

    # -- epoch/step loop ----------------------------------------------------

    def _lr_at(self, step: int) -> float:
        frac = min(step / max(self.cfg.steps, 1), 1.0)
        lo = self.cfg.lr_floor
        return self.cfg.lr * (lo + (1.0 - lo) * 0.5 * (1.0 + math.cos(math.pi * frac)))

    def run(self, steps: Optional[int] = None, log_every: int = 0) -> list[dict]:
        target = self.step_count + (steps if steps is not None else self.cfg.steps)
        order: list[int] = []
        while self.step_count < target:
            for group in self.optimizer.param_groups:
                group["lr"] = self._lr_at(self.step_count)
            if len(order) < self.cfg.batch_size:
                order = list(self.rng.permutation(len(self.labeled)))
            take = [order.pop() for _ in range(min(self.cfg.batch_size, len(order)))]
            breakdown = self.train_step([self.labeled[i] for i in take])
            breakdown["step"] = self.step_count
            self.history.append(breakdown)
            self.step_count += 1
            if log_every and self.step_count % log_every == 0:
                print(
                    f"step {self.step_count}: total={breakdown['total']:.4f} "
                    f"recon={breakdown['recon']:.4f} a2a={breakdown['marginal_a2a']:.4f}"
                )
        return self.history

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        extra = {
            "train_config": self.cfg.to_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step_count": self.step_count,
            "history": self.history,
            "np_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }
        self.model.save_checkpoint(path, extra)

    @staticmethod
    def resume(path, labeled: Sequence[LabeledScene]) -> "Trainer":
        model, extra = ScenePredictionModel.load_checkpoint(path)
        if "train_config" not in extra:
            raise ValueError(f"checkpoint {path} carries no training state to resume from")
        trainer = Trainer(model, TrainConfig.from_dict(extra["train_config"]), labeled)
        trainer.optimizer.load_state_dict(extra["optimizer"])
        trainer.step_count = extra["step_count"]
        trainer.history = list(extra["history"])
        trainer.rng.bit_generator.state = extra["np_rng"]
        torch.set_rng_state(extra["torch_rng"])
        return trainer
