"""Evaluation suite: displacement errors, mode accuracy, decode consistency,
mode coverage, and collision rates.

Displacement minima are joint (scene-level): the best single sample for the
whole scene, never a per-agent mix across samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model.network import PredictionResult, ScenePredictionModel
from .modes import (
    CoincidentAgents,
    SceneMode,
    angular_distance,
    homotopy_class,
    unitary_a2l,
)
from .scene import Pose4, Scene, iter_pairs
from .training import LabeledScene

__all__ = [
    "ade_fde",
    "realized_scene_mode",
    "consistency_counts",
    "cover_flags",
    "collision_rate",
    "evaluate_model",
    "MetricAccumulator",
]


def ade_fde(
    pred_xy: np.ndarray,  # [K, N, T, 2]
    probs: np.ndarray,  # [K]
    gt_xy: np.ndarray,  # [N, T, 2]
    valid: Optional[np.ndarray] = None,  # [N, T]
) -> dict[str, float]:
    """Most-likely and joint-minimum displacement errors."""
    k, n, t, _ = pred_xy.shape
    if valid is None:
        valid = np.ones((n, t), dtype=bool)
    dist = np.sqrt(((pred_xy - gt_xy[None]) ** 2).sum(-1))  # [K, N, T]
    denom = valid.sum()
    ade = (dist * valid).reshape(k, -1).sum(-1) / max(denom, 1)
    last_idx = np.array([vi.nonzero()[0][-1] if vi.any() else 0 for vi in valid])
    fde_per_agent = dist[:, np.arange(n), last_idx]  # [K, N]
    agent_has = valid.any(-1)
    fde = (fde_per_agent * agent_has).sum(-1) / max(agent_has.sum(), 1)
    ml = int(np.argmax(probs))
    return {
        "ml_ade": float(ade[ml]),
        "min_ade": float(ade.min()),
        "ml_fde": float(fde[ml]),
        "min_fde": float(fde.min()),
    }


def _winding_guarded(xy1: np.ndarray, xy2: np.ndarray, eps: float = 1e-3) -> float:
    """Winding angle that tolerates near-coincident points (clamped bearings)."""
    try:
        return angular_distance(xy1, xy2)
    except CoincidentAgents:
        delta = np.asarray(xy1, dtype=np.float64) - np.asarray(xy2, dtype=np.float64)
        a, b = delta[:-1], delta[1:]
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        dot = (a * b).sum(-1)
        raw = np.hypot(*a.T) * np.hypot(*b.T)
        bad = raw < eps * eps
        denom = np.maximum(raw, eps * eps)
        inc = np.arctan2(np.where(bad, 0.0, cross / denom), np.where(bad, 1.0, dot / denom))
        return float(inc.sum())


def realized_scene_mode(pred_poses: np.ndarray, scene: Scene, theta_hat: float) -> SceneMode:
    """Relabel a decoded joint trajectory set [N, T, 4] the same way logged
    futures are labeled."""
    n = scene.num_agents
    a2l = []
    for i in range(n):
        lane_idx, _ = unitary_a2l(Pose4.from_array(pred_poses[i, -1]), scene.lane_graph)
        a2l.append(lane_idx)
    cur = np.stack([a.current_pose.xy for a in scene.agents])
    a2a = []
    for i, j in iter_pairs(n):
        xy_i = np.vstack([cur[i][None], pred_poses[i, :, :2]])
        xy_j = np.vstack([cur[j][None], pred_poses[j, :, :2]])
        a2a.append(homotopy_class(_winding_guarded(xy_i, xy_j), theta_hat))
    return SceneMode(tuple(a2l), tuple(a2a))


def consistency_counts(
    realized: Sequence[SceneMode],
    conditioned: Sequence[SceneMode],
) -> dict[str, tuple[int, int]]:
    """Factor-level (hits, total) of decodes realizing their conditioning."""
    a2l_hit = a2l_tot = a2a_hit = a2a_tot = 0
    for real, cond in zip(realized, conditioned):
        for r, c in zip(real.a2l, cond.a2l):
            a2l_hit += int(r == c)
            a2l_tot += 1
        for r, c in zip(real.a2a, cond.a2a):
            a2a_hit += int(r == c)
            a2a_tot += 1
    return {"a2l": (a2l_hit, a2l_tot), "a2a": (a2a_hit, a2a_tot)}


def cover_flags(realized: Sequence[SceneMode], ml_index: int, gtsm: SceneMode) -> dict[str, bool]:
    """Scene-level correct (ML sample) and cover (any sample) flags per mode type."""
    def match(mode: SceneMode, kind: str) -> bool:
        if kind == "a2l":
            return mode.a2l == gtsm.a2l
        if kind == "a2a":
            return mode.a2a == gtsm.a2a
        return mode.key() == gtsm.key()

    out = {}
    for kind in ("a2l", "a2a", "sm"):
        out[f"{kind}_correct"] = match(realized[ml_index], kind)
        out[f"{kind}_cover"] = any(match(r, kind) for r in realized)
    return out


def collision_rate(
    pred_xy: np.ndarray,  # [K, N, T, 2]
    probs: np.ndarray,  # [K]
    radii: np.ndarray,  # [N]
    valid: Optional[np.ndarray] = None,  # [N, T]
) -> dict[str, float]:
    """Fraction of agent-pair-steps whose footprint discs overlap."""
    k, n, t, _ = pred_xy.shape
    if n < 2:
        return {"ml": 0.0, "all": 0.0}
    if valid is None:
        valid = np.ones((n, t), dtype=bool)
    rates = np.zeros(k)
    for ki in range(k):
        hits = total = 0
        for i, j in iter_pairs(n):
            both = valid[i] & valid[j]
            if not both.any():
                continue
            d = np.hypot(*(pred_xy[ki, i, both] - pred_xy[ki, j, both]).T)
            hits += int((d < radii[i] + radii[j]).sum())
            total += int(both.sum())
        rates[ki] = hits / max(total, 1)
    ml = int(np.argmax(probs))
    return {"ml": float(rates[ml]), "all": float(rates.mean())}


@dataclass
class MetricAccumulator:
    """Order-independent accumulation of per-scene results."""

    sums: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def add(self, name: str, value: float, weight: float = 1.0) -> None:
        self.sums[name] = self.sums.get(name, 0.0) + value
        self.counts[name] = self.counts.get(name, 0.0) + weight

    def add_ratio(self, name: str, hits: int, total: int) -> None:
        if total:
            self.sums[name] = self.sums.get(name, 0.0) + hits
            self.counts[name] = self.counts.get(name, 0.0) + total

    def result(self) -> dict[str, float]:
        return {k: self.sums[k] / self.counts[k] for k in sorted(self.sums) if self.counts[k]}


def evaluate_model(
    model: ScenePredictionModel,
    labeled: Sequence[LabeledScene],
    k: int,
    n_factors: int = 4,
    strategy: Optional[str] = None,
) -> dict[str, float]:
    """Full metric table over a labeled scene set (eval-mode sampling:
    no ground-truth forcing, no lane augmentation)."""
    theta_hat = model.cfg.theta_hat
    acc = MetricAccumulator()
    for item in labeled:
        scene, gtsm = item.scene, item.gtsm
        pred: PredictionResult = model.predict(scene, k=k, n_factors=n_factors, strategy=strategy)
        n = scene.num_agents

        gt_xy = np.stack([a.future.xy for a in scene.agents])
        gt_valid = np.stack([a.future.valid for a in scene.agents])
        disp = ade_fde(pred.poses[..., :2], pred.probs, gt_xy, gt_valid)
        for key, v in disp.items():
            acc.add(key, v)

        # marginal top-1 accuracy, pooled per factor
        a2l_hits = sum(int(np.argmax(pred.a2l_logp[i]) == gtsm.a2l[i]) for i in range(n))
        acc.add_ratio("a2l_accuracy", a2l_hits, n)
        acc.add("a2l_ml_correct", a2l_hits / n)
        if n > 1:
            a2a_hits = sum(
                int(np.argmax(pred.a2a_logp[p]) == int(gtsm.a2a[p])) for p in range(len(gtsm.a2a))
            )
            acc.add_ratio("a2a_accuracy", a2a_hits, len(gtsm.a2a))
            acc.add("a2a_ml_correct", a2a_hits / len(gtsm.a2a))

        # joint mode picked by the energy ranking
        sm_hit = int(pred.samples[pred.ml_index].key() == gtsm.key())
        acc.add("sm_accuracy", sm_hit)
        acc.add("sm_ml_correct", sm_hit)

        realized = [
            realized_scene_mode(pred.poses[ki], scene, theta_hat) for ki in range(len(pred.samples))
        ]
        cons = consistency_counts(realized, pred.samples)
        acc.add_ratio("a2l_consistency", *cons["a2l"])
        acc.add_ratio("a2a_consistency", *cons["a2a"])
        for key, flag in cover_flags(realized, pred.ml_index, gtsm).items():
            acc.add(key, float(flag))

        radii = np.array([a.static.disc_radius for a in scene.agents])
        coll = collision_rate(pred.poses[..., :2], pred.probs, radii)
        acc.add("collision_ml", coll["ml"])
        acc.add("collision_all", coll["all"])
    report = acc.result()
    report["num_scenes"] = float(len(labeled))
    return report
