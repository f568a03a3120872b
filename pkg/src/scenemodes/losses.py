"""Training objective: marginal classification, joint-mode cross-entropy,
reconstruction under the ground-truth mode, mode-consistency penalties, and
regularization.

Batched losses are the mean over scenes of the per-scene values, so a padded
batch matches the average of per-scene losses exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .model.layers import NEG_INF
from .model.tgeom import homotopy_margins, lane_margin, winding_angle

DIST_EPS = 1e-12


class GTMissing(RuntimeError):
    """The sample set carries no ground-truth index."""


@dataclass
class RegWeights:
    params: float = 1e-6
    controls: float = 1e-3
    collision: float = 1.0


@dataclass
class LossWeights:
    """One weight per objective term."""

    marginal_a2l: float = 1.0
    marginal_a2a: float = 1.0
    joint_mode: float = 1.0
    recon: float = 1.0
    consistency_a2l: float = 1.0
    consistency_a2a: float = 1.0
    reg: float = 1.0
    reg_parts: RegWeights = field(default_factory=RegWeights)

    def __post_init__(self):
        for name in ("marginal_a2l", "marginal_a2a", "joint_mode", "recon",
                     "consistency_a2l", "consistency_a2a", "reg"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def loss_marginal(logp: torch.Tensor, targets: torch.Tensor, row_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-probability of the target class over valid rows."""
    rows = logp.reshape(-1, logp.shape[-1])
    tgt = targets.reshape(-1)
    nll = -rows.gather(1, tgt[:, None]).squeeze(1)
    if row_mask is None:
        return nll.mean()
    m = row_mask.reshape(-1)
    denom = m.sum().clamp_min(1)
    return (nll * m).sum() / denom


def loss_joint_sm(
    energies: torch.Tensor,  # [B, K]
    gt_index: torch.Tensor,  # [B]
    sample_mask: torch.Tensor | None = None,  # [B, K]
) -> torch.Tensor:
    """Cross-entropy of the ground-truth sample under softmax over energies."""
    if (gt_index < 0).any():
        raise GTMissing("every scene needs its ground-truth mode inside the sample set")
    if sample_mask is not None:
        energies = energies.masked_fill(~sample_mask, NEG_INF)
    logp = torch.log_softmax(energies, dim=-1)
    return -logp.gather(1, gt_index[:, None]).squeeze(1).mean()


def loss_recon(
    pred_xy: torch.Tensor,  # [B, K, N, T, 2]
    gt_xy: torch.Tensor,  # [B, N, T, 2]
    valid: torch.Tensor,  # [B, N, T]
    gt_index: torch.Tensor,  # [B]
) -> torch.Tensor:
    """Mean Euclidean distance of the GT-mode sample only, over valid frames."""
    if (gt_index < 0).any():
        raise GTMissing("reconstruction needs the ground-truth sample index")
    b = pred_xy.shape[0]
    sel = pred_xy[torch.arange(b), gt_index]  # [B, N, T, 2]
    dist = torch.sqrt(((sel - gt_xy) ** 2).sum(-1) + DIST_EPS)
    per_scene = (dist * valid).flatten(1).sum(-1) / valid.flatten(1).sum(-1).clamp_min(1)
    return per_scene.mean()


def loss_consistency_a2l(
    end_pose: torch.Tensor,  # [B, K, N, 4] decoded final poses
    lane_choice: torch.Tensor,  # [B, K, N] long, 0 = null
    lane_pts: torch.Tensor,  # [B, M, P, 4]
    lane_pt_mask: torch.Tensor,  # [B, M, P]
    lane_half_width: torch.Tensor,  # [B, M]
    agent_mask: torch.Tensor,  # [B, N]
    sample_mask: torch.Tensor | None = None,  # [B, K]
) -> torch.Tensor:
    """relu(-margin) of each agent's conditioned lane, summed per scene.

    Null-lane conditioned agents contribute nothing.
    """
    b, k, n = lane_choice.shape
    m, p = lane_pts.shape[1], lane_pts.shape[2]
    if m == 0:
        return end_pose.sum() * 0.0
    idx = (lane_choice - 1).clamp_min(0)  # [B, K, N]
    pts = lane_pts[:, None].expand(b, k, m, p, 4).gather(
        2, idx[..., None, None].expand(b, k, n, p, 4)
    )
    pmask = lane_pt_mask[:, None].expand(b, k, m, p).gather(2, idx[..., None].expand(b, k, n, p))
    width = lane_half_width[:, None].expand(b, k, m).gather(2, idx)
    margin = lane_margin(end_pose, pts, pmask, width)
    active = (lane_choice > 0) & agent_mask[:, None, :]
    if sample_mask is not None:
        active = active & sample_mask[..., None]
    penalty = torch.relu(-margin) * active
    return penalty.flatten(1).sum(-1).mean()


def loss_consistency_a2a(
    pred_xy: torch.Tensor,  # [B, K, N, T, 2]
    current_xy: torch.Tensor,  # [B, N, 2]
    pair_class: torch.Tensor,  # [B, K, N, N] long (0 CW, 1 S, 2 CCW; 3 self/pad)
    theta_hat: float,
    agent_mask: torch.Tensor,  # [B, N]
    sample_mask: torch.Tensor | None = None,  # [B, K]
) -> torch.Tensor:
    """relu(-margin of the conditioned class) per unordered pair, summed per scene."""
    b, k, n, t, _ = pred_xy.shape
    window = torch.cat([current_xy[:, None, :, None, :].expand(b, k, n, 1, 2), pred_xy], dim=-2)
    dtheta = winding_angle(window[:, :, :, None], window[:, :, None, :])  # [B, K, N, N]
    margins = homotopy_margins(dtheta, theta_hat)  # [B, K, N, N, 3]
    cls = pair_class.clamp_max(2)
    chosen = margins.gather(-1, cls[..., None]).squeeze(-1)
    iu = torch.triu(torch.ones(n, n, dtype=torch.bool, device=pred_xy.device), diagonal=1)
    valid = (
        iu[None, None]
        & (pair_class <= 2)
        & agent_mask[:, None, :, None]
        & agent_mask[:, None, None, :]
    )
    if sample_mask is not None:
        valid = valid & sample_mask[..., None, None]
    penalty = torch.relu(-chosen) * valid
    return penalty.flatten(1).sum(-1).mean()


def collision_penalty(
    pred_xy: torch.Tensor,  # [B, K, N, T, 2]
    disc_radius: torch.Tensor,  # [B, N]
    agent_mask: torch.Tensor,  # [B, N]
    sample_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Sum over pairs and steps of the disc-overlap depth, averaged over samples."""
    b, k, n, t, _ = pred_xy.shape
    diff = pred_xy[:, :, :, None] - pred_xy[:, :, None, :]
    dist = torch.sqrt((diff**2).sum(-1) + DIST_EPS)  # [B, K, N, N, T]
    rsum = disc_radius[:, None, :, None] + disc_radius[:, None, None, :]  # [B, 1, N, N]
    depth = torch.relu(rsum[..., None] - dist)
    iu = torch.triu(torch.ones(n, n, dtype=torch.bool, device=pred_xy.device), diagonal=1)
    valid = iu[None, None] & agent_mask[:, None, :, None] & agent_mask[:, None, None, :]
    if sample_mask is not None:
        valid = valid & sample_mask[..., None, None]
    depth = depth * valid[..., None]
    per_scene = depth.flatten(2).sum(-1)  # [B, K] summed over pairs and steps
    if sample_mask is not None:
        k_eff = sample_mask.sum(-1).clamp_min(1)
        return (per_scene.sum(-1) / k_eff).mean()
    return per_scene.mean(-1).mean()


def loss_reg(
    params,
    controls: torch.Tensor | None,
    pred_xy: torch.Tensor,
    disc_radius: torch.Tensor,
    agent_mask: torch.Tensor,
    weights: RegWeights,
    sample_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Parameter L2 + control effort + disc-approximation collision penalty."""
    total = pred_xy.new_zeros(())
    if weights.params:
        total = total + weights.params * sum((p**2).sum() for p in params)
    if weights.controls and controls is not None:
        total = total + weights.controls * (controls**2).mean()
    if weights.collision:
        total = total + weights.collision * collision_penalty(pred_xy, disc_radius, agent_mask, sample_mask)
    return total


def total_loss(parts: dict[str, torch.Tensor], weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum plus a per-term float breakdown for logging."""
    w = {
        "marginal_a2l": weights.marginal_a2l,
        "marginal_a2a": weights.marginal_a2a,
        "joint_mode": weights.joint_mode,
        "recon": weights.recon,
        "consistency_a2l": weights.consistency_a2l,
        "consistency_a2a": weights.consistency_a2a,
        "reg": weights.reg,
    }
    unknown = set(parts) - set(w)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    total = None
    breakdown = {}
    for name, value in parts.items():
        breakdown[name] = float(value.detach())
        term = w[name] * value
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss parts given")
    breakdown["total"] = float(total.detach())
    return total, breakdown
