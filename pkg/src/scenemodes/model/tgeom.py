"""Batched, differentiable geometry on torch tensors.

Mirrors the scalar geometry/mode formulas for use inside the network and the
consistency losses: relative poses, masked polyline projection, winding
angles, mode margins, and the unicycle integrator. Poses are [..., 4] as
(X, Y, sin, cos); padded polyline points are masked, assumed contiguous from
index 0.
"""

from __future__ import annotations

import math

import torch

from ..scene import AgentType

EPS_SEG = 1e-9
BEARING_EPS = 1e-3  # meters; clamps the winding denominator near coincidence

# Per-type control bounds: (v_max, a_max, w_max). Cyclists use the vehicle
# unicycle bounds; pedestrians get a low speed cap and a free yaw rate.
_LIMITS = {
    AgentType.VEHICLE: (30.0, 6.0, 1.0),
    AgentType.CYCLIST: (30.0, 6.0, 1.0),
    AgentType.PEDESTRIAN: (3.0, 10.0, math.inf),
}


def rel_pose(x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
    """Pose of x2 in x1's frame; broadcasts over leading dims."""
    dx = x2[..., 0] - x1[..., 0]
    dy = x2[..., 1] - x1[..., 1]
    s1, c1 = x1[..., 2], x1[..., 3]
    s2, c2 = x2[..., 2], x2[..., 3]
    return torch.stack(
        [
            c1 * dx + s1 * dy,
            -s1 * dx + c1 * dy,
            c1 * s2 - s1 * c2,
            c1 * c2 + s1 * s2,
        ],
        dim=-1,
    )


def polyline_project(
    pose: torch.Tensor,
    pts: torch.Tensor,
    pt_mask: torch.Tensor,
) -> dict[str, torch.Tensor]:
    """Project poses [..., 4] onto padded polylines pts [..., P, 4].

    Returns s (clamped), s_raw (signed overshoot kept), lat (left positive),
    dheading, in_extent, arc_length, and proj_pose [..., 4]. Exact vertex
    ties resolve to the later segment so headings come from the following
    segment.
    """
    seg_valid = pt_mask[..., 1:] & pt_mask[..., :-1]
    p0 = pts[..., :-1, :2]
    d = pts[..., 1:, :2] - p0
    seg_len = torch.sqrt((d * d).sum(-1).clamp_min(EPS_SEG**2))
    seg_len = torch.where(seg_valid, seg_len, torch.ones_like(seg_len))
    cum = torch.cumsum(torch.where(seg_valid, seg_len, torch.zeros_like(seg_len)), dim=-1)
    cum0 = torch.cat([torch.zeros_like(cum[..., :1]), cum[..., :-1]], dim=-1)
    arc_length = cum[..., -1]

    rel = pose[..., None, :2] - p0
    t_raw = (rel * d).sum(-1) / (seg_len**2)
    t = t_raw.clamp(0.0, 1.0)
    closest = p0 + t[..., None] * d
    diff = pose[..., None, :2] - closest
    dist2 = (diff * diff).sum(-1)
    dist2 = torch.where(seg_valid, dist2, torch.full_like(dist2, torch.inf))

    n_seg = dist2.shape[-1]
    idx = n_seg - 1 - torch.argmin(dist2.flip(-1), dim=-1)  # later segment wins exact ties
    idx_ = idx[..., None]

    take = lambda x: torch.gather(x, -1, idx_).squeeze(-1)
    t_sel = take(t)
    t_raw_sel = take(t_raw)
    len_sel = take(seg_len)
    cum_sel = take(cum0)
    d_sel = torch.gather(d, -2, idx_[..., None].expand(*idx.shape, 1, 2)).squeeze(-2)
    diff_sel = torch.gather(diff, -2, idx_[..., None].expand(*idx.shape, 1, 2)).squeeze(-2)
    closest_sel = torch.gather(closest, -2, idx_[..., None].expand(*idx.shape, 1, 2)).squeeze(-2)

    s = cum_sel + t_sel * len_sel
    n_valid_seg = seg_valid.sum(-1)
    last_idx = (n_valid_seg - 1).clamp_min(0)
    before = (idx == 0) & (t_raw_sel < 0.0)
    after = (idx == last_idx) & (t_raw_sel > 1.0)
    s_raw = torch.where(before | after, cum_sel + t_raw_sel * len_sel, s)
    in_extent = ~(before | after)

    lat = (d_sel[..., 0] * diff_sel[..., 1] - d_sel[..., 1] * diff_sel[..., 0]) / len_sel
    seg_sin = d_sel[..., 1] / len_sel
    seg_cos = d_sel[..., 0] / len_sel
    rel_sin = seg_cos * pose[..., 2] - seg_sin * pose[..., 3]
    rel_cos = seg_cos * pose[..., 3] + seg_sin * pose[..., 2]
    dheading = torch.atan2(rel_sin, rel_cos)
    proj_pose = torch.cat([closest_sel, seg_sin[..., None], seg_cos[..., None]], dim=-1)
    return {
        "s": s,
        "s_raw": s_raw,
        "lat": lat,
        "dheading": dheading,
        "in_extent": in_extent,
        "arc_length": arc_length,
        "proj_pose": proj_pose,
    }


def lane_margin(
    pose: torch.Tensor,
    pts: torch.Tensor,
    pt_mask: torch.Tensor,
    half_width: torch.Tensor,
) -> torch.Tensor:
    """Differentiable on-lane margin min(width clearance, end clearances)."""
    proj = polyline_project(pose, pts, pt_mask)
    terms = torch.stack(
        [half_width - proj["lat"].abs(), proj["s_raw"], proj["arc_length"] - proj["s_raw"]],
        dim=-1,
    )
    return terms.min(dim=-1).values


def winding_angle(xy1: torch.Tensor, xy2: torch.Tensor, eps: float = BEARING_EPS) -> torch.Tensor:
    """Accumulated wrapped bearing change of (xy1 - xy2) over [..., T, 2].

    Increments come from atan2(cross, dot) of consecutive offsets. Within eps
    of coincidence the increment is treated as zero, keeping the graph free
    of NaNs (atan2 has no gradient at the origin).
    """
    delta = xy1 - xy2
    a = delta[..., :-1, :]
    b = delta[..., 1:, :]
    cross = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    dot = (a * b).sum(-1)
    raw = a.norm(dim=-1) * b.norm(dim=-1)
    degenerate = raw < eps * eps
    denom = raw.clamp_min(eps * eps)
    c = torch.where(degenerate, torch.zeros_like(cross), cross / denom)
    d = torch.where(degenerate, torch.ones_like(dot), dot / denom)
    inc = torch.atan2(c, d)
    return inc.sum(-1)


def homotopy_margins(dtheta: torch.Tensor, theta_hat: float) -> torch.Tensor:
    """(CW, S, CCW) margins stacked on a trailing axis."""
    return torch.stack(
        [-dtheta - theta_hat, theta_hat - dtheta.abs(), dtheta - theta_hat],
        dim=-1,
    )


def control_limits(agent_type: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(v_max, a_max, w_max) tensors looked up per agent type."""
    table = torch.tensor(
        [_LIMITS[AgentType(t)] for t in range(3)],
        dtype=torch.float64,
        device=agent_type.device,
    )
    lim = table[agent_type]
    return lim[..., 0], lim[..., 1], lim[..., 2]


def unicycle_step(
    pose: torch.Tensor,
    speed: torch.Tensor,
    accel: torch.Tensor,
    yaw_rate: torch.Tensor,
    dt: torch.Tensor | float,
    limits: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
) -> tuple[torch.Tensor, torch.Tensor]:
    """One clamped Euler step of the unicycle; pose is [..., 4]."""
    v_max, a_max, w_max = limits
    a = torch.clamp(accel, -a_max, a_max)
    w = torch.where(torch.isinf(w_max), yaw_rate, torch.clamp(yaw_rate, -w_max, w_max))
    if not torch.is_tensor(dt):
        dt = torch.as_tensor(dt, dtype=pose.dtype, device=pose.device)
    v = torch.clamp(speed + a * dt, torch.zeros_like(v_max), v_max)
    dth = w * dt
    sin_d, cos_d = torch.sin(dth), torch.cos(dth)
    sin_n = pose[..., 2] * cos_d + pose[..., 3] * sin_d
    cos_n = pose[..., 3] * cos_d - pose[..., 2] * sin_d
    x_n = pose[..., 0] + v * cos_n * dt
    y_n = pose[..., 1] + v * sin_n * dt
    return torch.stack([x_n, y_n, sin_n, cos_n], dim=-1), v


def unicycle_rollout(
    init_pose: torch.Tensor,
    init_speed: torch.Tensor,
    controls: torch.Tensor,
    dt: torch.Tensor | float,
    agent_type: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Integrate controls [..., T, 2] (accel, yaw rate) from an initial state.

    Returns poses [..., T, 4] and speeds [..., T]; differentiable w.r.t. the
    controls away from the clamp boundaries.
    """
    limits = control_limits(agent_type)
    pose, speed = init_pose, init_speed
    poses, speeds = [], []
    for t in range(controls.shape[-2]):
        pose, speed = unicycle_step(pose, speed, controls[..., t, 0], controls[..., t, 1], dt, limits)
        poses.append(pose)
        speeds.append(speed)
    return torch.stack(poses, dim=-2), torch.stack(speeds, dim=-1)
