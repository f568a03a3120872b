"""Pose algebra, polyline projection, and the relative-geometry edge features.

Everything here is a pure function of its inputs and is exactly invariant
under a rigid transform applied to all arguments (up to floating point),
which is what makes the downstream attention equivariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import AgentStatic, AgentType, LanePolyline, Pose4

STATIC_FEATURE_DIM = 6  # type one-hot (3) + length + width + speed
A2A_EDGE_DIM = 4 + STATIC_FEATURE_DIM
A2L_EDGE_DIM = 3 * 4 + 3  # three relative poses + (lat, s, in_extent)
L2L_EDGE_DIM = 4 * 4


@dataclass(frozen=True)
class FrenetProj:
    """Projection of a pose onto a lane centerline.

    ``s`` is clamped to [0, arc length]; ``s_raw`` keeps the signed
    longitudinal overshoot so callers can tell ahead from behind.
    """

    s: float
    lat: float
    dheading: float
    in_extent: bool
    s_raw: float


@dataclass(frozen=True)
class AgentAux:
    """Global pose plus the per-frame static payload of one agent."""

    pose: Pose4
    static: AgentStatic
    speed: float


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


def relative_pose(x1: Pose4, x2: Pose4) -> Pose4:
    """Pose of x2 expressed in the local frame of x1."""
    dx = x2.x - x1.x
    dy = x2.y - x1.y
    return Pose4(
        x1.cos_h * dx + x1.sin_h * dy,
        -x1.sin_h * dx + x1.cos_h * dy,
        x1.cos_h * x2.sin_h - x1.sin_h * x2.cos_h,
        x1.cos_h * x2.cos_h + x1.sin_h * x2.sin_h,
    )


def transform_pose(frame: Pose4, local: Pose4) -> Pose4:
    """Inverse of relative_pose: map a local pose out through ``frame``."""
    return Pose4(
        frame.x + frame.cos_h * local.x - frame.sin_h * local.y,
        frame.y + frame.sin_h * local.x + frame.cos_h * local.y,
        frame.sin_h * local.cos_h + frame.cos_h * local.sin_h,
        frame.cos_h * local.cos_h - frame.sin_h * local.sin_h,
    )


def transform_xy(frame: Pose4, xy: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to an [..., 2] array of points."""
    xy = np.asarray(xy, dtype=np.float64)
    out = np.empty_like(xy)
    out[..., 0] = frame.x + frame.cos_h * xy[..., 0] - frame.sin_h * xy[..., 1]
    out[..., 1] = frame.y + frame.sin_h * xy[..., 0] + frame.cos_h * xy[..., 1]
    return out


def transform_pose_array(frame: Pose4, poses: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to an [..., 4] array of poses."""
    poses = np.asarray(poses, dtype=np.float64)
    out = np.empty_like(poses)
    out[..., :2] = transform_xy(frame, poses[..., :2])
    out[..., 2] = frame.sin_h * poses[..., 3] + frame.cos_h * poses[..., 2]
    out[..., 3] = frame.cos_h * poses[..., 3] - frame.sin_h * poses[..., 2]
    return out


def _project_full(p: Pose4, lane: LanePolyline) -> tuple[FrenetProj, Pose4]:
    """FrenetProj plus the projection point as a pose with the centerline heading."""
    pts = lane.points[:, :2]
    d = pts[1:] - pts[:-1]  # [S, 2]
    seg_len = lane.seg_lengths
    rel = np.array([p.x, p.y]) - pts[:-1]
    t_raw = (rel * d).sum(axis=1) / (seg_len**2)
    t = np.clip(t_raw, 0.0, 1.0)
    closest = pts[:-1] + t[:, None] * d
    diff = np.array([p.x, p.y]) - closest
    dist2 = (diff**2).sum(axis=1)
    # Exact vertex ties take the later segment, so the reported heading is the
    # following segment's direction.
    n_seg = len(seg_len)
    i = n_seg - 1 - int(np.argmin(dist2[::-1]))

    s = float(lane.cum_lengths[i] + t[i] * seg_len[i])
    s_raw = s
    in_extent = True
    if i == 0 and t_raw[0] < 0.0:
        s_raw = float(t_raw[0] * seg_len[0])
        in_extent = False
    elif i == n_seg - 1 and t_raw[-1] > 1.0:
        s_raw = float(lane.cum_lengths[i] + t_raw[i] * seg_len[i])
        in_extent = False

    lat = float((d[i, 0] * diff[i, 1] - d[i, 1] * diff[i, 0]) / seg_len[i])
    seg_sin = d[i, 1] / seg_len[i]
    seg_cos = d[i, 0] / seg_len[i]
    dheading = wrap_angle(math.atan2(p.sin_h, p.cos_h) - math.atan2(seg_sin, seg_cos))
    proj_pose = Pose4(float(closest[i, 0]), float(closest[i, 1]), float(seg_sin), float(seg_cos))
    return FrenetProj(s, lat, dheading, in_extent, s_raw), proj_pose


def project_onto_polyline(p: Pose4, lane: LanePolyline) -> FrenetProj:
    """Closest-point projection of p onto the lane centerline.

    Left of the travel direction is positive ``lat``; ``in_extent`` is False
    iff the unclamped projection falls before the first or past the last
    segment.
    """
    proj, _ = _project_full(p, lane)
    return proj


def static_feature(static: AgentStatic, speed: float) -> np.ndarray:
    """Fixed-layout per-frame static payload: type one-hot, size, speed."""
    out = np.zeros(STATIC_FEATURE_DIM)
    out[int(static.agent_type)] = 1.0
    out[3] = static.length
    out[4] = static.width
    out[5] = speed
    return out


def a2a_edge_feature(aux1: AgentAux, aux2: AgentAux) -> np.ndarray:
    """Relative pose of agent 2 in agent 1's frame, then agent 2's statics."""
    rel = relative_pose(aux1.pose, aux2.pose)
    return np.concatenate([rel.as_array(), static_feature(aux2.static, aux2.speed)])


def a2l_edge_feature(aux: AgentAux, lane: LanePolyline) -> np.ndarray:
    """Projection point plus lane endpoints in the agent frame, and the Frenet scalars."""
    proj, proj_pose = _project_full(aux.pose, lane)
    blocks = [
        relative_pose(aux.pose, proj_pose).as_array(),
        relative_pose(aux.pose, lane.start).as_array(),
        relative_pose(aux.pose, lane.end).as_array(),
        np.array([proj.lat, proj.s, 1.0 if proj.in_extent else 0.0]),
    ]
    return np.concatenate(blocks)


def l2l_edge_feature(lane1: LanePolyline, lane2: LanePolyline) -> np.ndarray:
    """Relative poses between both endpoints of the two lanes (row-major order)."""
    blocks = []
    for a in (lane1.start, lane1.end):
        for b in (lane2.start, lane2.end):
            blocks.append(relative_pose(a, b).as_array())
    return np.concatenate(blocks)


def distance_to_lane(xy: np.ndarray, lane: LanePolyline) -> float:
    """Euclidean distance from a point to the clamped closest centerline point."""
    p = Pose4(float(xy[0]), float(xy[1]), 0.0, 1.0)
    proj, proj_pose = _project_full(p, lane)
    return float(math.hypot(p.x - proj_pose.x, p.y - proj_pose.y))
