"""Padding scenes into batched tensors with masks.

Padding must never change any unmasked computation: padded agents, lanes,
frames and polyline points all carry mask bits that the model honors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .modes import DEFAULT_ALIGN_THRESH, pairwise_a2l
from .scene import LaneRelation, Pose4, Scene

# lane relation codes inside the batch tensors
REL_NONE = 0
REL_CODES = {
    LaneRelation.NEXT: 1,
    LaneRelation.PREV: 2,
    LaneRelation.LEFT_ADJ: 3,
    LaneRelation.RIGHT_ADJ: 4,
}
NUM_REL_CODES = 5


@dataclass
class SceneBatch:
    """Padded tensor view of a list of scenes (float64, CPU)."""

    agent_type: torch.Tensor  # [B, N] long
    agent_size: torch.Tensor  # [B, N, 2]
    hist_pose: torch.Tensor  # [B, N, Th, 4]
    hist_speed: torch.Tensor  # [B, N, Th]
    hist_mask: torch.Tensor  # [B, N, Th] bool
    fut_pose: torch.Tensor  # [B, N, Tf, 4]
    fut_speed: torch.Tensor  # [B, N, Tf]
    fut_mask: torch.Tensor  # [B, N, Tf] bool
    agent_mask: torch.Tensor  # [B, N] bool
    ego_index: torch.Tensor  # [B] long
    lane_pts: torch.Tensor  # [B, M, P, 4]
    lane_pt_mask: torch.Tensor  # [B, M, P] bool
    lane_half_width: torch.Tensor  # [B, M]
    lane_mask: torch.Tensor  # [B, M] bool
    lane_rel: torch.Tensor  # [B, M, M] long
    a2l_hist_tokens: torch.Tensor  # [B, N, M, Th] long (7-way pairwise labels)
    dt: float
    dt_hist: float

    @property
    def batch_size(self) -> int:
        return self.agent_type.shape[0]

    @property
    def max_agents(self) -> int:
        return self.agent_type.shape[1]

    @property
    def max_lanes(self) -> int:
        return self.lane_mask.shape[1]

    @property
    def history_len(self) -> int:
        return self.hist_pose.shape[2]

    @property
    def future_len(self) -> int:
        return self.fut_pose.shape[2]

    def current_pose(self) -> torch.Tensor:
        """Last valid history pose per agent, [B, N, 4]."""
        idx = last_valid_index(self.hist_mask)
        return torch.gather(self.hist_pose, 2, idx[..., None, None].expand(-1, -1, 1, 4)).squeeze(2)

    def current_speed(self) -> torch.Tensor:
        idx = last_valid_index(self.hist_mask)
        return torch.gather(self.hist_speed, 2, idx[..., None]).squeeze(2)


def last_valid_index(mask: torch.Tensor) -> torch.Tensor:
    """Index of the last True along the trailing axis (0 if none)."""
    t = mask.shape[-1]
    pos = torch.arange(t, device=mask.device)
    return torch.where(mask, pos, torch.full_like(pos, -1)).max(dim=-1).values.clamp_min(0)


def batch_scenes(
    scenes: Sequence[Scene],
    max_agents: Optional[int] = None,
    max_lanes: Optional[int] = None,
    align_thresh: float = DEFAULT_ALIGN_THRESH,
) -> SceneBatch:
    """Pad a list of scenes to shared agent/lane/point counts.

    All scenes must share history length, future length, dt and dt_hist.
    """
    if not scenes:
        raise ValueError("cannot batch zero scenes")
    t_h = scenes[0].history_len
    t_f = max(s.future_len for s in scenes)
    dt = scenes[0].dt
    dt_hist = scenes[0].dt_hist
    for s in scenes:
        if s.history_len != t_h:
            raise ValueError("scenes in a batch must share the history length")
        if s.future_len not in (0, t_f):
            raise ValueError("scenes in a batch must share the future length")
        if not (math.isclose(s.dt, dt) and math.isclose(s.dt_hist, dt_hist)):
            raise ValueError("scenes in a batch must share dt and dt_hist")

    n_max = max(s.num_agents for s in scenes)
    m_max = max(s.num_lanes for s in scenes)
    if max_agents is not None:
        if max_agents < n_max:
            raise ValueError(f"max_agents={max_agents} below batch maximum {n_max}")
        n_max = max_agents
    if max_lanes is not None:
        if max_lanes < m_max:
            raise ValueError(f"max_lanes={max_lanes} below batch maximum {m_max}")
        m_max = max_lanes
    p_max = max((lane.points.shape[0] for s in scenes for lane in s.lane_graph.lanes), default=2)

    b = len(scenes)
    agent_type = np.zeros((b, n_max), dtype=np.int64)
    agent_size = np.zeros((b, n_max, 2))
    hist_pose = np.zeros((b, n_max, t_h, 4))
    hist_pose[..., 3] = 1.0
    hist_speed = np.zeros((b, n_max, t_h))
    hist_mask = np.zeros((b, n_max, t_h), dtype=bool)
    fut_pose = np.zeros((b, n_max, t_f, 4)) if t_f else np.zeros((b, n_max, 0, 4))
    fut_pose[..., 3] = 1.0
    fut_speed = np.zeros((b, n_max, t_f))
    fut_mask = np.zeros((b, n_max, t_f), dtype=bool)
    agent_mask = np.zeros((b, n_max), dtype=bool)
    ego_index = np.zeros(b, dtype=np.int64)
    lane_pts = np.zeros((b, m_max, p_max, 4))
    lane_pts[..., 3] = 1.0
    lane_pt_mask = np.zeros((b, m_max, p_max), dtype=bool)
    lane_half_width = np.ones((b, m_max))
    lane_mask = np.zeros((b, m_max), dtype=bool)
    lane_rel = np.zeros((b, m_max, m_max), dtype=np.int64)
    a2l_tokens = np.zeros((b, n_max, m_max, t_h), dtype=np.int64)

    for bi, scene in enumerate(scenes):
        ego_index[bi] = scene.ego_index
        for ai, agent in enumerate(scene.agents):
            agent_type[bi, ai] = int(agent.static.agent_type)
            agent_size[bi, ai] = (agent.static.length, agent.static.width)
            hist_pose[bi, ai] = agent.history.poses
            hist_speed[bi, ai] = agent.history.speeds
            hist_mask[bi, ai] = agent.history.valid
            agent_mask[bi, ai] = True
            if agent.future is not None:
                fut_pose[bi, ai] = agent.future.poses
                fut_speed[bi, ai] = agent.future.speeds
                fut_mask[bi, ai] = agent.future.valid
        for li, lane in enumerate(scene.lane_graph.lanes):
            p = lane.points.shape[0]
            lane_pts[bi, li, :p] = lane.points
            # repeat the last point into padding to keep poses well formed
            lane_pts[bi, li, p:] = lane.points[-1]
            lane_pt_mask[bi, li, :p] = True
            lane_half_width[bi, li] = lane.half_width
            lane_mask[bi, li] = True
        for (i, j, rel) in scene.lane_graph.adjacency:
            lane_rel[bi, i - 1, j - 1] = REL_CODES[rel]
        for ai, agent in enumerate(scene.agents):
            for li, lane in enumerate(scene.lane_graph.lanes):
                for t in range(t_h):
                    if agent.history.valid[t]:
                        pose = Pose4.from_array(agent.history.poses[t])
                        a2l_tokens[bi, ai, li, t] = int(pairwise_a2l(pose, lane, align_thresh))

    as_t = lambda a: torch.from_numpy(a)
    return SceneBatch(
        agent_type=as_t(agent_type),
        agent_size=as_t(agent_size),
        hist_pose=as_t(hist_pose),
        hist_speed=as_t(hist_speed),
        hist_mask=as_t(hist_mask),
        fut_pose=as_t(fut_pose),
        fut_speed=as_t(fut_speed),
        fut_mask=as_t(fut_mask),
        agent_mask=as_t(agent_mask),
        ego_index=as_t(ego_index),
        lane_pts=as_t(lane_pts),
        lane_pt_mask=as_t(lane_pt_mask),
        lane_half_width=as_t(lane_half_width),
        lane_mask=as_t(lane_mask),
        lane_rel=as_t(lane_rel),
        a2l_hist_tokens=as_t(a2l_tokens),
        dt=dt,
        dt_hist=dt_hist,
    )
