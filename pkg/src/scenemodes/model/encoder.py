"""Scene encoder: local-only embeddings plus factorized attention and GNN rounds.

Node values carry no global coordinates; global poses live in auxiliary
tensors and only enter attention through relative-geometry edge features,
so all value tensors are invariant under rigid transforms of the scene.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from ..batching import NUM_REL_CODES, SceneBatch
from ..modes import PairwiseA2L
from .config import ModelConfig
from .layers import CeeAttention, EdgeUpdate, Mlp, NodeUpdate
from .tgeom import polyline_project, rel_pose

N_PAIRWISE_LABELS = len(PairwiseA2L)
AGENT_FEAT_DIM = 3 + 2 + 3  # type one-hot, size, (speed, accel, yaw rate)
A2A_RAW_DIM = 4 + 6
A2L_RAW_DIM = 15 + N_PAIRWISE_LABELS
L2L_RAW_DIM = 16 + NUM_REL_CODES


@dataclass
class ContextTensors:
    """Encoder outputs shared by the mode heads and the decoder."""

    agent_hist: torch.Tensor  # [B, N, Th, d]
    lanes: torch.Tensor  # [B, M, d]
    a2a_edges: torch.Tensor  # [B, N, N, Th, d]
    a2l_edges: torch.Tensor  # [B, N, M, Th, d]
    raw_a2a: torch.Tensor  # [B, N, N, Th, A2A_RAW_DIM]
    raw_a2l: torch.Tensor  # [B, N, M, Th, A2L_RAW_DIM]
    raw_l2l: torch.Tensor  # [B, M, M, L2L_RAW_DIM]
    hist_mask: torch.Tensor  # [B, N, Th]
    agent_mask: torch.Tensor  # [B, N]
    lane_mask: torch.Tensor  # [B, M]
    agent_future: Optional[torch.Tensor] = None  # [B(, K), N, Tf, d], decoder-owned

    @property
    def a2a_mask(self) -> torch.Tensor:
        return self.hist_mask[:, :, None, :] & self.hist_mask[:, None, :, :]

    @property
    def a2l_mask(self) -> torch.Tensor:
        return self.hist_mask[:, :, None, :] & self.lane_mask[:, None, :, None]


def agent_static_raw(batch: SceneBatch, pos_scale: float) -> torch.Tensor:
    """Per-frame static payload of each agent: one-hot type, size, speed. [B, N, Th, 6]."""
    b, n, t = batch.hist_speed.shape
    onehot = torch.nn.functional.one_hot(batch.agent_type, 3).to(batch.hist_speed.dtype)
    out = torch.cat(
        [
            onehot[:, :, None, :].expand(b, n, t, 3),
            (batch.agent_size * pos_scale)[:, :, None, :].expand(b, n, t, 2),
            (batch.hist_speed * pos_scale)[..., None],
        ],
        dim=-1,
    )
    return out


def scale_pose_block(rel: torch.Tensor, pos_scale: float) -> torch.Tensor:
    """Scale the translation entries of an [..., 4] relative pose."""
    return torch.cat([rel[..., :2] * pos_scale, rel[..., 2:]], dim=-1)


def compute_raw_a2a(batch: SceneBatch, pos_scale: float) -> torch.Tensor:
    """[B, N, N, Th, 10]: relative pose of j in i's frame plus j's statics."""
    x_i = batch.hist_pose[:, :, None, :, :]  # [B, N, 1, Th, 4]
    x_j = batch.hist_pose[:, None, :, :, :]  # [B, 1, N, Th, 4]
    rel = scale_pose_block(rel_pose(x_i, x_j), pos_scale)
    stat_j = agent_static_raw(batch, pos_scale)[:, None, :, :, :].expand(
        rel.shape[0], rel.shape[1], rel.shape[2], rel.shape[3], 6
    )
    return torch.cat([rel, stat_j], dim=-1)


def compute_a2l_geometry(
    query_pose: torch.Tensor,
    batch: SceneBatch,
    pos_scale: float,
) -> torch.Tensor:
    """[..., M, 15] agent-lane geometry for query poses [..., 4] (leading dim B).

    Blocks: relative pose to the projection point, to the lane start, to the
    lane end, then (lat, s, in_extent).
    """
    lead = query_pose.shape[:-1]  # (B, ...)
    m, p = batch.lane_pts.shape[1], batch.lane_pts.shape[2]
    q = query_pose[..., None, :]  # [..., 1, 4]
    view = (lead[0],) + (1,) * (len(lead) - 1) + (m, p, 4)
    pts = batch.lane_pts.view(view).expand(*lead, m, p, 4)
    pt_mask = batch.lane_pt_mask.view(view[:-1]).expand(*lead, m, p)
    proj = polyline_project(q.expand(*lead, m, 4), pts, pt_mask)

    first_pt = pts[..., 0, :]
    n_pts = pt_mask.sum(-1).clamp_min(1)
    last_pt = torch.gather(pts, -2, (n_pts - 1)[..., None, None].expand(*lead, m, 1, 4)).squeeze(-2)

    qm = q.expand(*lead, m, 4)
    feats = torch.cat(
        [
            scale_pose_block(rel_pose(qm, proj["proj_pose"]), pos_scale),
            scale_pose_block(rel_pose(qm, first_pt), pos_scale),
            scale_pose_block(rel_pose(qm, last_pt), pos_scale),
            (proj["lat"] * pos_scale)[..., None],
            (proj["s"] * pos_scale)[..., None],
            proj["in_extent"].to(q.dtype)[..., None],
        ],
        dim=-1,
    )
    return feats


def compute_raw_a2l(batch: SceneBatch, pos_scale: float) -> torch.Tensor:
    """[B, N, M, Th, 22]: geometry plus the one-hot pairwise history token."""
    geom = compute_a2l_geometry(batch.hist_pose, batch, pos_scale)  # [B, N, Th, M, 15]
    geom = geom.permute(0, 1, 3, 2, 4)  # [B, N, M, Th, 15]
    tokens = torch.nn.functional.one_hot(batch.a2l_hist_tokens, N_PAIRWISE_LABELS).to(geom.dtype)
    return torch.cat([geom, tokens], dim=-1)


def compute_raw_l2l(batch: SceneBatch, pos_scale: float) -> torch.Tensor:
    """[B, M, M, 21]: endpoint relative poses plus the one-hot lane relation."""
    pts, mask = batch.lane_pts, batch.lane_pt_mask
    first = pts[:, :, 0, :]
    n_pts = mask.sum(-1).clamp_min(1)
    b, m = first.shape[:2]
    last = torch.gather(pts, 2, (n_pts - 1)[..., None, None].expand(b, m, 1, 4)).squeeze(2)
    blocks = []
    for a in (first, last):
        for c in (first, last):
            blocks.append(scale_pose_block(rel_pose(a[:, :, None, :], c[:, None, :, :]), pos_scale))
    rel_onehot = torch.nn.functional.one_hot(batch.lane_rel, NUM_REL_CODES).to(first.dtype)
    return torch.cat(blocks + [rel_onehot], dim=-1)


def resample_lane_local(batch: SceneBatch, n_samples: int, pos_scale: float) -> torch.Tensor:
    """Lane shape descriptor: n_samples arc-length-uniform points in the
    first-point frame, plus width and length. [B, M, 4*n_samples + 2]."""
    pts, mask = batch.lane_pts, batch.lane_pt_mask
    b, m, p, _ = pts.shape
    seg_valid = mask[..., 1:] & mask[..., :-1]
    d = pts[..., 1:, :2] - pts[..., :-1, :2]
    seg_len = torch.where(seg_valid, (d * d).sum(-1).clamp_min(1e-18).sqrt(), torch.zeros(()).to(pts))
    cum = torch.cumsum(seg_len, dim=-1)
    total = cum[..., -1:].clamp_min(1e-9)
    cum0 = torch.cat([torch.zeros_like(cum[..., :1]), cum], dim=-1)  # [B, M, P]

    u = torch.linspace(0, 1, n_samples, dtype=pts.dtype, device=pts.device)
    target = u[None, None, :] * total  # [B, M, R]
    idx = (torch.searchsorted(cum, target.contiguous(), right=False)).clamp_max(p - 2)
    take = lambda x, i: torch.gather(x, -1, i)
    seg_l = take(seg_len, idx).clamp_min(1e-9)
    t = ((target - take(cum0, idx)) / seg_l).clamp(0.0, 1.0)
    p0 = torch.gather(pts[..., :-1, :2], 2, idx[..., None].expand(b, m, n_samples, 2))
    dv = torch.gather(d, 2, idx[..., None].expand(b, m, n_samples, 2))
    xy = p0 + t[..., None] * dv
    seg_norm = dv / seg_l[..., None]
    sampled = torch.cat([xy, seg_norm[..., 1:2], seg_norm[..., 0:1]], dim=-1)  # (x, y, sin, cos)

    local = rel_pose(sampled[:, :, 0:1, :], sampled)  # first-point frame
    local = scale_pose_block(local, pos_scale).reshape(b, m, 4 * n_samples)
    extras = torch.stack([batch.lane_half_width * pos_scale, total.squeeze(-1) * pos_scale], dim=-1)
    return torch.cat([local, extras], dim=-1)


class GnnA2A(nn.Module):
    """One message-passing round on the agent-agent edges."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.edge_update = EdgeUpdate(d_model)
        self.node_update = NodeUpdate(d_model, n_heads)

    def forward(self, hist, edges, edge_mask):
        n = hist.shape[1]
        src = hist[:, :, None, :, :].expand_as(edges)
        dst = hist[:, None, :, :, :].expand_as(edges)
        edges = self.edge_update(edges, src, dst)
        incident = edges.permute(0, 1, 3, 2, 4)  # [B, N, Th, N(dst), d]
        inc_mask = edge_mask.permute(0, 1, 3, 2)
        hist = self.node_update(hist, incident, inc_mask)
        return hist, edges


class GnnA2L(nn.Module):
    """One message-passing round on the agent-lane edges (updates both ends)."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.edge_update = EdgeUpdate(d_model)
        self.agent_update = NodeUpdate(d_model, n_heads)
        self.lane_update = NodeUpdate(d_model, n_heads)

    def forward(self, hist, lanes, edges, edge_mask):
        b, n, m, t, d = edges.shape
        src = hist[:, :, None, :, :].expand_as(edges)
        dst = lanes[:, None, :, None, :].expand_as(edges)
        edges = self.edge_update(edges, src, dst)
        agent_inc = edges.permute(0, 1, 3, 2, 4)  # [B, N, Th, M, d]
        agent_mask = edge_mask.permute(0, 1, 3, 2)
        hist = self.agent_update(hist, agent_inc, agent_mask)
        lane_inc = edges.permute(0, 2, 1, 3, 4).reshape(b, m, n * t, d)
        lane_inc_mask = edge_mask.permute(0, 2, 1, 3).reshape(b, m, n * t)
        lanes = self.lane_update(lanes, lane_inc, lane_inc_mask)
        return hist, lanes, edges


class SceneEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, h = cfg.d_model, cfg.n_heads
        self.agent_embed = Mlp(AGENT_FEAT_DIM, d, d)
        self.lane_embed = Mlp(4 * cfg.lane_resample_points + 2, d, d)
        self.a2a_embed = Mlp(A2A_RAW_DIM, d, d)
        self.a2l_embed = Mlp(A2L_RAW_DIM, d, d)
        self.hist_pos = nn.Parameter(torch.zeros(cfg.history_len, d))
        nn.init.normal_(self.hist_pos, std=0.02)

        r = cfg.encoder_rounds
        self.temporal_attn = nn.ModuleList(CeeAttention(d, h) for _ in range(r))
        self.a2a_attn = nn.ModuleList(CeeAttention(d, h, A2A_RAW_DIM) for _ in range(r))
        self.a2l_attn = nn.ModuleList(CeeAttention(d, h, A2L_RAW_DIM) for _ in range(r))
        self.l2l_attn = nn.ModuleList(CeeAttention(d, h, L2L_RAW_DIM) for _ in range(r))
        self.gnn_a2a = nn.ModuleList(GnnA2A(d, h) for _ in range(r))
        self.gnn_a2l = nn.ModuleList(GnnA2L(d, h) for _ in range(r))

    def agent_features(self, batch: SceneBatch) -> torch.Tensor:
        """Local per-frame features; masked frames contribute zeros."""
        sc = self.cfg.pos_scale
        pose, speed, valid = batch.hist_pose, batch.hist_speed, batch.hist_mask
        prev_ok = torch.zeros_like(valid)
        prev_ok[..., 1:] = valid[..., 1:] & valid[..., :-1]
        accel = torch.zeros_like(speed)
        accel[..., 1:] = (speed[..., 1:] - speed[..., :-1]) / batch.dt_hist
        sin_d = pose[..., 1:, 2] * pose[..., :-1, 3] - pose[..., 1:, 3] * pose[..., :-1, 2]
        cos_d = pose[..., 1:, 3] * pose[..., :-1, 3] + pose[..., 1:, 2] * pose[..., :-1, 2]
        yaw_rate = torch.zeros_like(speed)
        yaw_rate[..., 1:] = torch.atan2(sin_d, cos_d) / batch.dt_hist
        accel = torch.where(prev_ok, accel, torch.zeros_like(accel))
        yaw_rate = torch.where(prev_ok, yaw_rate, torch.zeros_like(yaw_rate))
        feats = torch.cat(
            [
                agent_static_raw(batch, sc),
                (accel * sc)[..., None],
                yaw_rate[..., None],
            ],
            dim=-1,
        )
        return feats * valid[..., None]

    def embed(self, batch: SceneBatch) -> ContextTensors:
        """Blocks from purely local information plus cached raw edge features."""
        sc = self.cfg.pos_scale
        t_h = batch.history_len
        if t_h > self.cfg.history_len:
            raise ValueError(f"history length {t_h} exceeds configured {self.cfg.history_len}")
        agent_hist = self.agent_embed(self.agent_features(batch)) + self.hist_pos[:t_h]
        agent_hist = agent_hist * batch.hist_mask[..., None]
        lanes = self.lane_embed(resample_lane_local(batch, self.cfg.lane_resample_points, sc))
        lanes = lanes * batch.lane_mask[..., None]
        raw_a2a = compute_raw_a2a(batch, sc)
        raw_a2l = compute_raw_a2l(batch, sc)
        raw_l2l = compute_raw_l2l(batch, sc)
        ctx = ContextTensors(
            agent_hist=agent_hist,
            lanes=lanes,
            a2a_edges=self.a2a_embed(raw_a2a),
            a2l_edges=self.a2l_embed(raw_a2l),
            raw_a2a=raw_a2a,
            raw_a2l=raw_a2l,
            raw_l2l=raw_l2l,
            hist_mask=batch.hist_mask,
            agent_mask=batch.agent_mask,
            lane_mask=batch.lane_mask,
        )
        ctx.a2a_edges = ctx.a2a_edges * ctx.a2a_mask[..., None]
        ctx.a2l_edges = ctx.a2l_edges * ctx.a2l_mask[..., None]
        return ctx

    def forward(self, batch: SceneBatch) -> ContextTensors:
        """Embed then run the fixed per-round schedule: temporal self-attention,
        agent-agent and agent-lane cross attention, lane self-attention, GNN."""
        ctx = self.embed(batch)
        b, n, t_h = ctx.hist_mask.shape
        m = ctx.lane_mask.shape[1]
        for r in range(self.cfg.encoder_rounds):
            hist = self.temporal_attn[r](ctx.agent_hist, ctx.agent_hist, key_mask=ctx.hist_mask)

            x = hist.permute(0, 2, 1, 3)  # [B, Th, N, d]
            edge = ctx.raw_a2a.permute(0, 3, 1, 2, 4)  # [B, Th, N, N, e]
            key_mask = ctx.hist_mask.permute(0, 2, 1)[:, :, None, :].expand(b, t_h, n, n)
            x = self.a2a_attn[r](x, x, edge=edge, key_mask=key_mask)
            hist = x.permute(0, 2, 1, 3)

            if m > 0:
                xq = hist.reshape(b, n * t_h, -1)
                edge = ctx.raw_a2l.permute(0, 1, 3, 2, 4).reshape(b, n * t_h, m, -1)
                xq = self.a2l_attn[r](xq, ctx.lanes, edge=edge, key_mask=ctx.lane_mask)
                hist = xq.reshape(b, n, t_h, -1)
                lanes = self.l2l_attn[r](ctx.lanes, ctx.lanes, edge=ctx.raw_l2l, key_mask=ctx.lane_mask)
            else:
                lanes = ctx.lanes

            hist = hist * ctx.hist_mask[..., None]
            hist, a2a_edges = self.gnn_a2a[r](hist, ctx.a2a_edges, ctx.a2a_mask)
            if m > 0:
                hist, lanes, a2l_edges = self.gnn_a2l[r](hist, lanes, ctx.a2l_edges, ctx.a2l_mask)
            else:
                a2l_edges = ctx.a2l_edges
            ctx.agent_hist = hist * ctx.hist_mask[..., None]
            ctx.lanes = lanes * ctx.lane_mask[..., None]
            ctx.a2a_edges = a2a_edges * ctx.a2a_mask[..., None]
            ctx.a2l_edges = a2l_edges * ctx.a2l_mask[..., None]
        return ctx
