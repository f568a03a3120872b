"""Mode-conditioned trajectory decoder.

The future block's auxiliary poses start at the agents' current positions
and are refreshed after every decoding round. The conditioned scene mode
enters only through tokens appended to the custom edge features. Controls
are integrated through the unicycle model unless dynamics are disabled, in
which case the head emits local waypoints directly.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from ..batching import SceneBatch
from .config import ModelConfig
from .encoder import ContextTensors, compute_a2l_geometry, scale_pose_block
from .layers import CeeAttention, Mlp
from .tgeom import control_limits, rel_pose, unicycle_rollout, unicycle_step

INIT_FEAT_DIM = 6  # type one-hot, length, width, current speed


def squash_controls(raw: torch.Tensor, limits) -> torch.Tensor:
    """Map raw head outputs into the feasible control box with tanh.

    Keeps gradients alive everywhere; the rollout's hard clamps then never
    bind. An unbounded yaw limit (pedestrians) passes through untouched.
    """
    _, a_max, w_max = limits
    a = a_max * torch.tanh(raw[..., 0] / a_max)
    unbounded = torch.isinf(w_max)
    w_fin = torch.where(unbounded, torch.ones_like(w_max), w_max)
    w = torch.where(unbounded, raw[..., 1], w_fin * torch.tanh(raw[..., 1] / w_fin))
    return torch.stack([a, w], dim=-1)


def compose_pose(frame: torch.Tensor, local: torch.Tensor) -> torch.Tensor:
    """Map local poses [..., 4] out through frame poses [..., 4]."""
    sf, cf = frame[..., 2], frame[..., 3]
    x = frame[..., 0] + cf * local[..., 0] - sf * local[..., 1]
    y = frame[..., 1] + sf * local[..., 0] + cf * local[..., 1]
    s = sf * local[..., 3] + cf * local[..., 2]
    c = cf * local[..., 3] - sf * local[..., 2]
    return torch.stack([x, y, s, c], dim=-1)


class TrajectoryDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, h, dt = cfg.d_model, cfg.n_heads, cfg.token_dim
        self.init_embed = Mlp(INIT_FEAT_DIM, d, d)
        self.fut_pos = nn.Parameter(torch.zeros(cfg.future_len, d))
        nn.init.normal_(self.fut_pos, std=0.02)
        self.lane_token = nn.Embedding(2, dt)
        self.pair_token = nn.Embedding(4, dt)
        self.temporal = CeeAttention(d, h)
        self.hist_cross = CeeAttention(d, h)
        self.lane_cross = CeeAttention(d, h, 15 + dt)
        self.agent_cross = CeeAttention(d, h, 10 + dt)
        self.control_head = Mlp(d, d, 2, norm_in=True)
        self.direct_head = Mlp(d, d, 4, norm_in=True)

    def _init_values(self, batch: SceneBatch, k: int) -> torch.Tensor:
        sc = self.cfg.pos_scale
        onehot = torch.nn.functional.one_hot(batch.agent_type, 3).to(batch.hist_speed.dtype)
        feat = torch.cat(
            [onehot, batch.agent_size * sc, (batch.current_speed() * sc)[..., None]], dim=-1
        )
        t_f = batch.future_len
        if t_f > self.cfg.future_len:
            raise ValueError(f"future length {t_f} exceeds configured {self.cfg.future_len}")
        vals = self.init_embed(feat)[:, None, :, None, :] + self.fut_pos[:t_f]
        return vals.expand(-1, k, -1, -1, -1).contiguous()

    def _attend(
        self,
        vals: torch.Tensor,  # [B, K, N, Tf, d]
        aux_pose: torch.Tensor,  # [B, K, N, Tf, 4]
        aux_speed: torch.Tensor,  # [B, K, N, Tf]
        ctx: ContextTensors,
        batch: SceneBatch,
        lane_tok: torch.Tensor,  # [B, K, N, M, dtok]
        pair_tok: torch.Tensor,  # [B, K, N, N, dtok]
        step_limit: int | None,
    ) -> torch.Tensor:
        """One round of future-block attention; step_limit masks later steps (AR)."""
        cfg = self.cfg
        b, k, n, t_f, d = vals.shape
        m = ctx.lane_mask.shape[1]
        sc = cfg.pos_scale
        device = vals.device

        step_ok = torch.ones(t_f, dtype=torch.bool, device=device)
        if step_limit is not None:
            step_ok = torch.arange(t_f, device=device) <= step_limit
        vals = self.temporal(vals, vals, key_mask=step_ok.expand(b, k, n, t_f))

        hist = ctx.agent_hist[:, None].expand(b, k, n, -1, d)
        hist_mask = ctx.hist_mask[:, None].expand(b, k, n, -1)
        vals = self.hist_cross(vals, hist, key_mask=hist_mask)

        if m > 0:
            geom = compute_a2l_geometry(aux_pose, batch, sc)  # [B, K, N, Tf, M, 15]
            tok = lane_tok[:, :, :, None, :, :].expand(b, k, n, t_f, m, -1)
            edge = torch.cat([geom, tok], dim=-1).reshape(b, k, n * t_f, m, -1)
            lanes = ctx.lanes[:, None].expand(b, k, m, d)
            lane_mask = ctx.lane_mask[:, None].expand(b, k, m)
            x = vals.reshape(b, k, n * t_f, d)
            x = self.lane_cross(x, lanes, edge=edge, key_mask=lane_mask)
            vals = x.reshape(b, k, n, t_f, d)

        x_i = aux_pose[:, :, :, None]  # [B, K, N, 1, Tf, 4]
        x_j = aux_pose[:, :, None]  # [B, K, 1, N, Tf, 4]
        rel = scale_pose_block(rel_pose(x_i, x_j), sc)  # [B, K, N, N, Tf, 4]
        onehot = torch.nn.functional.one_hot(batch.agent_type, 3).to(vals.dtype)
        stat_j = torch.cat(
            [
                onehot[:, None, None, :, None, :].expand(b, k, n, n, t_f, 3),
                (batch.agent_size * sc)[:, None, None, :, None, :].expand(b, k, n, n, t_f, 2),
                (aux_speed * sc)[:, :, None, :, :, None].expand(b, k, n, n, t_f, 1),
            ],
            dim=-1,
        )
        tok = pair_tok[:, :, :, :, None, :].expand(b, k, n, n, t_f, -1)
        edge = torch.cat([rel, stat_j, tok], dim=-1).permute(0, 1, 4, 2, 3, 5)  # [B,K,Tf,N,N,e]
        key_mask = ctx.agent_mask[:, None, None, :].expand(b, k, t_f, n)
        if step_limit is not None:
            key_mask = key_mask & step_ok[None, None, :, None]
        x = vals.permute(0, 1, 3, 2, 4)  # [B, K, Tf, N, d]
        x = self.agent_cross(x, x, edge=edge, key_mask=key_mask)
        return x.permute(0, 1, 3, 2, 4)

    def _direct_states(
        self, vals: torch.Tensor, cur_pose: torch.Tensor, dt: float
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Dynamics-free emission: local waypoints composed onto the current pose."""
        out = self.direct_head(vals)
        local_xy = out[..., :2] / self.cfg.pos_scale
        sin_r, cos_r = out[..., 2], out[..., 3] + 1.0
        norm = torch.sqrt(sin_r**2 + cos_r**2).clamp_min(1e-9)
        local = torch.cat([local_xy, (sin_r / norm)[..., None], (cos_r / norm)[..., None]], dim=-1)
        poses = compose_pose(cur_pose[..., None, :], local)
        prev_xy = torch.cat([cur_pose[..., None, :2], poses[..., :-1, :2]], dim=-2)
        speeds = (poses[..., :2] - prev_xy).norm(dim=-1) / dt
        return poses, speeds

    def forward(
        self,
        ctx: ContextTensors,
        batch: SceneBatch,
        lane_choice: torch.Tensor,  # [B, K, N] long
        pair_class: torch.Tensor,  # [B, K, N, N] long
        strategy: str | None = None,
        rounds: int | None = None,
    ) -> dict[str, torch.Tensor]:
        cfg = self.cfg
        strategy = strategy or cfg.decode_strategy
        rounds = rounds or cfg.decoder_rounds
        b, k = lane_choice.shape[:2]
        n = batch.max_agents
        t_f = batch.future_len
        m = batch.max_lanes
        dt = batch.dt

        cur_pose = batch.current_pose()[:, None].expand(b, k, n, 4)
        cur_speed = batch.current_speed()[:, None].expand(b, k, n)
        agent_type = batch.agent_type[:, None].expand(b, k, n)

        sel = (
            lane_choice[:, :, :, None] == torch.arange(1, m + 1, device=lane_choice.device)
        ).long()
        lane_tok = self.lane_token(sel).to(cur_pose.dtype)
        pair_tok = self.pair_token(pair_class).to(cur_pose.dtype)

        vals0 = self._init_values(batch, k)
        aux_pose = cur_pose[..., None, :].expand(b, k, n, t_f, 4).contiguous()
        aux_speed = cur_speed[..., None].expand(b, k, n, t_f).contiguous()

        limits = control_limits(agent_type)
        controls = None
        if strategy == "one_shot":
            vals = vals0
            for _ in range(rounds):
                vals = self._attend(vals, aux_pose, aux_speed, ctx, batch, lane_tok, pair_tok, None)
                if cfg.use_dynamics:
                    controls = squash_controls(self.control_head(vals), (limits[0], limits[1][..., None], limits[2][..., None]))
                    poses, speeds = unicycle_rollout(cur_pose, cur_speed, controls, dt, agent_type)
                else:
                    poses, speeds = self._direct_states(vals, cur_pose, dt)
                aux_pose, aux_speed = poses, speeds
        elif strategy == "autoregressive":
            pose_t, speed_t = cur_pose, cur_speed
            control_steps, pose_steps, speed_steps = [], [], []
            for t in range(t_f):
                vals = self._attend(vals0, aux_pose, aux_speed, ctx, batch, lane_tok, pair_tok, t)
                if cfg.use_dynamics:
                    c_t = squash_controls(self.control_head(vals[..., t, :]), limits)
                    pose_t, speed_t = unicycle_step(pose_t, speed_t, c_t[..., 0], c_t[..., 1], dt, limits)
                    control_steps.append(c_t)
                else:
                    p_all, s_all = self._direct_states(vals, cur_pose, dt)
                    pose_t, speed_t = p_all[..., t, :], s_all[..., t]
                pose_steps.append(pose_t)
                speed_steps.append(speed_t)
                aux_pose = aux_pose.clone()
                aux_speed = aux_speed.clone()
                aux_pose[..., t, :] = pose_t
                aux_speed[..., t] = speed_t
            poses = torch.stack(pose_steps, dim=-2)
            speeds = torch.stack(speed_steps, dim=-1)
            controls = torch.stack(control_steps, dim=-2) if control_steps else None
        else:
            raise ValueError(f"unknown decode strategy {strategy!r}")

        return {"poses": poses, "speeds": speeds, "controls": controls}
