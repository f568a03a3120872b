"""Mode prediction heads: marginal lane/interaction classifiers and the joint
energy function over sampled scene modes."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig
from .encoder import ContextTensors, GnnA2A, GnnA2L
from .layers import NEG_INF, AttnPool, Mlp

# token vocabulary for the pair-mode conditioning: CW, S, CCW, self/pad
PAIR_TOKEN_SELF = 3


class LaneAssignmentHead(nn.Module):
    """Per-agent log-probabilities over lanes plus a learned null-lane bias."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pool = AttnPool(cfg.d_model, cfg.n_heads)
        self.mlp = Mlp(cfg.d_model, cfg.d_model, 1, norm_in=True)
        self.null_logit = nn.Parameter(torch.zeros(1))

    def forward(self, ctx: ContextTensors) -> torch.Tensor:
        """[B, N, M+1] log-probs; column 0 is the null lane."""
        b, n, m, t, d = ctx.a2l_edges.shape
        time_mask = ctx.hist_mask[:, :, None, :].expand(b, n, m, t)
        pooled = self.pool(ctx.a2l_edges, time_mask)  # [B, N, M, d]
        lane_logits = self.mlp(pooled).squeeze(-1)
        lane_logits = lane_logits.masked_fill(~ctx.lane_mask[:, None, :], NEG_INF)
        null = self.null_logit.to(lane_logits.dtype).expand(b, n, 1)
        logits = torch.cat([null, lane_logits], dim=-1)
        return torch.log_softmax(logits, dim=-1)


class InteractionHead(nn.Module):
    """Symmetric 3-way classifier over agent pairs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pool = AttnPool(cfg.d_model, cfg.n_heads)
        self.mlp = Mlp(cfg.d_model, cfg.d_model, 3, norm_in=True)

    def forward(self, ctx: ContextTensors) -> torch.Tensor:
        """[B, N, N, 3] log-probs, exactly symmetric in the two agent axes."""
        sym = 0.5 * (ctx.a2a_edges + ctx.a2a_edges.transpose(1, 2))
        b, n, _, t, d = sym.shape
        time_mask = (ctx.hist_mask[:, :, None, :] & ctx.hist_mask[:, None, :, :]).reshape(b, n, n, t)
        pooled = self.pool(sym, time_mask)
        return torch.log_softmax(self.mlp(pooled), dim=-1)


def pair_logp_rows(matrix: torch.Tensor, n_agents: int) -> torch.Tensor:
    """Extract the canonical i<j rows from an [N, N, C] (or [B, N, N, C]) matrix."""
    idx_i, idx_j = torch.triu_indices(n_agents, n_agents, offset=1)
    return matrix[..., idx_i, idx_j, :]


class JointEnergyHead(nn.Module):
    """Unnormalized log-likelihood of a sampled joint mode.

    Mode tokens are embedded, concatenated onto the tiled edge blocks, and a
    designated GNN runs before pooling every edge over all axes to a scalar.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h, dt = cfg.d_model, cfg.n_heads, cfg.token_dim
        self.lane_token = nn.Embedding(2, dt)  # conditioned lane: not-selected / selected
        self.pair_token = nn.Embedding(4, dt)  # CW / S / CCW / self
        self.a2a_proj = Mlp(d + dt, d, d, norm_in=True)
        self.a2l_proj = Mlp(d + dt, d, d, norm_in=True)
        self.gnn_a2a = nn.ModuleList(GnnA2A(d, h) for _ in range(cfg.energy_rounds))
        self.gnn_a2l = nn.ModuleList(GnnA2L(d, h) for _ in range(cfg.energy_rounds))
        self.pool_a2a = AttnPool(d, h)
        self.pool_a2l = AttnPool(d, h)
        self.out = Mlp(2 * d, d, 1, norm_in=True)

    def forward(
        self,
        ctx: ContextTensors,
        lane_choice: torch.Tensor,  # [B, K, N] long, 0 = null
        pair_class: torch.Tensor,  # [B, K, N, N] long with PAIR_TOKEN_SELF on the diagonal
    ) -> torch.Tensor:
        """[B, K] energies."""
        b, n, m, t, d = ctx.a2l_edges.shape
        k = lane_choice.shape[1]

        sel = (
            lane_choice[:, :, :, None] == torch.arange(1, m + 1, device=lane_choice.device)
        ).long()  # [B, K, N, M]
        lane_tok = self.lane_token(sel).to(ctx.a2l_edges.dtype)
        pair_tok = self.pair_token(pair_class).to(ctx.a2a_edges.dtype)

        a2l = ctx.a2l_edges[:, None].expand(b, k, n, m, t, d)
        a2a = ctx.a2a_edges[:, None].expand(b, k, n, n, t, d)
        a2l = self.a2l_proj(torch.cat([a2l, lane_tok[:, :, :, :, None, :].expand(b, k, n, m, t, -1)], dim=-1))
        a2a = self.a2a_proj(torch.cat([a2a, pair_tok[:, :, :, :, None, :].expand(b, k, n, n, t, -1)], dim=-1))

        hist = ctx.agent_hist[:, None].expand(b, k, n, t, d).reshape(b * k, n, t, d)
        lanes = ctx.lanes[:, None].expand(b, k, m, d).reshape(b * k, m, d)
        a2a = a2a.reshape(b * k, n, n, t, d)
        a2l = a2l.reshape(b * k, n, m, t, d)
        a2a_mask = ctx.a2a_mask[:, None].expand(b, k, n, n, t).reshape(b * k, n, n, t)
        a2l_mask = ctx.a2l_mask[:, None].expand(b, k, n, m, t).reshape(b * k, n, m, t)
        for i in range(len(self.gnn_a2a)):
            hist, a2a = self.gnn_a2a[i](hist, a2a, a2a_mask)
            if m > 0:
                hist, lanes, a2l = self.gnn_a2l[i](hist, lanes, a2l, a2l_mask)

        pooled_a2a = self.pool_a2a(a2a.reshape(b * k, -1, d), a2a_mask.reshape(b * k, -1))
        if m > 0:
            pooled_a2l = self.pool_a2l(a2l.reshape(b * k, -1, d), a2l_mask.reshape(b * k, -1))
        else:
            pooled_a2l = torch.zeros_like(pooled_a2a)
        energy = self.out(torch.cat([pooled_a2a, pooled_a2l], dim=-1)).squeeze(-1)
        return energy.view(b, k)
