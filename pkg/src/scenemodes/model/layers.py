"""Attention and message-passing building blocks.

All layers keep the embedding width fixed and add residuals, so a stack of
them can be scheduled in any order. Attention keys/values may be augmented
with a per-(query, key) edge feature computed from auxiliary global poses,
which is what keeps the whole network equivariant: values never see global
coordinates, only relative geometry.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

NEG_INF = -1e30


class Mlp(nn.Module):
    """Two-layer perceptron with a smooth activation.

    norm_in prepends a LayerNorm; residual branches use it so block
    magnitudes stay bounded over many rounds.
    """

    def __init__(self, d_in: int, d_hidden: int, d_out: int, norm_in: bool = False):
        super().__init__()
        layers = [nn.LayerNorm(d_in)] if norm_in else []
        layers += [nn.Linear(d_in, d_hidden), nn.SiLU(), nn.Linear(d_hidden, d_out)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None, dim: int) -> torch.Tensor:
    """Softmax that zeroes fully-masked rows instead of producing NaNs."""
    if mask is None:
        return torch.softmax(logits, dim=dim)
    logits = logits.masked_fill(~mask, NEG_INF)
    attn = torch.softmax(logits, dim=dim)
    any_valid = mask.any(dim=dim, keepdim=True)
    return attn * any_valid


class CeeAttention(nn.Module):
    """Multi-head attention with custom edge features concatenated into keys/values.

    q = F_q(x); k, v = F_{k,v}(concat[y, edge]); out = x + softmax(q k / sqrt(d)) v.
    With edge_dim = 0 this is plain cross attention.
    """

    def __init__(self, d_model: int, n_heads: int, edge_dim: int = 0):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.edge_dim = edge_dim
        self.f_q = Mlp(d_model, d_model, d_model, norm_in=True)
        self.f_k = Mlp(d_model + edge_dim, d_model, d_model, norm_in=True)
        self.f_v = Mlp(d_model + edge_dim, d_model, d_model, norm_in=True)

    def forward(
        self,
        x: torch.Tensor,
        y: torch.Tensor,
        edge: torch.Tensor | None = None,
        key_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """x: [..., Q, d]; y: [..., S, d]; edge: [..., Q, S, edge_dim] or None.

        key_mask is [..., S] or [..., Q, S]; masked keys contribute nothing.
        Returns [..., Q, d] with the residual added.
        """
        q_shape = x.shape[:-1]
        s = y.shape[-2]
        q = self.f_q(x).view(*q_shape, self.n_heads, self.d_head)

        if edge is not None:
            if self.edge_dim == 0:
                raise ValueError("layer was built without an edge input")
            y_exp = y.unsqueeze(-3).expand(*edge.shape[:-1], y.shape[-1])
            kv_in = torch.cat([y_exp, edge], dim=-1)
            k = self.f_k(kv_in).view(*edge.shape[:-1], self.n_heads, self.d_head)
            v = self.f_v(kv_in).view(*edge.shape[:-1], self.n_heads, self.d_head)
            logits = (q.unsqueeze(-3) * k).sum(-1) / math.sqrt(self.d_head)  # [..., Q, S, H]
        else:
            k = self.f_k(y).view(*y.shape[:-1], self.n_heads, self.d_head)
            v = self.f_v(y).view(*y.shape[:-1], self.n_heads, self.d_head)
            logits = torch.einsum("...qhd,...shd->...qsh", q, k) / math.sqrt(self.d_head)

        if key_mask is not None:
            if key_mask.dim() == logits.dim() - 2:  # [..., S] -> broadcast over queries
                mask = key_mask.unsqueeze(-2).unsqueeze(-1)
            else:  # [..., Q, S]
                mask = key_mask.unsqueeze(-1)
            mask = mask.expand_as(logits)
        else:
            mask = None
        attn = masked_softmax(logits, mask, dim=-2)  # over keys S

        if edge is not None:
            out = (attn.unsqueeze(-1) * v).sum(-3)  # [..., Q, H, dh]
        else:
            out = torch.einsum("...qsh,...shd->...qhd", attn, v)
        return x + out.reshape(*q_shape, self.d_model)


class AttnPool(nn.Module):
    """Multi-head attention pooling with one learnable query token."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.query = nn.Parameter(torch.zeros(d_model))
        nn.init.normal_(self.query, std=0.02)
        self.f_k = nn.Sequential(nn.LayerNorm(d_model), nn.Linear(d_model, d_model))
        self.f_v = nn.Sequential(nn.LayerNorm(d_model), nn.Linear(d_model, d_model))

    def forward(self, items: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """items: [..., S, d]; mask: [..., S]. Returns [..., d]."""
        k = self.f_k(items).view(*items.shape[:-1], self.n_heads, self.d_head)
        v = self.f_v(items).view(*items.shape[:-1], self.n_heads, self.d_head)
        q = self.query.view(self.n_heads, self.d_head).to(items.dtype)
        logits = (k * q).sum(-1) / math.sqrt(self.d_head)  # [..., S, H]
        m = mask.unsqueeze(-1).expand_as(logits) if mask is not None else None
        attn = masked_softmax(logits, m, dim=-2)
        pooled = (attn.unsqueeze(-1) * v).sum(-3)  # [..., H, dh]
        return pooled.reshape(*items.shape[:-2], self.n_heads * self.d_head)


class EdgeUpdate(nn.Module):
    """e' = e + MLP(concat[e, n_src, n_dst])."""

    def __init__(self, d_model: int):
        super().__init__()
        self.mlp = Mlp(3 * d_model, d_model, d_model, norm_in=True)

    def forward(self, edge: torch.Tensor, n_src: torch.Tensor, n_dst: torch.Tensor) -> torch.Tensor:
        return edge + self.mlp(torch.cat([edge, n_src, n_dst], dim=-1))


class NodeUpdate(nn.Module):
    """n' = n + MLP(AttnPool over the node's incident edges)."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.pool = AttnPool(d_model, n_heads)
        self.mlp = Mlp(d_model, d_model, d_model, norm_in=True)

    def forward(self, nodes: torch.Tensor, edges: torch.Tensor, edge_mask: torch.Tensor | None) -> torch.Tensor:
        """nodes: [..., d]; edges: [..., S, d] with S the incident-edge axis."""
        pooled = self.pool(edges, edge_mask)
        return nodes + self.mlp(pooled)
