"""Conflict-aware multi-scale fusion of student tokens into a global embedding.

Pipeline per sample: 1D pyramid pooling over the token sequence (bins 2, 4, 8),
channel then spatial attention, one self-attention layer, mean-pool, project
to the embedding width, and finally a per-dimension sigmoid gate that decides
how much of the pooled residual is added to the contrastive embedding.
All ops accept a leading batch dimension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .numerics import DTYPE, ShapeError
from .transitions import xavier

SPP_BINS = (2, 4, 8)


class InsufficientTokensError(ValueError):
    pass


@dataclass
class FusionParams:
    ch_w1: torch.Tensor  # m x dS
    ch_b1: torch.Tensor
    ch_w2: torch.Tensor  # dS x m
    ch_b2: torch.Tensor
    sp_w: torch.Tensor  # 2 (mean, max) -> row logit
    sp_b: torch.Tensor
    att_q: torch.Tensor  # dS x dS
    att_k: torch.Tensor
    att_v: torch.Tensor
    proj: torch.Tensor  # d x dS
    gate_w: torch.Tensor  # d x 2d
    gate_b: torch.Tensor  # d

    @classmethod
    def init(cls, token_dim: int, dim: int, hidden: Optional[int] = None,
             generator: Optional[torch.Generator] = None, gate_bias: float = 0.0) -> "FusionParams":
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        m = hidden or max(1, token_dim // 2)

        def zeros(*shape, fill=0.0):
            return torch.full(shape, fill, dtype=DTYPE).requires_grad_(True)
        return cls(ch_w1=xavier((m, token_dim), g), ch_b1=zeros(m),
                   ch_w2=xavier((token_dim, m), g), ch_b2=zeros(token_dim),
                   sp_w=xavier((1, 2), g).reshape(2).detach().requires_grad_(True), sp_b=zeros(1),
                   att_q=xavier((token_dim, token_dim), g), att_k=xavier((token_dim, token_dim), g),
                   att_v=xavier((token_dim, token_dim), g), proj=xavier((dim, token_dim), g),
                   gate_w=xavier((dim, 2 * dim), g), gate_b=zeros(dim, fill=gate_bias))

    def named_parameters(self, prefix: str = "") -> dict[str, torch.Tensor]:
        return {prefix + name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class FusedEmbedding:
    fused: torch.Tensor
    contrastive: torch.Tensor
    residual: torch.Tensor
    gate: torch.Tensor


def pyramid_matrix(length: int, bins=SPP_BINS) -> torch.Tensor:
    """``sum(bins) x length`` averaging matrix; bin sizes differ by at most one."""
    rows = []
    for b in bins:
        edges = [(j * length) // b for j in range(b + 1)]
        for lo, hi in zip(edges, edges[1:]):
            row = torch.zeros(length, dtype=DTYPE)
            row[lo:hi] = 1.0 / (hi - lo)
            rows.append(row)
    return torch.stack(rows)


def spp_1d(tokens: torch.Tensor, bins=SPP_BINS) -> torch.Tensor:
    """Append bin-averaged tokens: ``(..., L, dS) -> (..., L + sum(bins), dS)``."""
    length = tokens.shape[-2]
    if length < max(bins):
        raise InsufficientTokensError(f"need at least {max(bins)} tokens, got {length}")
    pooled = pyramid_matrix(length, bins) @ tokens
    return torch.cat([tokens, pooled], dim=-2)


def _channel_mlp(x: torch.Tensor, p: FusionParams) -> torch.Tensor:
    hidden = torch.nn.functional.gelu(x @ p.ch_w1.T + p.ch_b1)
    return hidden @ p.ch_w2.T + p.ch_b2


def channel_scale(U: torch.Tensor, p: FusionParams) -> torch.Tensor:
    avg = U.mean(dim=-2)
    mx = U.max(dim=-2).values
    return torch.sigmoid(_channel_mlp(avg, p) + _channel_mlp(mx, p))


def spatial_scale(U: torch.Tensor, p: FusionParams) -> torch.Tensor:
    stats = torch.stack([U.mean(dim=-1), U.max(dim=-1).values], dim=-1)
    return torch.sigmoid(stats @ p.sp_w + p.sp_b)


def channel_spatial_attend(U: torch.Tensor, p: FusionParams) -> torch.Tensor:
    if U.shape[-1] != p.ch_w1.shape[1]:
        raise ShapeError("token width does not match fusion parameters")
    U = U * channel_scale(U, p).unsqueeze(-2)
    return U * spatial_scale(U, p).unsqueeze(-1)


def refine_and_pool(U: torch.Tensor, p: FusionParams) -> torch.Tensor:
    """Single self-attention layer (no positional terms), mean-pool, project."""
    q, k, v = U @ p.att_q.T, U @ p.att_k.T, U @ p.att_v.T
    attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(U.shape[-1]), dim=-1)
    return (attn @ v).mean(dim=-2) @ p.proj.T


def conflict_gate_fuse(v_c: torch.Tensor, u: torch.Tensor, p: FusionParams) -> FusedEmbedding:
    if v_c.shape != u.shape:
        raise ShapeError("contrastive and residual embeddings differ in shape")
    alpha = torch.sigmoid(torch.cat([v_c, u], dim=-1) @ p.gate_w.T + p.gate_b)
    return FusedEmbedding(v_c + alpha * u, v_c, u, alpha)


def fuse(v_c: torch.Tensor, tokens: torch.Tensor, p: FusionParams) -> FusedEmbedding:
    U = channel_spatial_attend(spp_1d(tokens), p)
    return conflict_gate_fuse(v_c, refine_and_pool(U, p), p)


def _angle(a: torch.Tensor, b: torch.Tensor) -> float:
    # Kahan's form: accurate near 0 and pi, exactly 0 for parallel inputs
    a = a.detach().to(DTYPE)
    b = b.detach().to(DTYPE)
    a_hat, b_hat = a / a.norm(), b / b.norm()
    return 2.0 * math.atan2(float((a_hat - b_hat).norm()), float((a_hat + b_hat).norm()))


@dataclass(frozen=True)
class AngleCheck:
    angle: float
    bound: float
    ratio: float  # eps * |u| / |v_c|

    @property
    def vacuous(self) -> bool:
        return self.ratio > 1.0

    def holds(self, slack: float = 1e-12) -> bool:
        return self.angle <= self.bound + slack


def alignment_angle_bound(fused: FusedEmbedding) -> AngleCheck:
    """Angle between the fused and contrastive embedding, and its gate bound.

    The bound is ``arcsin(||alpha||_inf ||u|| / ||v_c||)``, capped at pi/2 when
    the ratio exceeds one.
    """
    v_c = fused.contrastive.detach()
    norm_c = float(v_c.norm())
    if norm_c == 0.0:
        raise ValueError("angle to a zero contrastive embedding is undefined")
    eps = float(fused.gate.detach().abs().max())
    ratio = eps * float(fused.residual.detach().norm()) / norm_c
    bound = math.pi / 2 if ratio >= 1.0 else math.asin(ratio)
    return AngleCheck(_angle(fused.fused, v_c), bound, ratio)
