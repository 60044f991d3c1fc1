"""Attention-parameterised transition heads and their gates.

* order 2: bilinear pairwise head ``beta[a, b]`` with the diagonal masked,
* order 3: triple head ``gamma[a, b, d]`` that compresses the pair (a, b) with
  three projections plus a multiplicative term, then layer-norms it,
* order r >= 4: a one-layer self-attention history encoder over the last
  ``r - 1`` picks, mean-pooled and scored like ``gamma``.

Each order is multiplied by a sigmoid gate ``lambda_r = sigmoid(s_r)``. Heads
and gates are per modality.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import torch

from .numerics import DTYPE, ShapeError, layer_norm
from .ranking import CorrectionStack

GATE_INIT_S2 = -3.0


def xavier(shape: tuple[int, int], generator: torch.Generator) -> torch.Tensor:
    fan_out, fan_in = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    w = (torch.rand(shape, generator=generator, dtype=DTYPE) * 2 - 1) * bound
    return w.requires_grad_(True)


@dataclass
class HistoryEncoder:
    """Self-attention over an ordered history of ``length`` picks."""

    wq: torch.Tensor  # h x D
    wk: torch.Tensor
    wv: torch.Tensor
    wo: torch.Tensor  # D x h
    pos: torch.Tensor  # length x D learned positional offsets
    score_q: torch.Tensor  # h x D
    score_k: torch.Tensor

    @property
    def length(self) -> int:
        return self.pos.shape[0]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in
                ("wq", "wk", "wv", "wo", "pos", "score_q", "score_k")}


@dataclass
class TransitionParams:
    wq: torch.Tensor
    wk: torch.Tensor
    w1: torch.Tensor
    w2: torch.Tensor
    w3: torch.Tensor
    wq_gamma: torch.Tensor
    wk_gamma: torch.Tensor
    history: dict[int, HistoryEncoder] = field(default_factory=dict)
    modality: str = "V"

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0]

    @property
    def dim(self) -> int:
        return self.wq.shape[1]

    @classmethod
    def init(cls, dim: int, head_dim: int, max_order: int = 3, modality: str = "V",
             generator: Optional[torch.Generator] = None) -> "TransitionParams":
        g = generator if generator is not None else torch.Generator().manual_seed(0)
        h, D = head_dim, dim
        history = {}
        for r in range(4, max_order + 1):
            history[r] = HistoryEncoder(
                wq=xavier((h, D), g), wk=xavier((h, D), g), wv=xavier((h, D), g),
                wo=xavier((D, h), g), pos=xavier((r - 1, D), g),
                score_q=xavier((h, D), g), score_k=xavier((h, D), g))
        return cls(wq=xavier((h, D), g), wk=xavier((h, D), g),
                   w1=xavier((D, D), g), w2=xavier((D, D), g), w3=xavier((D, D), g),
                   wq_gamma=xavier((h, D), g), wk_gamma=xavier((h, D), g),
                   history=history, modality=modality)

    def named_parameters(self) -> dict[str, torch.Tensor]:
        out = {f"{self.modality}.beta.wq": self.wq, f"{self.modality}.beta.wk": self.wk}
        for name in ("w1", "w2", "w3", "wq_gamma", "wk_gamma"):
            out[f"{self.modality}.gamma.{name}"] = getattr(self, name)
        for r, enc in self.history.items():
            for name, t in enc.tensors().items():
                out[f"{self.modality}.hist{r}.{name}"] = t
        return out

    def order_parameters(self, r: int) -> list[torch.Tensor]:
        if r == 2:
            return [self.wq, self.wk]
        if r == 3:
            return [self.w1, self.w2, self.w3, self.wq_gamma, self.wk_gamma]
        return list(self.history[r].tensors().values()) if r in self.history else []


def parameter_order(name: str) -> int:
    """Interaction order a transition-parameter name belongs to."""
    part = name.split(".")[1]
    if part == "beta":
        return 2
    if part == "gamma":
        return 3
    return int(part[len("hist"):])


def _check_dim(emb: torch.Tensor, params: TransitionParams) -> None:
    if emb.shape[-1] != params.dim:
        raise ShapeError(f"embedding dim {emb.shape[-1]} != head dim {params.dim}")


def beta_scores(emb: torch.Tensor, params: TransitionParams) -> torch.Tensor:
    """``N x N`` pairwise scores ``(Wq e_a).(Wk e_b)/sqrt(h)``; diagonal is ``-inf``."""
    _check_dim(emb, params)
    q = emb @ params.wq.T
    k = emb @ params.wk.T
    raw = q @ k.T / math.sqrt(params.head_dim)
    eye = torch.eye(emb.shape[0], dtype=torch.bool)
    return torch.where(eye, torch.full((), -torch.inf, dtype=DTYPE), raw)


def pair_history(e_a: torch.Tensor, e_b: torch.Tensor, params: TransitionParams) -> torch.Tensor:
    mixed = e_a @ params.w1.T + e_b @ params.w2.T + (e_a * e_b) @ params.w3.T
    return layer_norm(mixed)


def gamma_score(e_a: torch.Tensor, e_b: torch.Tensor, e_d: torch.Tensor,
                params: TransitionParams) -> torch.Tensor:
    for e in (e_a, e_b, e_d):
        _check_dim(e, params)
    hab = pair_history(e_a, e_b, params)
    return (params.wq_gamma @ hab) @ (params.wk_gamma @ e_d) / math.sqrt(params.head_dim)


def history_encode(history: torch.Tensor, params: TransitionParams) -> torch.Tensor:
    """Encode ordered history embeddings ``(..., r-1, D)`` into ``(..., D)``."""
    _check_dim(history, params)
    r = history.shape[-2] + 1
    enc = params.history.get(r)
    if enc is None or enc.length != history.shape[-2]:
        raise ShapeError(f"no history encoder for a history of length {history.shape[-2]}")
    x = history + enc.pos
    q, k, v = x @ enc.wq.T, x @ enc.wk.T, x @ enc.wv.T
    attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(params.head_dim), dim=-1)
    return (attn @ v @ enc.wo.T).mean(dim=-2)


def _history_score(hvec: torch.Tensor, emb: torch.Tensor, wq: torch.Tensor,
                   wk: torch.Tensor, head_dim: int) -> torch.Tensor:
    return (hvec @ wq.T) @ (emb @ wk.T).T / math.sqrt(head_dim)


def raw_corrections(emb: torch.Tensor, params: TransitionParams, order: int) -> CorrectionStack:
    """Ungated corrections over the ``N`` items embedded in ``emb`` (N x D)."""
    _check_dim(emb, params)
    terms = {}
    h = params.head_dim
    if order >= 2:
        beta = beta_scores(emb, params)
        terms[2] = lambda hist: beta[hist[..., 0]]
    if order >= 3:
        def gamma_term(hist):
            hab = pair_history(emb[hist[..., 0]], emb[hist[..., 1]], params)
            return _history_score(hab, emb, params.wq_gamma, params.wk_gamma, h)
        terms[3] = gamma_term
    for r in range(4, order + 1):
        enc = params.history[r]

        def hist_term(hist, enc=enc):
            hvec = history_encode(emb[hist], params)
            return _history_score(hvec, emb, enc.score_q, enc.score_k, h)
        terms[r] = hist_term
    return CorrectionStack(order, terms)


@dataclass
class GateBank:
    logits: dict[int, torch.Tensor]
    modality: str = "V"

    @staticmethod
    def initial_logit(r: int) -> float:
        return GATE_INIT_S2 - 2.0 * (r - 2)

    @classmethod
    def init(cls, max_order: int, modality: str = "V") -> "GateBank":
        logits = {r: torch.tensor(cls.initial_logit(r), dtype=DTYPE, requires_grad=True)
                  for r in range(2, max_order + 1)}
        return cls(logits, modality)

    def gate(self, r: int, frozen: bool = False) -> torch.Tensor:
        s = self.logits[r]
        return torch.sigmoid(s.detach() if frozen else s)

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return {f"{self.modality}.gate{r}": s for r, s in self.logits.items()}


def _scale_finite(x: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    # masked (-inf) entries pass through without entering the product
    finite = torch.isfinite(x)
    zero = torch.zeros((), dtype=x.dtype)
    return torch.where(finite, scale * torch.where(finite, x, zero), x)


def gated_corrections(raw: CorrectionStack, gates: GateBank,
                      frozen: Iterable[int] = ()) -> CorrectionStack:
    """Multiply each order by its gate.

    Frozen orders keep contributing with their current (initial) gate value,
    but the whole term is detached: neither the gate logit nor the head weights
    receive gradient through it.
    """
    frozen = set(frozen)
    missing = [r for r in raw.terms if r not in gates.logits]
    if missing:
        raise ValueError(f"no gate for orders {missing}")
    terms = {}
    for r, term in raw.terms.items():
        if r in frozen:
            lam = gates.gate(r, frozen=True)
            terms[r] = lambda hist, term=term, lam=lam: _scale_finite(term(hist).detach(), lam)
        else:
            lam = gates.gate(r)
            terms[r] = lambda hist, term=term, lam=lam: _scale_finite(term(hist), lam)
    return CorrectionStack(raw.order, terms)


def gate_l1_penalty(gates: GateBank, etas: dict[int, float],
                    frozen: Iterable[int] = (), max_order: Optional[int] = None) -> torch.Tensor:
    """``sum_r eta_r |lambda_r|`` over gated orders (``lambda_r`` is positive)."""
    frozen = set(frozen)
    orders = [r for r in sorted(gates.logits) if max_order is None or r <= max_order]
    etas_seen = [etas[r] for r in orders]
    if any(e < 0 for e in etas_seen) or any(b < a for a, b in zip(etas_seen, etas_seen[1:])):
        raise ValueError("gate penalty weights must be non-negative and monotone in r")
    total = torch.zeros((), dtype=DTYPE)
    for r in orders:
        total = total + etas[r] * gates.gate(r, frozen=r in frozen)
    return total
