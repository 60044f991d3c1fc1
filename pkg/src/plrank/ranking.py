"""High-order Plackett-Luce likelihoods over in-batch rank lists.

An ordering of ``N`` items is scored position by position: the item picked at
position ``k`` competes (softmax) against every item not yet picked, using its
base utility plus history corrections of orders ``2..R``. The order-``r``
correction looks at the last ``r - 1`` picks. Order 0 ignores utilities and
gives each ordering probability ``1/N!``.

Corrections are supplied as callables so that expensive heads (the triple and
history heads) are only evaluated on the histories that actually occur.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

from .numerics import DTYPE, EmptyCandidateError, ShapeError, log_softmax_masked

# history index tensor (..., r-1) -> correction scores (..., N)
CorrectionTerm = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class RankingState:
    """A scored ordering plus the reference ordering it was derived from.

    Orders may carry leading batch dimensions; the last axis is the list.
    """

    scored_order: torch.Tensor
    reference_order: Optional[torch.Tensor] = None

    def __post_init__(self):
        order = torch.as_tensor(self.scored_order, dtype=torch.long)
        object.__setattr__(self, "scored_order", order)
        _check_permutation(order)
        if self.reference_order is not None:
            ref = torch.as_tensor(self.reference_order, dtype=torch.long)
            _check_permutation(ref)
            object.__setattr__(self, "reference_order", ref)

    @property
    def batch_size(self) -> int:
        return self.scored_order.shape[-1]


def _check_permutation(order: torch.Tensor) -> None:
    n = order.shape[-1]
    expect = torch.arange(n).expand_as(order)
    if not torch.equal(order.sort(dim=-1).values, expect):
        raise ValueError("ordering is not a permutation of 0..N-1")


@dataclass(frozen=True)
class CorrectionStack:
    """History corrections for orders ``2..order``.

    ``terms[r]`` maps a history index tensor of shape ``(..., r-1)`` (oldest
    pick first) to scores over all ``N`` candidates, shape ``(..., N)``.
    Missing orders contribute zero. Scores for already-picked candidates are
    never read and may be ``-inf``.
    """

    order: int
    terms: dict[int, CorrectionTerm] = field(default_factory=dict)

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("order must be non-negative")
        bad = [r for r in self.terms if not 2 <= r <= self.order]
        if bad:
            raise ValueError(f"correction orders {bad} outside 2..{self.order}")

    @classmethod
    def from_tables(cls, order: int, beta=None, gamma=None) -> "CorrectionStack":
        """Stack backed by dense tables: ``beta`` is N x N, ``gamma`` N x N x N."""
        terms: dict[int, CorrectionTerm] = {}
        if beta is not None and order >= 2:
            beta = torch.as_tensor(beta, dtype=DTYPE)
            terms[2] = lambda hist: beta[hist[..., 0]]
        if gamma is not None and order >= 3:
            gamma = torch.as_tensor(gamma, dtype=DTYPE)
            terms[3] = lambda hist: gamma[hist[..., 0], hist[..., 1]]
        return cls(order, terms)


def reference_order(sim_rows: torch.Tensor) -> torch.Tensor:
    """Descending argsort along the last axis; ties go to the lower index."""
    rows = sim_rows.detach()
    return torch.sort(rows, dim=-1, descending=True, stable=True).indices


def row_centre(row: torch.Tensor, remaining: torch.Tensor) -> torch.Tensor:
    """Subtract the mean over ``remaining`` candidates; other entries untouched."""
    remaining = torch.as_tensor(remaining, dtype=torch.bool)
    count = remaining.sum(dim=-1, keepdim=True)
    if bool((count == 0).any()):
        raise EmptyCandidateError("no remaining candidates to centre over")
    safe = torch.where(remaining, row, torch.zeros((), dtype=row.dtype))
    mean = safe.sum(dim=-1, keepdim=True) / count
    return torch.where(remaining, row - mean, row)


def log_factorial(n: int) -> float:
    return math.log(math.factorial(n)) if n <= 170 else math.lgamma(n + 1)


def _order_of(corr: Optional[CorrectionStack]) -> int:
    return 1 if corr is None else corr.order


def pl_position_prob(k: int, state: RankingState, theta: torch.Tensor,
                     corr: Optional[CorrectionStack] = None, centre: bool = True) -> torch.Tensor:
    """``log pi^(R)(y_k | y_1..y_{k-1})`` for a single list, ``k`` 1-indexed.

    Straight transcription of the per-position formula; the batched path in
    :func:`pl_ranking_logprob` is tested against this one.
    """
    order = state.scored_order
    if order.dim() != 1:
        raise ShapeError("pl_position_prob scores one list at a time")
    n = order.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"position {k} outside 1..{n}")
    R = _order_of(corr)
    picked = order[: k - 1]
    remaining = torch.ones(n, dtype=torch.bool)
    remaining[picked] = False
    if R == 0:
        return torch.tensor(-math.log(n - k + 1), dtype=DTYPE)
    score = torch.as_tensor(theta, dtype=DTYPE)
    for r in range(2, min(R, k) + 1):
        term = corr.terms.get(r)
        if term is None:
            continue
        history = order[k - r: k - 1]
        c = term(history)
        c = torch.where(remaining, c, torch.zeros((), dtype=DTYPE))
        if centre:
            c = row_centre(c, remaining)
            c = torch.where(remaining, c, torch.zeros((), dtype=DTYPE))
        score = score + c
    return log_softmax_masked(score, ~remaining)[order[k - 1]]


def pl_ranking_logprob(state: RankingState, theta: torch.Tensor,
                       corr: Optional[CorrectionStack] = None, centre: bool = True) -> torch.Tensor:
    """Log-probability of ``state.scored_order`` (any leading batch shape).

    All positions are evaluated at once: candidate masks, history windows and
    correction rows are materialised as ``(..., N, N)`` tensors.
    """
    order = state.scored_order
    n = order.shape[-1]
    theta = torch.as_tensor(theta, dtype=DTYPE)
    if theta.shape[-1] != n:
        raise ShapeError(f"theta has {theta.shape[-1]} entries for a list of {n}")
    R = _order_of(corr)
    lead = torch.broadcast_shapes(order.shape[:-1], theta.shape[:-1])
    if R == 0:
        return torch.full(lead, -log_factorial(n), dtype=DTYPE)
    order = order.expand(*lead, n)
    theta = theta.expand(*lead, n)

    positions = torch.arange(n)
    rank = torch.argsort(order, dim=-1)  # rank[..., d] = position of item d
    remaining = rank.unsqueeze(-2) >= positions.unsqueeze(-1)  # (..., k, d)
    score = theta.unsqueeze(-2).expand(*lead, n, n)
    zero = torch.zeros((), dtype=DTYPE)
    for r in range(2, R + 1):
        term = corr.terms.get(r)
        if term is None:
            continue
        window = positions.unsqueeze(-1) + torch.arange(-(r - 1), 0)
        history = order[..., window.clamp_min(0)]  # (..., k, r-1)
        active = (positions >= r - 1).unsqueeze(-1) & remaining
        c = torch.where(active, term(history), zero)
        if centre:
            count = remaining.sum(dim=-1, keepdim=True)
            c = torch.where(active, c - c.sum(dim=-1, keepdim=True) / count, zero)
        score = score + c
    logp = log_softmax_masked(score, ~remaining)
    return logp.gather(-1, order.unsqueeze(-1)).squeeze(-1).sum(dim=-1)


def _directional_nll(ref_sim: torch.Tensor, util_sim: torch.Tensor,
                     corr: Optional[CorrectionStack]) -> torch.Tensor:
    # rank list of row i: the order induced by ref_sim[i], scored with util_sim[i];
    # leading axes beyond the row axis are kept, so several directions sharing
    # one correction stack go through a single call
    state = RankingState(reference_order(ref_sim))
    return -pl_ranking_logprob(state, util_sim, corr).mean(dim=-1)


def _check_square(*mats: torch.Tensor) -> int:
    n = mats[0].shape[0]
    for m in mats:
        if m.dim() != 2 or m.shape != (n, n):
            raise ShapeError("similarity matrices must be square and of equal size")
    return n


def rank_loss_cross(sim_vt: torch.Tensor, sim_tv: torch.Tensor,
                    corr_v: Optional[CorrectionStack] = None,
                    corr_t: Optional[CorrectionStack] = None) -> torch.Tensor:
    """Symmetrised cross-modal rank NLL, averaged over batch rows.

    Rows of ``sim_vt`` score text candidates (``corr_t`` applies) against the
    ordering induced by the matching row of ``sim_tv``, and vice versa.
    """
    n = _check_square(sim_vt, sim_tv)
    if _order_of(corr_v) == 0 or _order_of(corr_t) == 0:
        _require_same_order(corr_v, corr_t)
        return torch.tensor(log_factorial(n), dtype=DTYPE)
    a = _directional_nll(sim_tv, sim_vt, corr_t)
    b = _directional_nll(sim_vt, sim_tv, corr_v)
    return 0.5 * (a + b)


def rank_loss_inmodal(sim_tt: torch.Tensor, sim_ii: torch.Tensor,
                      corr: Optional[CorrectionStack] = None,
                      corr_image: Optional[CorrectionStack] = None) -> torch.Tensor:
    """Symmetrised in-modal rank NLL.

    ``corr`` scores text-text rows; ``corr_image`` (defaulting to ``corr``)
    scores image-image rows.
    """
    n = _check_square(sim_tt, sim_ii)
    corr_image = corr if corr_image is None else corr_image
    if _order_of(corr) == 0 or _order_of(corr_image) == 0:
        _require_same_order(corr, corr_image)
        return torch.tensor(log_factorial(n), dtype=DTYPE)
    a = _directional_nll(sim_ii, sim_tt, corr)
    b = _directional_nll(sim_tt, sim_ii, corr_image)
    return 0.5 * (a + b)


def rank_losses(sim_vt: torch.Tensor, sim_tt: torch.Tensor, sim_ii: torch.Tensor,
                corr_v: Optional[CorrectionStack] = None,
                corr_t: Optional[CorrectionStack] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """``(in-modal, cross-modal)`` losses with two batched passes instead of four.

    Equal to ``rank_loss_inmodal(sim_tt, sim_ii, corr_t, corr_v)`` and
    ``rank_loss_cross(sim_vt, sim_vt.T, corr_v, corr_t)``.
    """
    n = _check_square(sim_vt, sim_tt, sim_ii)
    if _order_of(corr_v) == 0 or _order_of(corr_t) == 0:
        _require_same_order(corr_v, corr_t)
        const = torch.tensor(log_factorial(n), dtype=DTYPE)
        return const, const.clone()
    sim_tv = sim_vt.T
    # text candidates: in-modal rows of sim_tt and cross rows of sim_vt
    text = _directional_nll(torch.stack([sim_ii, sim_tv]), torch.stack([sim_tt, sim_vt]), corr_t)
    image = _directional_nll(torch.stack([sim_tt, sim_vt]), torch.stack([sim_ii, sim_tv]), corr_v)
    return 0.5 * (text[0] + image[0]), 0.5 * (text[1] + image[1])


def _require_same_order(a: Optional[CorrectionStack], b: Optional[CorrectionStack]) -> None:
    if _order_of(a) != _order_of(b):
        raise ValueError("both ranking directions must use the same order")
