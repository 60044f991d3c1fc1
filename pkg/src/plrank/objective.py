"""Total training objective, its schedules, and the optimiser."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .distill import StudentFeatures, TeacherFeatures, gram_loss, relational_loss
from .numerics import DTYPE, ShapeError
from .ranking import CorrectionStack, rank_losses
from .transitions import GateBank, TransitionParams, gate_l1_penalty, gated_corrections, raw_corrections


class NonFiniteError(FloatingPointError):
    pass


def default_etas(max_order: int = 5) -> dict[int, float]:
    # 1e-4, 1e-3 for orders 2 and 3; one decade per order beyond
    return {r: 1e-4 * 10.0 ** (r - 2) for r in range(2, max(max_order, 3) + 1)}


@dataclass
class LossWeights:
    mu_d: float = 0.5
    rho: float = 0.5
    order: int = 3
    etas: dict[int, float] = field(default_factory=default_etas)
    mu: Optional[float] = None  # fixed mu_1 = mu_2; None -> schedule
    relational_seed: int = 0

    def __post_init__(self):
        if self.mu_d < 0 or self.rho < 0:
            raise ValueError("mu_d and rho must be non-negative")
        if self.mu is not None and not 0.0 <= self.mu <= 2.0:
            raise ValueError("mu must lie in [0, 2]")
        if self.order < 0:
            raise ValueError("order must be non-negative")


def mu_schedule(i: int, n: int) -> float:
    """Rank-loss weight at epoch ``i`` of ``n``: ``clip((3i - 1)/(n - 1), 0, 2)``."""
    if n < 2:
        raise ValueError("mu schedule needs at least two epochs")
    return min(max((3 * i - 1) / (n - 1), 0.0), 2.0)


def unfreeze_epoch(r: int) -> int:
    """Epoch at which order ``r`` starts training (order 2 at 3, order 3 at 6, ...)."""
    return 0 if r <= 1 else 3 * (r - 1)


@dataclass
class WarmStartState:
    epoch: int = 0

    def frozen_orders(self, max_order: int) -> set[int]:
        return {r for r in range(2, max_order + 1) if self.epoch < unfreeze_epoch(r)}

    def is_frozen(self, r: int) -> bool:
        return self.epoch < unfreeze_epoch(r)

    def advance(self, epoch: int) -> None:
        if epoch < self.epoch:
            raise ValueError("warm-start state only moves forward")
        self.epoch = epoch


def clip_infonce(sim: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric InfoNCE over an in-batch similarity matrix (row i matches column i)."""
    if sim.dim() != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError("InfoNCE needs a square similarity matrix")
    temperature = torch.as_tensor(temperature, dtype=DTYPE)
    if not bool(temperature > 0):
        raise ValueError("temperature must be positive")
    logits = sim / temperature
    diag = torch.diagonal(logits)
    rows = torch.logsumexp(logits, dim=1) - diag
    cols = torch.logsumexp(logits, dim=0) - diag
    return 0.5 * (rows.mean() + cols.mean())


@dataclass
class RankHeads:
    params: TransitionParams
    gates: GateBank


@dataclass
class LossInputs:
    """Everything one step of the objective consumes, already forwarded."""

    image: torch.Tensor  # fused image embeddings (B, D)
    text: torch.Tensor
    log_temperature: torch.Tensor
    heads_v: Optional[RankHeads] = None
    heads_t: Optional[RankHeads] = None
    student_img: Optional[StudentFeatures] = None
    student_txt: Optional[StudentFeatures] = None
    teacher_img: Optional[TeacherFeatures] = None
    teacher_txt: Optional[TeacherFeatures] = None


@dataclass
class LossReport:
    total: torch.Tensor
    data_total: torch.Tensor  # total without the gate regulariser
    terms: dict[str, float]
    mu: float

    def gradients(self, params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """``d total / d p`` for every named tensor; exactly zero when unused."""
        names = [n for n, p in params.items() if p.requires_grad]
        grads = torch.autograd.grad(self.total, [params[n] for n in names],
                                    allow_unused=True, retain_graph=True)
        out = {n: torch.zeros_like(p) for n, p in params.items()}
        for n, g in zip(names, grads):
            if g is not None:
                out[n] = g
        return out


def normalise(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True)


def correction_stack(emb: torch.Tensor, heads: Optional[RankHeads], order: int,
                     warm: WarmStartState) -> Optional[CorrectionStack]:
    if order <= 1 or heads is None:
        return CorrectionStack(order) if order != 1 else None
    raw = raw_corrections(emb, heads.params, order)
    return gated_corrections(raw, heads.gates, warm.frozen_orders(order))


def total_loss(inputs: LossInputs, weights: LossWeights, warm: Optional[WarmStartState] = None,
               n_epochs: int = 2) -> LossReport:
    """Contrastive + mu * (in-modal + cross-modal rank) + distillation + gate L1."""
    warm = warm if warm is not None else WarmStartState()
    mu = weights.mu if weights.mu is not None else mu_schedule(warm.epoch, n_epochs)
    v, t = normalise(inputs.image), normalise(inputs.text)
    s_vt = v @ t.T
    clip = clip_infonce(s_vt, inputs.log_temperature.exp())

    R = weights.order
    corr_v = correction_stack(v, inputs.heads_v, R, warm)
    corr_t = correction_stack(t, inputs.heads_t, R, warm)
    l_in, l_cross = rank_losses(s_vt, t @ t.T, v @ v.T, corr_v, corr_t)

    terms = {"clip": clip, "in": l_in, "cross": l_cross}
    data_total = clip + mu * l_in + mu * l_cross
    if weights.mu_d > 0 and inputs.student_img is not None:
        seed = weights.relational_seed
        terms["gram_img"] = gram_loss(inputs.student_img, inputs.teacher_img)
        terms["rel_img"] = relational_loss(inputs.student_img.cls, inputs.teacher_img.cls, seed=seed)
        distill = terms["gram_img"] + terms["rel_img"]
        if inputs.student_txt is not None:
            terms["gram_txt"] = gram_loss(inputs.student_txt, inputs.teacher_txt)
            terms["rel_txt"] = relational_loss(inputs.student_txt.cls, inputs.teacher_txt.cls, seed=seed)
            distill = distill + weights.rho * terms["gram_txt"] + weights.rho * terms["rel_txt"]
        data_total = data_total + weights.mu_d * distill

    total = data_total
    if R >= 2:
        penalty = torch.zeros((), dtype=DTYPE)
        for heads in (inputs.heads_v, inputs.heads_t):
            if heads is not None:
                penalty = penalty + gate_l1_penalty(heads.gates, weights.etas,
                                                    warm.frozen_orders(R), max_order=R)
        terms["gate_l1"] = penalty
        total = data_total + penalty

    values = {k: float(v_.detach()) for k, v_ in terms.items()}
    values["total"] = float(total.detach())
    bad = [k for k, x in values.items() if not math.isfinite(x)]
    if bad:
        raise NonFiniteError(f"non-finite loss terms: {bad}")
    return LossReport(total, data_total, values, mu)


def lr_at(step: int, total_steps: int, peak: float = 5e-4, warmup_frac: float = 0.05) -> float:
    """Linear warmup then cosine decay to zero."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight-decay Adam over a dict of named tensors.

    A thin wrapper around ``torch.optim.AdamW`` that refuses non-finite
    gradients and leaves frozen parameters (and their moments) untouched.
    Weight decay applies to matrices only; vectors and scalars (biases, gate
    logits, temperature) are not decayed. ``lr_scale`` multiplies the step
    size of individual named tensors.
    """

    def __init__(self, params: dict[str, torch.Tensor], betas=(0.9, 0.98),
                 weight_decay: float = 0.2, eps: float = 1e-8,
                 lr_scale: Optional[dict[str, float]] = None):
        self.params = params
        lr_scale = lr_scale or {}
        buckets: dict[tuple[bool, float], list[torch.Tensor]] = {}
        for name, p in params.items():
            buckets.setdefault((p.dim() >= 2, float(lr_scale.get(name, 1.0))), []).append(p)
        groups = [{"params": ps, "weight_decay": weight_decay if decay else 0.0, "lr_scale": scale}
                  for (decay, scale), ps in sorted(buckets.items(), key=lambda kv: (not kv[0][0], kv[0][1]))]
        self._opt = torch.optim.AdamW(groups, lr=0.0, betas=betas, eps=eps)

    @property
    def state(self):
        return self._opt.state

    def step(self, grads: dict[str, torch.Tensor], lr: float, frozen=()) -> None:
        frozen = set(frozen)
        # one reduction for the common case; per-tensor scan only to name the culprit
        if grads and not bool(torch.isfinite(torch.stack([g.abs().sum() for g in grads.values()])).all()):
            for name, g in grads.items():
                if not bool(torch.isfinite(g).all()):
                    raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        for name, p in self.params.items():
            p.grad = None if name in frozen or name not in grads else grads[name].clone()
        for group in self._opt.param_groups:
            group["lr"] = lr * group["lr_scale"]
        self._opt.step()
        for p in self.params.values():
            p.grad = None


def adamw_step(opt: AdamW, grads: dict[str, torch.Tensor], lr: float, frozen=()) -> None:
    opt.step(grads, lr, frozen)
