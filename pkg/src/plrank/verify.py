"""Independent oracles: permutation enumeration and central differences.

The brute-force likelihood here deliberately re-derives every per-position
softmax in plain Python floats so that it shares nothing with the batched
tensor path in :mod:`plrank.ranking` except the correction callables it is
handed.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import torch

from .fusion import FusionParams, alignment_angle_bound, conflict_gate_fuse
from .numerics import DTYPE
from .objective import LossInputs, LossWeights, RankHeads, WarmStartState, clip_infonce, total_loss
from .ranking import CorrectionStack, RankingState, log_factorial, pl_ranking_logprob, rank_loss_cross, rank_loss_inmodal
from .transitions import GateBank, TransitionParams, raw_corrections

MAX_ENUMERATION = 6


@dataclass
class OracleReport:
    name: str
    max_abs: float
    max_rel: float
    trials: int
    tol: float
    seed: Optional[int] = None
    failures: list = field(default_factory=list)
    metric: str = "abs"  # which deviation ``tol`` applies to

    @property
    def passed(self) -> bool:
        dev = self.max_rel if self.metric == "rel" else self.max_abs
        return not self.failures and dev <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max_abs={self.max_abs:.3e} max_rel={self.max_rel:.3e} "
                f"tol={self.tol:.1e} ({self.metric}) trials={self.trials} seed={self.seed}")

    def as_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "max_abs": self.max_abs,
                "max_rel": self.max_rel, "tol": self.tol, "metric": self.metric,
                "trials": self.trials, "seed": self.seed, "failures": self.failures[:10]}


def all_orderings(n: int) -> torch.Tensor:
    if n > MAX_ENUMERATION:
        raise ValueError(f"refusing to enumerate {n}! orderings (limit N={MAX_ENUMERATION})")
    return torch.tensor(list(itertools.permutations(range(n))), dtype=torch.long)


def enumerate_pl_mass(theta: torch.Tensor, corr: Optional[CorrectionStack] = None) -> float:
    """Total probability over all ``N!`` orderings of the batched likelihood."""
    theta = torch.as_tensor(theta, dtype=DTYPE)
    perms = all_orderings(theta.shape[-1])
    with torch.no_grad():
        logp = pl_ranking_logprob(RankingState(perms), theta, corr)
    return math.fsum(math.exp(x) for x in logp.tolist())


def brute_force_logprob(order: Sequence[int], theta, corr: Optional[CorrectionStack] = None,
                        centre: bool = True) -> float:
    """Scalar re-derivation of the ordering log-probability."""
    order = [int(i) for i in order]
    n = len(order)
    R = 1 if corr is None else corr.order
    if R == 0:
        return -sum(math.log(n - k) for k in range(n))
    theta = [float(x) for x in torch.as_tensor(theta).tolist()]
    total = 0.0
    for k in range(n):
        remaining = [d for d in range(n) if d not in order[:k]]
        score = {d: theta[d] for d in remaining}
        for r in range(2, min(R, k + 1) + 1):
            term = corr.terms.get(r)
            if term is None:
                continue
            with torch.no_grad():
                row = term(torch.tensor(order[k - r + 1:k], dtype=torch.long)).tolist()
            vals = {d: float(row[d]) for d in remaining}
            offset = math.fsum(vals.values()) / len(vals) if centre else 0.0
            for d in remaining:
                score[d] += vals[d] - offset
        top = max(score.values())
        lse = top + math.log(math.fsum(math.exp(s - top) for s in score.values()))
        total += score[order[k]] - lse
    return total


def _grad_inputs(inputs):
    if isinstance(inputs, torch.Tensor):
        return [inputs]
    return list(inputs)


_STENCILS = {3: ((1.0, 0.5), (-1.0, -0.5)),
             5: ((2.0, -1 / 12), (1.0, 8 / 12), (-1.0, -8 / 12), (-2.0, 1 / 12))}


def gradcheck(fn: Callable[..., torch.Tensor], inputs, step: float = 1e-5, tol: float = 1e-6,
              floor: float = 1e-8, name: str = "gradcheck", seed: Optional[int] = None,
              stencil: int = 3) -> OracleReport:
    """Compare autograd gradients of scalar ``fn(*inputs)`` with central differences.

    Per-coordinate relative error uses ``max(|analytic|, |numeric|, floor)`` as
    denominator. ``stencil=5`` is the fourth-order central formula; it tolerates
    a larger ``step`` on smooth functions, so evaluation roundoff
    (about ``eps * |f| / step``) no longer swamps tiny gradient coordinates.
    """
    offsets = _STENCILS[stencil]
    xs = [torch.as_tensor(x, dtype=DTYPE).detach().clone().requires_grad_(True)
          for x in _grad_inputs(inputs)]
    out = fn(*xs)
    if not bool(torch.isfinite(out)):
        return OracleReport(name, math.inf, math.inf, 1, tol, seed, ["non-finite value at x0"], "rel")
    grads = torch.autograd.grad(out, xs, allow_unused=True)
    max_abs = max_rel = 0.0
    failures = []
    base = [x.detach().clone() for x in xs]
    with torch.no_grad():
        for i, x0 in enumerate(base):
            analytic = grads[i] if grads[i] is not None else torch.zeros_like(x0)
            flat = x0.reshape(-1)
            for j in range(flat.numel()):
                vals = []
                for k, _ in offsets:
                    pert = flat.clone()
                    pert[j] += k * step
                    args = [b if m != i else pert.reshape(x0.shape) for m, b in enumerate(base)]
                    vals.append(float(fn(*args)))
                if not all(math.isfinite(v) for v in vals):
                    failures.append((i, j, "non-finite"))
                    continue
                numeric = math.fsum(c * v for (_, c), v in zip(offsets, vals)) / step
                a = float(analytic.reshape(-1)[j])
                dev = abs(a - numeric)
                rel = dev / max(abs(a), abs(numeric), floor)
                max_abs = max(max_abs, dev)
                if rel > max_rel:
                    max_rel = rel
                if rel > tol:
                    failures.append((i, j, a, numeric))
    return OracleReport(name, max_abs, max_rel, 1, tol, seed, failures, "rel")


def merge_reports(name: str, reports: Sequence[OracleReport]) -> OracleReport:
    failures = [f for r in reports for f in r.failures]
    return OracleReport(name, max(r.max_abs for r in reports), max(r.max_rel for r in reports),
                        sum(r.trials for r in reports), reports[0].tol, reports[0].seed,
                        failures, reports[0].metric)


def random_heads(dim: int, head_dim: int, order: int, modality: str, g: torch.Generator,
                 gate_logit: Optional[float] = None) -> RankHeads:
    params = TransitionParams.init(dim, head_dim, max(order, 3), modality, g)
    gates = GateBank.init(max(order, 3), modality)
    if gate_logit is not None:
        for s in gates.logits.values():
            s.data.fill_(gate_logit)
    return RankHeads(params, gates)


def zero_heads(heads: RankHeads) -> RankHeads:
    for t in heads.params.named_parameters().values():
        t.data.zero_()
    return heads


def order0_gradient_check(seed: int, trials: int = 20, batch: int = 8, dim: int = 16) -> OracleReport:
    """Order 0 with distillation off: total-loss gradient equals InfoNCE gradient."""
    g = torch.Generator().manual_seed(seed)
    max_abs = 0.0
    worst_value = 0.0
    for _ in range(trials):
        img = torch.randn(batch, dim, generator=g, dtype=DTYPE).requires_grad_(True)
        txt = torch.randn(batch, dim, generator=g, dtype=DTYPE).requires_grad_(True)
        logt = torch.tensor(math.log(0.07), dtype=DTYPE, requires_grad=True)
        inputs = LossInputs(img, txt, logt)
        report = total_loss(inputs, LossWeights(mu_d=0.0, order=0, mu=1.0))
        g_tot = torch.autograd.grad(report.total, [img, txt, logt])
        v = img / img.norm(dim=-1, keepdim=True)
        t = txt / txt.norm(dim=-1, keepdim=True)
        g_clip = torch.autograd.grad(clip_infonce(v @ t.T, logt.exp()), [img, txt, logt])
        max_abs = max(max_abs, max(float((a - b).abs().max()) for a, b in zip(g_tot, g_clip)))
        const = log_factorial(batch)
        worst_value = max(worst_value, abs(report.terms["in"] - const), abs(report.terms["cross"] - const))
    fails = [] if worst_value == 0.0 else [("rank loss differs from ln(B!)", worst_value)]
    return OracleReport("order0-infonce-gradient", max_abs, max_abs, trials, 1e-12, seed, fails)


def zero_heads_nesting_check(seed: int, trials: int = 20, batch: int = 8, dim: int = 16) -> OracleReport:
    """Order 3 with zero transition weights is bit-identical to order 1."""
    g = torch.Generator().manual_seed(seed)
    max_abs = 0.0
    for _ in range(trials):
        v = torch.nn.functional.normalize(torch.randn(batch, dim, generator=g, dtype=DTYPE), dim=-1)
        t = torch.nn.functional.normalize(torch.randn(batch, dim, generator=g, dtype=DTYPE), dim=-1)
        hv = zero_heads(random_heads(dim, 4, 3, "V", g))
        ht = zero_heads(random_heads(dim, 4, 3, "T", g))
        cv = raw_corrections(v, hv.params, 3)
        ct = raw_corrections(t, ht.params, 3)
        s = v @ t.T
        pairs = [(rank_loss_cross(s, s.T, cv, ct), rank_loss_cross(s, s.T)),
                 (rank_loss_inmodal(t @ t.T, v @ v.T, ct, cv), rank_loss_inmodal(t @ t.T, v @ v.T))]
        # the same through the gated objective; the gate regulariser is the only
        # term that exists at order 3 and not at order 1, so compare data_total
        logt = torch.tensor(math.log(0.07), dtype=DTYPE)
        full = total_loss(LossInputs(v, t, logt, hv, ht), LossWeights(mu_d=0.0, order=3, mu=1.0),
                          WarmStartState(10))
        first = total_loss(LossInputs(v, t, logt, hv, ht), LossWeights(mu_d=0.0, order=1, mu=1.0),
                           WarmStartState(10))
        pairs += [(full.data_total, first.data_total)]
        pairs += [(torch.tensor(full.terms[k]), torch.tensor(first.terms[k])) for k in ("in", "cross")]
        for a, b in pairs:
            max_abs = max(max_abs, float((a - b).detach().abs()))
    return OracleReport("order3-zero-heads-equals-order1", max_abs, max_abs, trials, 0.0, seed)


def constant_loss_check(seed: int, n: int = 4) -> OracleReport:
    """Zero utilities and corrections give ln(N!); order 0 gives it with zero gradient."""
    g = torch.Generator().manual_seed(seed)
    zeros = torch.zeros(n, n, dtype=DTYPE)
    stack = CorrectionStack.from_tables(3, torch.zeros(n, n, dtype=DTYPE), torch.zeros(n, n, n, dtype=DTYPE))
    flat = rank_loss_inmodal(zeros, zeros, stack)
    # uniform utilities still pull on theta, so the zero-gradient claim is for order 0
    theta = torch.randn(n, n, generator=g, dtype=DTYPE, requires_grad=True)
    order0 = rank_loss_inmodal(theta, theta.T, CorrectionStack(0))
    # a constant with no path to theta has an identically zero gradient
    grad_dev = 0.0
    if order0.requires_grad:
        (grad,) = torch.autograd.grad(order0, [theta], allow_unused=True)
        grad_dev = 0.0 if grad is None else float(grad.abs().max())
    dev = max(abs(float(flat) - log_factorial(n)), abs(float(order0.detach()) - log_factorial(n)), grad_dev)
    return OracleReport("zero-utility-constant", dev, dev, 1, 1e-12, seed)


def angle_bound_sweep(seed: int, draws: int = 1000, dim: int = 16, slack: float = 1e-12) -> OracleReport:
    """Monte-Carlo check of the gated-fusion angle bound."""
    g = torch.Generator().manual_seed(seed)
    worst = -math.inf
    violations, used = [], 0
    while used < draws:
        v_c = torch.randn(dim, generator=g, dtype=DTYPE)
        u = torch.randn(dim, generator=g, dtype=DTYPE) * torch.rand((), generator=g, dtype=DTYPE) * 2
        eps = float(torch.rand((), generator=g, dtype=DTYPE))
        params = FusionParams.init(dim, dim, generator=g)
        with torch.no_grad():
            params.gate_w.mul_(float(torch.randn((), generator=g)) * 3)
            params.gate_b.normal_(generator=g).mul_(3)
        fused = conflict_gate_fuse(v_c, u, params)
        # rescale the gate so its sup-norm is eps
        alpha = fused.gate.detach() * eps / float(fused.gate.detach().max())
        fused = type(fused)(v_c + alpha * u, v_c, u, alpha)
        check = alignment_angle_bound(fused)
        if check.vacuous:
            continue
        used += 1
        worst = max(worst, check.angle - check.bound)
        if not check.holds(slack):
            violations.append((used, check.angle, check.bound))
    return OracleReport("fusion-angle-bound", max(worst, 0.0), max(worst, 0.0), draws, slack, seed, violations)


def normalisation_sweep(seed: int, sizes=range(2, 7), orders=(0, 1, 2, 3), draws: int = 50,
                        head_dim: int = 2, dim: int = 4) -> OracleReport:
    """Probability mass over all orderings is one for random utilities and heads."""
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    trials = 0
    for n in sizes:
        for R in orders:
            for _ in range(draws):
                theta = torch.randn(n, generator=g, dtype=DTYPE) * 2
                emb = torch.randn(n, dim, generator=g, dtype=DTYPE)
                heads = random_heads(dim, head_dim, max(R, 3), "V", g)
                corr = raw_corrections(emb, heads.params, R) if R >= 2 else CorrectionStack(R)
                if R == 1:
                    corr = None
                mass = enumerate_pl_mass(theta, corr)
                worst = max(worst, abs(mass - 1.0))
                trials += 1
    return OracleReport("pl-normalisation", worst, worst, trials, 1e-9, seed)


def collapse_suite(seed: int = 0) -> list[OracleReport]:
    return [order0_gradient_check(seed), zero_heads_nesting_check(seed), constant_loss_check(seed),
            angle_bound_sweep(seed)]


def gradcheck_trials(name: str, make: Callable[[torch.Generator], tuple], trials: int, seed: int,
                     tol: float = 1e-6, step: float = 1e-5, stencil: int = 3) -> OracleReport:
    """Run ``gradcheck`` on ``trials`` seeded draws from ``make(g) -> (fn, inputs)``."""
    g = torch.Generator().manual_seed(seed)
    reports = []
    for _ in range(trials):
        fn, inputs = make(g)
        reports.append(gradcheck(fn, inputs, step=step, tol=tol, name=name, seed=seed, stencil=stencil))
    return merge_reports(name, reports)


def uniform(g: torch.Generator, *shape) -> torch.Tensor:
    return torch.rand(*shape, generator=g, dtype=DTYPE) * 2 - 1



def _gc_beta(g):
    from .transitions import beta_scores
    n, D, h = 4, 3, 2
    w = uniform(g, n, n)

    def fn(e, wq, wk):
        p = TransitionParams(wq, wk, *(torch.zeros(D, D, dtype=DTYPE),) * 3,
                             torch.zeros(h, D, dtype=DTYPE), torch.zeros(h, D, dtype=DTYPE))
        b = beta_scores(e, p)
        off = ~torch.eye(n, dtype=torch.bool)
        return (w * torch.where(off, b, torch.zeros((), dtype=DTYPE))).sum()
    return fn, [uniform(g, n, D), uniform(g, h, D), uniform(g, h, D)]


def _gc_gamma(g):
    from .transitions import gamma_score
    D, h = 4, 2

    def fn(ea, eb, ed, w1, w2, w3, wqg, wkg):
        p = TransitionParams(torch.zeros(h, D, dtype=DTYPE), torch.zeros(h, D, dtype=DTYPE),
                             w1, w2, w3, wqg, wkg)
        return gamma_score(ea, eb, ed, p)
    return fn, [uniform(g, D), uniform(g, D), uniform(g, D), uniform(g, D, D), uniform(g, D, D),
                uniform(g, D, D), uniform(g, h, D), uniform(g, h, D)]


def _gc_history(g):
    from .transitions import HistoryEncoder, history_encode
    D, h, length = 3, 2, 3
    w = uniform(g, D)
    base = TransitionParams.init(D, h, 3, "V", g)

    def fn(hist, wq, wk, wv, wo, pos):
        enc = HistoryEncoder(wq, wk, wv, wo, pos, base.wq, base.wk)
        p = TransitionParams(base.wq, base.wk, base.w1, base.w2, base.w3, base.wq_gamma,
                             base.wk_gamma, {length + 1: enc})
        return (w * history_encode(hist, p)).sum()
    return fn, [uniform(g, length, D), uniform(g, h, D), uniform(g, h, D), uniform(g, h, D),
                uniform(g, D, h), uniform(g, length, D)]


def _fusion_params(g, dS, d):
    p = FusionParams.init(dS, d, generator=g)
    names = list(p.__dataclass_fields__)
    return p, names


def _gc_fusion_attend(g):
    from .fusion import channel_spatial_attend, spp_1d
    L, dS = 8, 4
    p, names = _fusion_params(g, dS, 3)
    sel = ["ch_w1", "ch_b1", "ch_w2", "ch_b2", "sp_w", "sp_b"]
    w = uniform(g, L + 14, dS)

    def fn(tokens, *ws):
        q = FusionParams(**{**{n: getattr(p, n) for n in names}, **dict(zip(sel, ws))})
        return (w * channel_spatial_attend(spp_1d(tokens), q)).sum()
    return fn, [uniform(g, L, dS)] + [uniform(g, *getattr(p, n).shape) for n in sel]


def _gc_fusion_refine(g):
    from .fusion import refine_and_pool
    rows, dS, d = 10, 3, 3
    p, names = _fusion_params(g, dS, d)
    sel = ["att_q", "att_k", "att_v", "proj"]
    w = uniform(g, d)

    def fn(U, *ws):
        q = FusionParams(**{**{n: getattr(p, n) for n in names}, **dict(zip(sel, ws))})
        return (w * refine_and_pool(U, q)).sum()
    return fn, [uniform(g, rows, dS)] + [uniform(g, *getattr(p, n).shape) for n in sel]


def _gc_fusion_gate(g):
    d = 4
    p, names = _fusion_params(g, 3, d)
    w = uniform(g, d)

    def fn(v_c, u, gw, gb):
        q = FusionParams(**{**{n: getattr(p, n) for n in names}, "gate_w": gw, "gate_b": gb})
        return (w * conflict_gate_fuse(v_c, u, q).fused).sum()
    return fn, [uniform(g, d), uniform(g, d), uniform(g, d, 2 * d), uniform(g, d)]


def _gc_gram(g):
    from .distill import StudentFeatures, TeacherFeatures, gram_loss
    L, dS, dT = 6, 3, 5
    teacher = TeacherFeatures(uniform(g, 2, L, dT), uniform(g, 2, dT))

    def fn(tokens):
        return gram_loss(StudentFeatures(tokens, tokens.mean(-2)), teacher)
    return fn, [uniform(g, 2, L, dS)]


def _gc_relational(g):
    from .distill import relational_loss
    teacher = uniform(g, 4, 5)
    return (lambda s: relational_loss(s, teacher)), [uniform(g, 4, 3)]


def _gc_infonce(g):
    return (lambda s, logt: clip_infonce(s, logt.exp())), [uniform(g, 5, 5), torch.tensor(-1.0 + float(uniform(g, 1)) * 0.5, dtype=DTYPE)]


def _gc_rank(order: int):
    def make(g):
        n, D, h = 4, 3, 2
        e = uniform(g, n, D)
        base = TransitionParams.init(D, h, 3, "V", g)

        def fn(s_vt, s_tv, wq, wk, w1, wqg):
            p = TransitionParams(wq, wk, w1, base.w2, base.w3, wqg, base.wk_gamma)
            corr = raw_corrections(e, p, order) if order >= 2 else None
            return rank_loss_cross(s_vt, s_tv, corr, corr) + rank_loss_inmodal(s_tv, s_vt, corr)
        return fn, [uniform(g, n, n), uniform(g, n, n), uniform(g, h, D), uniform(g, h, D),
                    uniform(g, D, D), uniform(g, h, D)]
    return make


def _gc_gate_penalty(g):
    from .transitions import gate_l1_penalty

    def fn(s2, s3):
        return gate_l1_penalty(GateBank({2: s2, 3: s3}), {2: 1e-4, 3: 1e-3})
    return fn, [uniform(g, 1).reshape(()) * 4 - 3, uniform(g, 1).reshape(()) * 4 - 5]


GRADIENT_SUITE = {
    "beta-head": _gc_beta,
    "gamma-head": _gc_gamma,
    "history-encoder": _gc_history,
    "fusion-channel-spatial": _gc_fusion_attend,
    "fusion-refine-pool": _gc_fusion_refine,
    "fusion-conflict-gate": _gc_fusion_gate,
    "gram-loss": _gc_gram,
    "relational-loss": _gc_relational,
    "infonce": _gc_infonce,
    "rank-loss-R1": _gc_rank(1),
    "rank-loss-R2": _gc_rank(2),
    "rank-loss-R3": _gc_rank(3),
    "gate-l1-penalty": _gc_gate_penalty,
}


def gradient_suite(seed: int = 0, trials: int = 100, tol: float = 1e-6, names=None) -> list[OracleReport]:
    names = list(GRADIENT_SUITE) if names is None else names
    return [gradcheck_trials(n, GRADIENT_SUITE[n], trials, seed + i, tol)
            for i, n in enumerate(names)]
