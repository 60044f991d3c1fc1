import math

import pytest
import torch

from plrank.distill import StudentFeatures, TeacherFeatures, gram_loss, relational_loss
from plrank.objective import (AdamW, LossInputs, LossWeights, NonFiniteError, WarmStartState, adamw_step,
                              clip_infonce, correction_stack, default_etas, lr_at, mu_schedule, normalise,
                              total_loss, unfreeze_epoch)
from plrank.ranking import rank_loss_cross, rank_loss_inmodal, rank_losses
from plrank.transitions import gate_l1_penalty
from plrank.verify import gradcheck, order0_gradient_check, zero_heads_nesting_check, random_heads

from conftest import uniform


def test_infonce_uniform():
    assert abs(float(clip_infonce(torch.zeros(4, 4, dtype=torch.float64), 1.0)) - math.log(4)) < 1e-15


def test_infonce_margin_limit():
    losses = [float(clip_infonce(m * torch.eye(5, dtype=torch.float64), 1.0)) for m in (1, 10, 40)]
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-15


def test_infonce_errors():
    with pytest.raises(ValueError):
        clip_infonce(torch.zeros(3, 3, dtype=torch.float64), 0.0)
    with pytest.raises(ValueError):
        clip_infonce(torch.zeros(3, 2, dtype=torch.float64), 1.0)


def test_infonce_gradcheck(gen):
    rep = gradcheck(lambda s, t: clip_infonce(s, t), [uniform(gen, 5, 5), torch.tensor(0.3, dtype=torch.float64)])
    assert rep.passed, rep.line()


def test_mu_schedule_examples():
    assert mu_schedule(0, 64) == 0.0
    assert mu_schedule(63, 64) == 2.0
    assert mu_schedule(21, 64) == 62 / 63
    assert abs(mu_schedule(21, 64) - 0.98413) < 5e-6
    with pytest.raises(ValueError):
        mu_schedule(0, 1)


@pytest.mark.parametrize("n", range(3, 129))
def test_mu_schedule_endpoints(n):
    assert mu_schedule(0, n) == 0.0 and mu_schedule(n - 1, n) == 2.0


def test_default_etas_monotone():
    etas = default_etas(5)
    assert etas[2] == 1e-4 and etas[3] == 1e-3
    assert all(etas[r] < etas[r + 1] for r in range(2, 5))


def test_warm_start_windows():
    assert [unfreeze_epoch(r) for r in (1, 2, 3)] == [0, 3, 6]
    flags = []
    w = WarmStartState()
    for epoch in range(9):
        w.advance(epoch)
        flags.append(sorted(w.frozen_orders(3)))
    assert flags[:3] == [[2, 3]] * 3 and flags[3:6] == [[3]] * 3 and flags[6:] == [[]] * 3
    with pytest.raises(ValueError):
        w.advance(2)


def make_inputs(g, B=4, D=6, L=8, dS=3, dT=5, gate_logit=None):
    img = uniform(g, B, D).requires_grad_(True)
    txt = uniform(g, B, D).requires_grad_(True)
    logt = torch.tensor(math.log(0.07), dtype=torch.float64, requires_grad=True)
    s_i = StudentFeatures(uniform(g, B, L, dS).requires_grad_(True), uniform(g, B, dS).requires_grad_(True))
    s_t = StudentFeatures(uniform(g, B, L, dS).requires_grad_(True), uniform(g, B, dS).requires_grad_(True))
    t_i = TeacherFeatures(uniform(g, B, L, dT), uniform(g, B, dT))
    t_t = TeacherFeatures(uniform(g, B, L, dT), uniform(g, B, dT))
    hv = random_heads(D, 4, 3, "V", g, gate_logit)
    ht = random_heads(D, 4, 3, "T", g, gate_logit)
    return LossInputs(img, txt, logt, hv, ht, s_i, s_t, t_i, t_t)


def test_component_sum_oracle(gen):
    inputs = make_inputs(gen, gate_logit=0.5)
    w = LossWeights(mu_d=0.5, rho=0.5, order=3, mu=0.7)
    rep = total_loss(inputs, w, WarmStartState(10))
    v, t = normalise(inputs.image), normalise(inputs.text)
    warm = WarmStartState(10)
    cv, ct = correction_stack(v, inputs.heads_v, 3, warm), correction_stack(t, inputs.heads_t, 3, warm)
    s = v @ t.T
    expect = (clip_infonce(s, inputs.log_temperature.exp())
              + 0.7 * rank_loss_inmodal(t @ t.T, v @ v.T, ct, cv)
              + 0.7 * rank_loss_cross(s, s.T, cv, ct)
              + 0.5 * (gram_loss(inputs.student_img, inputs.teacher_img)
                       + relational_loss(inputs.student_img.cls, inputs.teacher_img.cls)
                       + 0.5 * gram_loss(inputs.student_txt, inputs.teacher_txt)
                       + 0.5 * relational_loss(inputs.student_txt.cls, inputs.teacher_txt.cls))
              + gate_l1_penalty(inputs.heads_v.gates, w.etas) + gate_l1_penalty(inputs.heads_t.gates, w.etas))
    assert abs(float(rep.total) - float(expect)) <= 1e-12
    assert set(rep.terms) >= {"clip", "in", "cross", "gram_img", "rel_img", "gram_txt", "rel_txt", "gate_l1", "total"}


def test_batched_rank_losses_match_separate_calls(gen):
    inputs = make_inputs(gen, B=7, gate_logit=0.0)
    v, t = normalise(inputs.image), normalise(inputs.text)
    warm = WarmStartState(10)
    cv, ct = correction_stack(v, inputs.heads_v, 3, warm), correction_stack(t, inputs.heads_t, 3, warm)
    s = v @ t.T
    l_in, l_cross = rank_losses(s, t @ t.T, v @ v.T, cv, ct)
    assert abs(float(l_in) - float(rank_loss_inmodal(t @ t.T, v @ v.T, ct, cv))) < 1e-13
    assert abs(float(l_cross) - float(rank_loss_cross(s, s.T, cv, ct))) < 1e-13


def test_only_infonce_when_other_weights_zero(gen):
    inputs = make_inputs(gen)
    rep = total_loss(inputs, LossWeights(mu_d=0.0, order=1, mu=0.0))
    v, t = normalise(inputs.image), normalise(inputs.text)
    assert float(rep.total) == float(clip_infonce(v @ t.T, inputs.log_temperature.exp()))
    rep3 = total_loss(inputs, LossWeights(mu_d=0.0, order=3, mu=0.0))
    assert float(rep3.data_total) == float(rep.total)


def test_schedule_mu_used_when_unset(gen):
    rep = total_loss(make_inputs(gen), LossWeights(order=1), WarmStartState(4), n_epochs=10)
    assert rep.mu == mu_schedule(4, 10)


def test_order0_gradient_identity():
    rep = order0_gradient_check(seed=11)
    assert rep.passed, rep.line()


def test_zero_heads_nesting():
    rep = zero_heads_nesting_check(seed=12)
    assert rep.passed and rep.max_abs == 0.0, rep.line()


def order_grads(inputs, epoch):
    rep = total_loss(inputs, LossWeights(order=3, mu=1.0), WarmStartState(epoch))
    out = {}
    for heads in (inputs.heads_v, inputs.heads_t):
        named = {**heads.params.named_parameters(), **heads.gates.named_parameters()}
        grads = rep.gradients(named)
        for name, g in grads.items():
            r = int(name.split("gate")[1]) if ".gate" in name else (2 if ".beta." in name else 3)
            out.setdefault(r, []).append(g)
    return out


def test_warm_start_gradients(gen):
    inputs = make_inputs(gen, B=6)
    early = order_grads(inputs, 1)
    assert all(bool(torch.all(g == 0)) for gs in early.values() for g in gs)
    mid = order_grads(inputs, 4)
    assert all(float(g.abs().sum()) > 0 for g in mid[2])
    assert all(bool(torch.all(g == 0)) for g in mid[3])
    late = order_grads(inputs, 7)
    assert all(float(g.abs().sum()) > 0 for g in late[3])


def test_non_finite_loss_aborts(gen):
    inputs = make_inputs(gen)
    with torch.no_grad():
        inputs.image[0, 0] = math.nan
    with pytest.raises(NonFiniteError):
        total_loss(inputs, LossWeights(order=1))


def test_lr_schedule():
    assert lr_at(0, 100, 1.0, 0.05) == 0.2
    assert lr_at(4, 100, 1.0, 0.05) == 1.0
    assert lr_at(5, 100, 1.0, 0.05) == 1.0
    assert abs(lr_at(99, 100, 1.0, 0.05) - 0.5 * (1 + math.cos(math.pi * 94 / 95))) < 1e-15
    assert lr_at(100, 100, 1.0, 0.05) == 0.0
    vals = [lr_at(i, 100) for i in range(5, 100)]
    assert all(a >= b for a, b in zip(vals, vals[1:])) and max(vals) == 5e-4


def scalar(value):
    return torch.tensor(value, dtype=torch.float64, requires_grad=True)


def test_adamw_single_step_hand_trace():
    p = scalar(1.0)
    opt = AdamW({"p": p}, betas=(0.9, 0.98), weight_decay=0.2)
    adamw_step(opt, {"p": torch.tensor(1.0, dtype=torch.float64)}, lr=0.1)
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.02 * 1.0) / (1 - 0.98)
    assert abs(float(p) - (1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8))) < 1e-15


def test_adamw_decay_only_and_zero_gradient():
    w = torch.ones(2, 2, dtype=torch.float64, requires_grad=True)
    b = torch.ones(2, dtype=torch.float64, requires_grad=True)
    opt = AdamW({"w": w, "b": b}, weight_decay=0.2)
    opt.step({"w": torch.zeros(2, 2, dtype=torch.float64), "b": torch.zeros(2, dtype=torch.float64)}, lr=0.1)
    assert torch.equal(w.detach(), torch.full((2, 2), 1 - 0.02, dtype=torch.float64))
    assert torch.equal(b.detach(), torch.ones(2, dtype=torch.float64))
    still = torch.ones(2, 2, dtype=torch.float64, requires_grad=True)
    AdamW({"w": still}, weight_decay=0.0).step({"w": torch.zeros(2, 2, dtype=torch.float64)}, lr=0.1)
    assert torch.equal(still.detach(), torch.ones(2, 2, dtype=torch.float64))


def test_adamw_frozen_untouched_and_lr_scale():
    a, c = scalar(1.0), scalar(1.0)
    frozen = torch.ones(2, 2, dtype=torch.float64, requires_grad=True)
    opt = AdamW({"a": a, "c": c, "f": frozen}, lr_scale={"c": 3.0})
    grads = {"a": torch.tensor(1.0, dtype=torch.float64), "c": torch.tensor(1.0, dtype=torch.float64),
             "f": torch.ones(2, 2, dtype=torch.float64)}
    opt.step(grads, lr=0.01, frozen={"f"})
    assert torch.equal(frozen.detach(), torch.ones(2, 2, dtype=torch.float64))
    assert frozen not in opt.state or not opt.state[frozen]
    assert abs((1 - float(c)) - 3 * (1 - float(a))) < 1e-15


def test_adamw_non_finite_gradient_names_parameter():
    p, q = scalar(0.0), scalar(0.0)
    opt = AdamW({"good": p, "bad.weight": q})
    with pytest.raises(NonFiniteError, match="bad.weight"):
        opt.step({"good": torch.tensor(1.0, dtype=torch.float64), "bad.weight": torch.tensor(math.inf, dtype=torch.float64)}, 0.1)
    assert float(p) == 0.0
