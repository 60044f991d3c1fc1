import itertools
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from plrank.numerics import EmptyCandidateError
from plrank.ranking import (CorrectionStack, RankingState, log_factorial, pl_position_prob,
                            pl_ranking_logprob, rank_loss_cross, rank_loss_inmodal, reference_order,
                            row_centre)
from plrank.verify import brute_force_logprob, enumerate_pl_mass, gradcheck

from conftest import uniform


def random_stack(g, n, order):
    beta = uniform(g, n, n) * 2
    beta.fill_diagonal_(-math.inf)
    gamma = uniform(g, n, n, n) * 2
    return CorrectionStack.from_tables(order, beta, gamma)


def test_row_centre_examples():
    assert torch.equal(row_centre(torch.ones(3, dtype=torch.float64), torch.ones(3, dtype=torch.bool)),
                       torch.zeros(3, dtype=torch.float64))
    out = row_centre(torch.tensor([2.0, 4.0], dtype=torch.float64), torch.tensor([True, True]))
    assert out.tolist() == [-1.0, 1.0]
    masked = row_centre(torch.tensor([2.0, 4.0, 9.0], dtype=torch.float64), torch.tensor([True, True, False]))
    assert masked.tolist() == [-1.0, 1.0, 9.0]
    with pytest.raises(EmptyCandidateError):
        row_centre(torch.ones(2, dtype=torch.float64), torch.zeros(2, dtype=torch.bool))


def test_order0_uniform_positions():
    state = RankingState(torch.tensor([2, 0, 3, 1]))
    theta = torch.tensor([5.0, -1.0, 2.0, 0.3], dtype=torch.float64)
    stack = CorrectionStack(0)
    for k in range(1, 5):
        assert float(pl_position_prob(k, state, theta, stack)) == -math.log(4 - k + 1)
    assert float(pl_ranking_logprob(state, theta, stack)) == -math.log(24)


def test_order0_every_ordering_one_over_six():
    perms = torch.tensor(list(itertools.permutations(range(3))))
    out = pl_ranking_logprob(RankingState(perms), torch.randn(3, dtype=torch.float64), CorrectionStack(0))
    assert torch.all(out == math.log(1 / 6))


def test_zero_corrections_match_first_order_exactly(gen):
    n = 5
    theta = uniform(gen, n)
    zero = CorrectionStack.from_tables(3, torch.zeros(n, n, dtype=torch.float64),
                                       torch.zeros(n, n, n, dtype=torch.float64))
    perms = torch.tensor(list(itertools.permutations(range(n))))
    a = pl_ranking_logprob(RankingState(perms), theta, zero)
    b = pl_ranking_logprob(RankingState(perms), theta, None)
    assert torch.equal(a, b)
    state = RankingState(perms[17])
    for k in range(1, n + 1):
        assert torch.equal(pl_position_prob(k, state, theta, zero), pl_position_prob(k, state, theta))


def test_order2_matches_two_branch_formula(gen):
    n = 4
    for _ in range(20):
        theta = uniform(gen, n)
        beta = uniform(gen, n, n)
        order = torch.randperm(n, generator=gen)
        state = RankingState(order)
        stack = CorrectionStack.from_tables(2, beta)
        y = order.tolist()
        for k in range(1, n + 1):
            rem = [d for d in range(n) if d not in y[:k - 1]]
            if k == 1:
                s = {d: float(theta[d]) for d in rem}
            else:
                s = {d: float(theta[d] + beta[y[k - 2], d]) for d in rem}
            expect = s[y[k - 1]] - math.log(sum(math.exp(v) for v in s.values()))
            assert abs(float(pl_position_prob(k, state, theta, stack)) - expect) < 1e-12


@pytest.mark.parametrize("n,order", [(5, 1), (5, 3), (4, 2), (6, 3)])
def test_enumeration_normalisation(gen, n, order):
    stack = random_stack(gen, n, order) if order >= 2 else None
    assert abs(enumerate_pl_mass(uniform(gen, n) * 3, stack) - 1.0) <= 1e-9


def test_batched_path_matches_per_position_and_brute_force(gen):
    n = 5
    for order in (1, 2, 3):
        stack = random_stack(gen, n, order) if order >= 2 else None
        theta = uniform(gen, n)
        for _ in range(5):
            perm = torch.randperm(n, generator=gen)
            state = RankingState(perm)
            batched = float(pl_ranking_logprob(state, theta, stack))
            per_pos = sum(float(pl_position_prob(k, state, theta, stack)) for k in range(1, n + 1))
            brute = brute_force_logprob(perm.tolist(), theta, stack)
            assert abs(batched - per_pos) < 1e-12
            assert abs(batched - brute) < 1e-12


def test_centring_does_not_change_probabilities(gen):
    n = 6
    stack = random_stack(gen, n, 3)
    theta = uniform(gen, n)
    state = RankingState(torch.randperm(n, generator=gen))
    for k in range(1, n + 1):
        a = float(pl_position_prob(k, state, theta, stack, centre=True))
        b = float(pl_position_prob(k, state, theta, stack, centre=False))
        assert abs(a - b) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100), st.integers(0, 2**31 - 1))
def test_theta_shift_invariance(c, seed):
    g = torch.Generator().manual_seed(seed)
    n = 5
    stack = random_stack(g, n, 3)
    theta = uniform(g, n)
    state = RankingState(torch.randperm(n, generator=g))
    for k in range(1, n + 1):
        a = float(pl_position_prob(k, state, theta, stack))
        b = float(pl_position_prob(k, state, theta + c, stack))
        assert abs(a - b) <= 1e-12


@pytest.mark.parametrize("order", [2, 3])
def test_history_window(gen, order):
    # permuting picks older than the window leaves the position probability unchanged
    n = 6
    stack = random_stack(gen, n, order)
    theta = uniform(gen, n)
    y = torch.randperm(n, generator=gen).tolist()
    k = 5
    keep = order - 1
    old, recent = y[:k - 1 - keep], y[k - 1 - keep:k - 1]
    base = float(pl_position_prob(k, RankingState(torch.tensor(y)), theta, stack))
    for perm in itertools.permutations(old):
        alt = list(perm) + recent + y[k - 1:]
        assert float(pl_position_prob(k, RankingState(torch.tensor(alt)), theta, stack)) == base


def test_reference_order_stable_ties():
    row = torch.tensor([0.5, 0.9, 0.5, 0.9, 0.1], dtype=torch.float64)
    assert reference_order(row).tolist() == [1, 3, 0, 2, 4]


def test_state_rejects_non_permutation():
    with pytest.raises(ValueError):
        RankingState(torch.tensor([0, 0, 1]))


def test_rank_losses_order0_constant_and_gradient_free(gen):
    n = 5
    s = uniform(gen, n, n).requires_grad_(True)
    for loss in (rank_loss_cross(s, s.T, CorrectionStack(0), CorrectionStack(0)),
                 rank_loss_inmodal(s, s.T, CorrectionStack(0))):
        assert float(loss) == math.log(math.factorial(n))
        assert not loss.requires_grad


def test_cross_identical_matrices_is_self_consistent_list(gen):
    n = 4
    s = uniform(gen, n, n)
    loss = float(rank_loss_cross(s, s))
    expect = 0.0
    for i in range(n):
        y = sorted(range(n), key=lambda d: (-float(s[i, d]), d))
        logp = 0.0
        for k in range(n):
            rem = y[k:]
            logp += float(s[i, y[k]]) - math.log(sum(math.exp(float(s[i, d])) for d in rem))
        expect -= logp / n
    assert abs(loss - expect) < 1e-12


def test_cross_loss_gradcheck(gen):
    for _ in range(10):
        stack = random_stack(gen, 4, 3)
        rep = gradcheck(lambda a, b: rank_loss_cross(a, b, stack, stack), [uniform(gen, 4, 4), uniform(gen, 4, 4)])
        assert rep.passed, rep.line()


def test_inmodal_symmetric_inputs(gen):
    s = uniform(gen, 5, 5)
    stack = random_stack(gen, 5, 2)
    loss = float(rank_loss_inmodal(s, s, stack))
    one_dir = -float(pl_ranking_logprob(RankingState(reference_order(s)), s, stack).mean())
    assert abs(loss - one_dir) < 1e-12


def test_inmodal_matches_brute_force(gen):
    n = 5
    s_tt, s_ii = uniform(gen, n, n), uniform(gen, n, n)
    stack = random_stack(gen, n, 3)
    loss = float(rank_loss_inmodal(s_tt, s_ii, stack))
    total = 0.0
    for ref, util in ((s_ii, s_tt), (s_tt, s_ii)):
        for i in range(n):
            y = sorted(range(n), key=lambda d: (-float(ref[i, d]), d))
            assert abs(enumerate_pl_mass(util[i], stack) - 1.0) < 1e-9
            total += brute_force_logprob(y, util[i], stack) / n
    assert abs(loss + 0.5 * total) < 1e-12


def test_log_factorial():
    assert log_factorial(4) == math.log(24)
