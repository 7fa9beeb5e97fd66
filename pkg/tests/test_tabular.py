import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rmdp.core import ContractViolation, InvalidArgument, one_hot
from rmdp.tabular import (InstanceFormatError, TabularRMdp, em_solve, exact_e_step, exact_m_step,
                          exhaustive_optimum, format_instance, is_fixed_point, load_instance, optimal_policy,
                          parse_instance, policy_values, random_instance, save_instance, single_move_improves,
                          start_values, trace_is_monotone, value_table, weighted_reward, welfare)


def one_state(rewards, gamma=0.9):
    """Single self-looping state; ``rewards`` is n x A."""
    r = np.asarray(rewards, dtype=float)
    return TabularRMdp(np.ones((1, r.shape[1], 1)), [1.0], r[:, None, :], gamma)


def test_weighted_reward_examples():
    rng = np.random.default_rng(0)
    m = random_instance(rng, 3, 2, 3)
    np.testing.assert_array_equal(weighted_reward(m, [0, 1, 0]), m.rewards[1])
    two = one_state([[0.0, 0.0], [2.0, 2.0]])
    np.testing.assert_allclose(weighted_reward(two, [0.5, 0.5]), 1.0)
    w = np.array([0.2, 0.5, 0.3])
    np.testing.assert_allclose(weighted_reward(m, w), 0.2 * m.rewards[0] + 0.5 * m.rewards[1] + 0.3 * m.rewards[2])


def test_optimal_policy_closed_form():
    m = one_state([[1.0, 2.0]], gamma=0.9)
    pol = optimal_policy(m, m.rewards[0])
    np.testing.assert_array_equal(pol, [[0, 1]])
    assert policy_values(m, pol, m.rewards[0])[0] == pytest.approx(2 / (1 - 0.9))


def test_optimal_policy_walks_down_the_chain():
    # states 0..3, action 1 moves right, action 0 stays; reward for acting in the last state
    S = 4
    T = np.zeros((S, 2, S))
    for s in range(S):
        T[s, 0, s] = 1.0
        T[s, 1, min(s + 1, S - 1)] = 1.0
    R = np.zeros((1, S, 2))
    R[0, S - 1, :] = 1.0
    m = TabularRMdp(T, one_hot([0], S)[0], R, 0.9)
    pol = optimal_policy(m, R[0])
    assert np.all(pol[:S - 1, 1] == 1)
    # ties in the absorbing state go to action 0
    np.testing.assert_array_equal(pol[S - 1], [1, 0])


def test_m_step_without_repair_rejects_empty_columns():
    m = random_instance(np.random.default_rng(0), 3, 2, 2)
    with pytest.raises(ContractViolation):
        exact_m_step(m, [[1, 0], [1, 0]], repair="none")


def test_e_step_examples():
    m = one_state([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    pols = [np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]
    np.testing.assert_array_equal(exact_e_step(m, pols), [[1, 0], [0, 1], [1, 0]])
    np.testing.assert_array_equal(exact_e_step(m, pols[:1]), np.ones((3, 1)))


def test_values_match_monte_carlo():
    rng = np.random.default_rng(11)
    m = random_instance(rng, 2, 2, 2, gamma=0.5)
    pol = np.array([[0.3, 0.7], [1.0, 0.0]])
    exact = start_values(m, pol)
    # geometric termination with probability 1 - gamma makes the plain sum unbiased
    E = 100_000
    s = rng.choice(2, size=E, p=m.init)
    total = np.zeros((E, 2))
    live = np.ones(E, dtype=bool)
    while live.any():
        a = (rng.random(E) >= pol[s, 0]).astype(int)
        total[live] += m.rewards[:, s[live], a[live]].T
        nxt = (rng.random(E) >= m.transitions[s, a, 0]).astype(int)
        live &= rng.random(E) < m.gamma
        s = nxt
    np.testing.assert_allclose(total.mean(axis=0), exact, atol=1e-2)


def test_em_with_k_equal_n_finds_individual_optima():
    m = random_instance(np.random.default_rng(3), 4, 2, 3)
    res = em_solve(m, np.eye(3))
    assert res.converged and res.iterations == 1
    for i in range(3):
        best = optimal_policy(m, m.rewards[i])
        assert start_values(m, res.policies[i])[i] == pytest.approx(start_values(m, best)[i], abs=1e-9)


def test_em_with_one_policy_maximises_the_average():
    m = one_state([[3.0, 0.0], [0.0, 2.0]])
    res = em_solve(m, np.ones((2, 1)))
    np.testing.assert_array_equal(res.policies[0], [[1, 0]])


def test_em_on_a_tiny_instance_is_globally_or_locally_optimal():
    m = random_instance(np.random.default_rng(4), 3, 2, 4)
    res = em_solve(m, one_hot([0, 1, 0, 1], 2))
    best, _ = exhaustive_optimum(m, 2)
    sw = welfare(m, res.alpha, res.policies)
    # a fixed point is at least optimal against its own policies: no agent gains by switching
    vt = value_table(m, res.policies)
    assert np.all((res.alpha * vt).sum(axis=1) >= vt.max(axis=1) - 1e-12)
    kind = "global" if sw >= best - 1e-9 else ("local" if not single_move_improves(m, res.alpha) else "em-local")
    print(f"tiny instance: em {sw:.6f} exhaustive {best:.6f} ({kind})")
    assert sw <= best + 1e-9


def test_em_requires_mass_on_every_representative():
    m = random_instance(np.random.default_rng(0), 3, 2, 3)
    with pytest.raises(ContractViolation):
        em_solve(m, one_hot([0, 0, 0], 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["worst", "random"]))
def test_em_trace_is_monotone_and_terminates_at_a_fixed_point(seed, repair):
    rng = np.random.default_rng(seed)
    S, A = rng.integers(1, 7), rng.integers(1, 4)
    n = int(rng.integers(2, 9))
    k = int(rng.integers(2, min(3, n) + 1))
    m = random_instance(rng, S, A, n)
    init = one_hot(np.concatenate([np.arange(k), rng.integers(0, k, n - k)]), k)
    res = em_solve(m, init, repair=repair, rng=rng)
    assert trace_is_monotone(res.sw_trace)
    assert res.converged and res.iterations <= 50
    if repair == "worst":
        assert is_fixed_point(m, res)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_weighted_values_are_linear_in_the_assignment(seed):
    rng = np.random.default_rng(seed)
    m = random_instance(rng, 5, 3, 4)
    pol = rng.dirichlet(np.ones(3), size=5)
    alpha = rng.random(4)
    lhs = policy_values(m, pol, weighted_reward(m, alpha))
    rhs = alpha @ policy_values(m, pol, m.rewards)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_finite_horizon_backward_induction():
    m = one_state([[1.0, 2.0]], gamma=0.5)
    m.horizon = 3
    pols = optimal_policy(m, m.rewards[0])
    assert pols.shape == (3, 1, 2)
    assert start_values(m, pols)[0] == pytest.approx(2 * (1 + 0.5 + 0.25))
    res = em_solve(TabularRMdp(m.transitions, m.init, np.concatenate([m.rewards, m.rewards[:, :, ::-1]]),
                               0.5, 3), np.eye(2))
    assert value_table(m, res.policies).shape == (1, 2)


def test_instance_validation():
    with pytest.raises(InvalidArgument):
        TabularRMdp(np.full((1, 1, 1), 0.5), [1.0], np.zeros((1, 1, 1)))
    with pytest.raises(InvalidArgument):
        one_state([[1.0]], gamma=1.0)


def test_instance_round_trip(tmp_path):
    m = random_instance(np.random.default_rng(8), 3, 2, 2, gamma=0.8)
    path = tmp_path / "inst.txt"
    save_instance(path, m)
    back = load_instance(path)
    np.testing.assert_array_equal(back.transitions, m.transitions)
    np.testing.assert_array_equal(back.rewards, m.rewards)
    assert back.gamma == m.gamma and back.horizon is None


def test_instance_errors_carry_line_numbers():
    text = format_instance(random_instance(np.random.default_rng(8), 2, 2, 1)).splitlines()
    bad = list(text)
    bad[6] = "0.5 0.5 0.1"  # the init row
    with pytest.raises(InstanceFormatError, match=r"bad\.txt:7:"):
        parse_instance("\n".join(bad), "bad.txt")
    bad = list(text)
    bad[6] = "0.5 oops"
    with pytest.raises(InstanceFormatError, match=r":7:"):
        parse_instance("\n".join(bad))
    with pytest.raises(InstanceFormatError, match="missing 'rewards'"):
        parse_instance("\n".join(text[:text.index("rewards")]))
    with pytest.raises(InstanceFormatError):
        parse_instance("states 2\n")
