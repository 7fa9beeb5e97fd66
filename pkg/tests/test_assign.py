import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rmdp.assign import (AssignmentCsvError, AssignmentLogits, QTable, e_step, format_assignment_csv,
                         initial_hard_assignment, read_assignment_csv, soft_alpha, soft_logits_grad,
                         write_assignment_csv)
from rmdp.core import InvalidArgument, is_hard

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_q_update_examples():
    q = QTable(1, 1)
    q.q[0, 0] = 50.0
    q.update(0, 0, 70.0)
    assert q.q[0, 0] == pytest.approx(51.0)
    full = QTable(1, 1, mixing=1.0).update(0, 0, 12.5)
    assert full.q[0, 0] == 12.5
    half = QTable(1, 1, mixing=0.5)
    for _ in range(3):
        half.update(0, 0, 10.0)
    assert half.q[0, 0] == pytest.approx(8.75)


def test_q_mixing_range():
    with pytest.raises(InvalidArgument):
        QTable(2, 2, mixing=0.0)
    with pytest.raises(InvalidArgument):
        QTable(2, 2).update(0, 0, float("nan"))


@given(finite, finite, st.floats(0.01, 1.0))
def test_q_update_contracts_toward_the_return(q0, r, lam):
    q = QTable(1, 1, mixing=lam)
    q.q[0, 0] = q0
    q.update(0, 0, r)
    assert abs(q.q[0, 0] - r) == pytest.approx((1 - lam) * abs(q0 - r), abs=1e-9)


@settings(deadline=None)
@given(arrays(np.float64, (6, 3), elements=finite), st.floats(0.05, 1.0))
def test_batched_episode_update_equals_sequential(returns, lam):
    a, b = QTable(3, 2, lam), QTable(3, 2, lam)
    a.q[:] = b.q[:] = 7.0
    a.update_episodes(1, returns.reshape(-1, 3))
    for r in returns.reshape(-1, 3):
        b.update(slice(None), 1, r)
    np.testing.assert_allclose(a.q, b.q, rtol=1e-10, atol=1e-9)


def test_e_step_examples():
    np.testing.assert_array_equal(e_step([[10, 30, 20]]), [[0, 1, 0]])
    np.testing.assert_array_equal(e_step([[30, 30, 10]]), [[1, 0, 0]])
    np.testing.assert_array_equal(e_step([[1, 2], [5, 0], [3, 3]]), [[0, 1], [1, 0], [1, 0]])


@given(arrays(np.float64, (4, 3), elements=st.integers(-50, 50).map(float)), finite, st.floats(0.1, 10))
def test_e_step_is_invariant_to_row_shift_and_scale(q, shift, scale):
    moved = q * scale + shift
    np.testing.assert_array_equal(e_step(q), e_step(moved))


def test_soft_alpha_examples():
    np.testing.assert_allclose(soft_alpha([[0.0, 0.0, 0.0]]), [[1 / 3] * 3])
    assert soft_alpha([[50.0, 0.0, 0.0]])[0, 0] > 1 - 1e-12
    e = np.e
    np.testing.assert_allclose(soft_alpha([[1.0, 0.0]]), [[e / (e + 1), 1 / (e + 1)]])


@given(arrays(np.float64, (5, 4), elements=st.floats(-700, 700)))
def test_soft_alpha_rows_sum_to_one(psi):
    a = soft_alpha(psi)
    assert np.all(np.isfinite(a)) and np.all(a >= 0)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)


def test_logits_gradient_zero_for_zero_advantage():
    assert not soft_logits_grad(np.zeros((3, 2)), np.ones((2, 4)), np.zeros((2, 4, 3))).any()


def test_logits_gradient_sign():
    adv = np.zeros((2, 1, 1))
    adv[0, 0, 0], adv[1, 0, 0] = 1.0, -1.0
    g = soft_logits_grad(np.zeros((1, 2)), np.ones((2, 1)), adv)
    # gradient descent raises logit 0 and lowers logit 1
    assert g[0, 0] < 0 < g[0, 1]


def test_logits_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    psi = rng.normal(size=(1, 2))
    ratios = np.ones((2, 1))
    adv = rng.normal(size=(2, 1, 1))

    def loss(p):
        return -np.einsum("kt,kti,ik->", ratios, adv, soft_alpha(p))

    g = soft_logits_grad(psi, ratios, adv)
    num = np.zeros_like(psi)
    for idx in np.ndindex(psi.shape):
        d = np.zeros_like(psi)
        d[idx] = 1e-6
        num[idx] = (loss(psi + d) - loss(psi - d)) / 2e-6
    np.testing.assert_allclose(g, num, atol=1e-8)


def test_logits_converge_to_best_representative():
    # ten update rounds of 2048/64 minibatches x 10 epochs
    logits = AssignmentLogits(1, 3)
    adv = np.zeros((3, 8, 1))
    adv[:, :, 0] = np.array([0.2, 1.0, -0.5])[:, None]
    for _ in range(10 * 320):
        logits.step(np.ones((3, 8)), adv)
    assert logits.alpha[0, 1] > 0.99
    np.testing.assert_allclose(logits.alpha.sum(axis=1), 1.0)


@settings(deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_initial_assignment_covers_every_representative(k, seed):
    n = k + seed % 20
    a = initial_hard_assignment(n, k, np.random.default_rng(seed))
    assert is_hard(a) and a.shape == (n, k)
    assert np.all(a.sum(axis=0) >= 1)


def test_initial_assignment_needs_enough_agents():
    with pytest.raises(InvalidArgument):
        initial_hard_assignment(2, 3, np.random.default_rng(0))


def test_assignment_csv_round_trip(tmp_path):
    alpha = soft_alpha(np.random.default_rng(1).normal(size=(6, 3)))
    path = tmp_path / "a.csv"
    write_assignment_csv(path, alpha, header_comment="config_hash=abc")
    assert path.read_text().startswith("# config_hash=abc\n")
    np.testing.assert_allclose(read_assignment_csv(path), alpha, rtol=1e-8)
    assert format_assignment_csv([[1.0, 0.0]]) == "1,0\n"


def test_assignment_csv_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,0\n0,1,0\n")
    with pytest.raises(AssignmentCsvError, match=":2:"):
        read_assignment_csv(path)
    path.write_text("# only a comment\n")
    with pytest.raises(AssignmentCsvError):
        read_assignment_csv(path)
    path.write_text("1,x\n")
    with pytest.raises(AssignmentCsvError, match=":1:"):
        read_assignment_csv(path)
