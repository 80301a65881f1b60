import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopman_mpc.qp import (
    INFEASIBLE,
    MAX_ITERS,
    OPTIMAL,
    QpProblem,
    QpSettings,
    QpSolver,
    kkt_residuals,
    solve,
)

from .oracles import qp_oracle, random_qp


def test_unconstrained():
    s = solve(QpProblem(np.eye(2), [-1.0, -2.0], np.zeros((0, 2)), []))
    assert s.status == OPTIMAL
    assert np.allclose(s.w, [1.0, 2.0], atol=1e-9)


def test_scalar_active_bound():
    s = solve(QpProblem([[1.0]], [0.0], [[1.0]], [-3.0]))
    assert s.status == OPTIMAL and s.w[0] == pytest.approx(-3.0, abs=1e-8)


def test_equality_via_opposite_rows():
    # w0 + w1 <= 1 and -(w0 + w1) <= -1 pin the sum
    G = np.array([[1.0, 1.0], [-1.0, -1.0]])
    s = solve(QpProblem(np.eye(2), [0.0, 0.0], G, [1.0, -1.0]))
    assert np.allclose(s.w, [0.5, 0.5], atol=1e-8)


def test_duplicate_rows():
    G = np.array([[1.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
    s = solve(QpProblem(np.eye(2), [-5.0, 0.0], G, [1.0, 4.0, 2.0]))
    assert s.w[0] == pytest.approx(1.0, abs=1e-8)


def test_infeasible_reported():
    G = np.array([[1.0], [-1.0]])
    s = solve(QpProblem([[1.0]], [0.0], G, [-1.0, -1.0]))  # w <= -1 and w >= 1
    assert s.status == INFEASIBLE


def test_max_iters_reported():
    rng = np.random.default_rng(1)
    H, f, G, h = random_qp(rng, 8, 16)
    s = solve(QpProblem(H, f, G, h), QpSettings(max_iters=1, polish=False))
    assert s.status in (MAX_ITERS, OPTIMAL) and s.iterations <= 1


def test_problem_validation():
    with pytest.raises(ValueError):
        QpProblem(np.eye(3), np.zeros(2), np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        QpProblem([[1.0, 2.0], [0.0, 1.0]], [0, 0], np.zeros((0, 2)), []).check()
    with pytest.raises(ValueError):
        QpProblem(-np.eye(2), [0, 0], np.zeros((0, 2)), []).check()


def test_kkt_residual_definitions():
    p = QpProblem(np.eye(2), [-1.0, -2.0], [[1.0, 0.0]], [5.0])
    assert max(kkt_residuals(p, [1.0, 2.0], [0.0])) <= 1e-10
    primal, _, _ = kkt_residuals(p, [5.5, 0.0], [0.0])
    assert primal >= 0.5


@pytest.mark.parametrize("seed", range(15))
def test_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    H, f, G, h = random_qp(rng, 6, 10)
    w_o, mu_o = qp_oracle(H, f, G, h)
    p = QpProblem(H, f, G, h)
    assert max(kkt_residuals(p, w_o, mu_o)) <= 1e-6
    s = solve(p)
    assert s.status == OPTIMAL
    assert np.abs(s.w - w_o).max() <= 1e-5
    assert max(kkt_residuals(p, s.w, s.multipliers)) <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_objective_beats_feasible_grid(seed):
    rng = np.random.default_rng(50 + seed)
    p = QpProblem(*random_qp(rng, 2, 6))
    s = solve(p)
    assert s.status == OPTIMAL
    axis = np.linspace(-3, 3, 61)
    for pt in itertools.product(axis, repeat=p.n):
        pt = np.array(pt)
        if np.all(p.G @ pt <= p.h):
            assert p.objective(s.w) <= p.objective(pt) + 1e-6


def test_deterministic():
    rng = np.random.default_rng(7)
    p = QpProblem(*random_qp(rng))
    a, b = solve(p), solve(p)
    assert a.iterations == b.iterations and np.array_equal(a.w, b.w)


@given(st.integers(0, 10 ** 6), st.floats(1e-3, 1e3))
@settings(max_examples=20, deadline=None)
def test_scaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    H, f, G, h = random_qp(rng, 6, 10)
    a = solve(QpProblem(H, f, G, h))
    b = solve(QpProblem(c * H, c * f, c * G, c * h))
    assert a.status == b.status == OPTIMAL
    assert np.abs(a.w - b.w).max() <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_warm_start_same_solution(seed):
    rng = np.random.default_rng(200 + seed)
    H, f, G, h = random_qp(rng, 8, 16)
    p = QpProblem(H, f, G, h)
    cold = solve(p)
    # warm from the solution of a slightly different problem
    q = QpProblem(H, f + 0.05 * rng.normal(size=f.size), G, h)
    prev = solve(q)
    warm = solve(p, warm=(prev.w, None, prev.row_duals))
    assert warm.status == OPTIMAL
    assert np.abs(warm.w - cold.w).max() <= 1e-5


def test_solver_instance_keeps_last():
    solver = QpSolver()
    s = solver.solve(QpProblem(np.eye(1), [1.0], np.zeros((0, 1)), []))
    assert solver.last is s
