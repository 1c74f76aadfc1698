import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mctsgait import qp_core as qp
from oracles import enumerate_qp, random_qp

METHODS = ("admm", "active_set")


def problem(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None):
    n = len(g)
    z = np.zeros((0, n))
    return qp.QpProblem(H, g, z if A_eq is None else A_eq, np.zeros(0) if b_eq is None else b_eq,
                        z if A_in is None else A_in, np.zeros(0) if b_in is None else b_in)


@pytest.mark.parametrize("method", METHODS)
def test_unconstrained_minimum(method):
    sol = qp.solve(problem(np.eye(2), [-1.0, -2.0]), method=method)
    assert sol.status == "optimal"
    assert np.allclose(sol.x_star, [1.0, 2.0], atol=1e-8)
    assert sol.objective == pytest.approx(-2.5, abs=1e-8)


@pytest.mark.parametrize("method", METHODS)
def test_active_box_face(method):
    # (x-2)^2 = x^2 - 4x + 4 -> H = 2, g = -4
    sol = qp.solve(problem(np.array([[2.0]]), [-4.0], A_in=np.array([[1.0]]), b_in=np.array([1.0])), method=method)
    assert sol.x_star[0] == pytest.approx(1.0, abs=1e-7)
    assert sol.y_in[0] == pytest.approx(2.0, abs=1e-6)


@pytest.mark.parametrize("method", METHODS)
def test_matches_active_set_enumeration(method):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        H, g, A_eq, b_eq, A_in, b_in = random_qp(rng)
        x_ref = enumerate_qp(H, g, A_eq, b_eq, A_in, b_in)[0]
        sol = qp.solve(qp.QpProblem(H, g, A_eq, b_eq, A_in, b_in), method=method)
        assert sol.status == "optimal"
        worst = max(worst, np.max(np.abs(sol.x_star - x_ref)))
    assert worst <= 1e-6


def test_kkt_residual_examples():
    P = problem(np.eye(2), [-1.0, -2.0])
    assert qp.kkt_residual(P, [1.0, 2.0], (np.zeros(0), np.zeros(0))) == (0.0, 0.0, 0.0)
    assert qp.kkt_residual(P, [1.001, 2.001], (np.zeros(0), np.zeros(0)))[1] > 0


def test_oracle_solutions_have_tiny_residuals():
    rng = np.random.default_rng(1)
    for _ in range(50):
        data = random_qp(rng)
        x, nu, lam = enumerate_qp(*data)
        res = qp.kkt_residual(qp.QpProblem(*data), x, (nu, lam))
        assert max(res) <= 1e-9


def test_negative_multiplier_is_dual_infeasible():
    P = problem(np.eye(1), [0.0], A_in=np.array([[1.0]]), b_in=np.array([0.0]))
    assert qp.kkt_residual(P, [0.0], (np.zeros(0), np.array([-1.0])))[1] >= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.randoms(use_true_random=False))
def test_objective_invariant_under_row_permutation(seed, rnd):
    rng = np.random.default_rng(seed)
    H, g, A_eq, b_eq, A_in, b_in = random_qp(rng, q=int(rng.integers(1, 9)))
    perm = list(range(len(b_in)))
    rnd.shuffle(perm)
    a = qp.solve(qp.QpProblem(H, g, A_eq, b_eq, A_in, b_in))
    b = qp.solve(qp.QpProblem(H, g, A_eq, b_eq, A_in[perm], b_in[perm]))
    assert abs(a.objective - b.objective) <= 1e-8 * max(1.0, abs(a.objective))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_scaling_cost_scales_objective(seed, s):
    P = qp.QpProblem(*random_qp(np.random.default_rng(seed)))
    a = qp.solve(P, method="active_set")
    b = qp.solve(P.scaled(s), method="active_set")
    assert np.max(np.abs(a.x_star - b.x_star)) <= 1e-8
    assert abs(b.objective - s * a.objective) <= 1e-8 * max(1.0, abs(s * a.objective))


def test_warm_start_is_not_slower():
    rng = np.random.default_rng(2)
    for _ in range(20):
        P = qp.QpProblem(*random_qp(rng, n=6, q=8))
        cold = qp.solve(P)
        warm = qp.solve(P, warm_start=cold)
        assert np.max(np.abs(warm.x_star - cold.x_star)) <= 1e-6
        assert warm.iterations <= cold.iterations


def test_inconsistent_equalities_are_infeasible():
    P = problem(np.eye(2), [0.0, 0.0], A_eq=np.array([[1.0, 0.0], [1.0, 0.0]]), b_eq=np.array([0.0, 1.0]))
    for method in METHODS:
        assert qp.solve(P, method=method).status == "infeasible"


def test_iteration_cap_reports_max_iter():
    rng = np.random.default_rng(3)
    P = qp.QpProblem(*random_qp(rng, n=6, q=8))
    sol = qp.solve(P, tol=1e-12, max_iter=1)
    assert sol.status == "max_iter"
    assert np.all(np.isfinite(sol.x_star))


def test_deterministic_and_objective_consistent():
    P = qp.QpProblem(*random_qp(np.random.default_rng(4), n=5, q=6))
    a, b = qp.solve(P), qp.solve(P)
    assert np.array_equal(a.x_star, b.x_star)
    assert a.objective == P.objective(a.x_star)


def test_validation():
    with pytest.raises(qp.QpValidationError):
        problem(np.array([[1.0, 2.0], [0.0, 1.0]]), [0.0, 0.0])
    with pytest.raises(qp.QpValidationError):
        qp.QpProblem(np.eye(2), [0, 0], np.zeros((1, 2)), np.zeros(2), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(qp.QpValidationError):
        qp.solve(problem(np.eye(1), [0.0]), tol=0.0)


def test_dump_round_trip(tmp_path):
    P = qp.QpProblem(*random_qp(np.random.default_rng(5), n=4, p=1, q=3))
    P.dump(tmp_path / "p.txt")
    Q = qp.QpProblem.load(tmp_path / "p.txt")
    for name in ("H", "g", "A_eq", "b_eq", "A_in", "b_in"):
        assert np.array_equal(getattr(P, name), getattr(Q, name))
