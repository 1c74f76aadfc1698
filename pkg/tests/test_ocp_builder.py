import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mctsgait import ocp_builder as ob
from mctsgait import qp_core as qp
from mctsgait import srb_dynamics as srb
from oracles import enumerate_qp, rollout_objective

P = srb.InertiaParams()
FR = ob.FrictionParams()
FEET = np.column_stack([ob.DEFAULT_HIPS, np.zeros(4)])
STAND = srb.SrbState.standing(0.35).as_vector()


def mirror_state(x):
    return np.asarray(x) * np.array([1, -1, 1, 1, -1, 1, -1, 1, -1, -1, 1, -1])


def mirror_feet(feet):
    return np.asarray(feet)[[1, 0, 3, 2]] * np.array([1, -1, 1])


def test_reference_for_zero_command_is_static():
    x0 = STAND.copy()
    x0[3:6] = [0.1, -0.2, 0.05]
    ref = ob.build_reference(x0, ob.VelocityCommand(target_height=0.35), 5, 0.04)
    expected = STAND.copy()
    assert np.allclose(ref.states, np.tile(expected, (6, 1)), atol=1e-15)


def test_reference_advances_by_velocity_times_step():
    ref = ob.build_reference(STAND, ob.VelocityCommand(vx=0.3), 2, 0.04)
    assert np.allclose(np.diff(ref.states[:, 0]), 0.012, atol=1e-15)


def test_reference_yaw_rate_against_fine_integration():
    x0 = STAND.copy()
    x0[8] = 0.3
    cmd = ob.VelocityCommand(vx=0.4, vy=0.1, yaw_rate=0.5)
    ref = ob.build_reference(x0, cmd, 10, 0.04)
    assert ref.states[-1, 8] == pytest.approx(0.3 + 0.2, abs=1e-14)
    # fine-step midpoint integration of the heading-rotated body velocity
    n = 40_000
    dt = 0.4 / n
    p = x0[:2].copy()
    for k in range(n):
        yaw = 0.3 + 0.5 * (k + 0.5) * dt
        p += dt * np.array([np.cos(yaw) * 0.4 - np.sin(yaw) * 0.1, np.sin(yaw) * 0.4 + np.cos(yaw) * 0.1])
    assert np.allclose(ref.states[-1, :2], p, atol=1e-9)


def test_reference_forces_share_weight_over_stance_legs():
    sched = np.array([[1, 1, 1, 1], [1, 0, 0, 1], [0, 1, 1, 1]])
    ref = ob.build_reference(STAND, ob.VelocityCommand(), 3, 0.04, P, sched)
    f = ref.forces.reshape(3, 4, 3)
    assert np.allclose(f[:, :, 2].sum(axis=1), P.m * 9.81)
    assert np.all(f[sched == 0] == 0.0)


def test_raibert_examples():
    assert np.allclose(ob.raibert_foothold([0.2, 0.1], [0, 0], [0, 0], 0.4), [0.2, 0.1, 0.0])
    off = ob.raibert_foothold([0, 0], [0.3, 0], [0.3, 0], 0.4286)
    assert np.allclose(off[:2], [0.06429, 0.0], atol=1e-5)
    extra = ob.raibert_foothold([0, 0], [0.5, 0], [0, 0], 0.4, k_v=0.03)
    assert np.allclose(extra[:2], [0.5 * 0.2 + 0.015, 0.0], atol=1e-15)
    with pytest.raises(srb.ValidationError):
        ob.raibert_foothold([0, 0], [0, 0], [0, 0], 0.0)


def test_pure_regularization_optimum_is_reference_force():
    w = ob.OcpWeights(Q_x=np.zeros(12), R_u=np.ones(12), N=1)
    sched = np.ones((1, 4))
    ref = ob.build_reference(STAND, ob.VelocityCommand(), 1, w.h, P, sched)
    ocp = ob.build_ocp(sched, ref, STAND, FEET, P, w, FR)
    sol = qp.solve(ocp.qp, method="active_set")
    assert np.allclose(sol.x_star, ref.forces[0], atol=1e-9)


def test_swing_leg_forces_pinned_by_equalities():
    w = ob.OcpWeights(N=2)
    sched = np.array([[1, 0, 1, 1], [1, 1, 1, 1]])
    ref = ob.build_reference(STAND, ob.VelocityCommand(), 2, w.h, P, sched)
    ocp = ob.build_ocp(sched, ref, STAND, FEET, P, w, FR)
    assert ocp.qp.A_eq.shape[0] == 3
    pinned = {int(np.flatnonzero(row)[0]) for row in ocp.qp.A_eq}
    assert pinned == {3, 4, 5}
    assert ocp.qp.A_in.shape[0] == 6 * 7


def random_instance(rng, N=2):
    x0 = STAND + np.concatenate([rng.normal(0, 0.02, 3), rng.normal(0, 0.2, 3), rng.normal(0, 0.05, 3),
                                 rng.normal(0, 0.2, 3)])
    sched = rng.integers(0, 2, (N, 4))
    sched[:, 0] = 1
    feet = FEET + rng.normal(0, 0.02, (4, 3))
    cmd = ob.VelocityCommand(vx=rng.uniform(-0.5, 0.5), vy=rng.uniform(-0.2, 0.2), yaw_rate=rng.uniform(-0.5, 0.5))
    return x0, sched, feet, cmd


def test_condensed_objective_equals_explicit_rollout():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x0, sched, feet, cmd = random_instance(rng)
        w = ob.OcpWeights(R_u=rng.uniform(1e-4, 1e-2, 12), N=2)
        ref = ob.build_reference(x0, cmd, 2, w.h, P, sched)
        ocp = ob.build_ocp(sched, ref, x0, feet, P, w, FR)
        A, B, c = ob.linearized_model(sched, ref, x0, np.broadcast_to(feet, (2, 4, 3)), P, w.h)
        u = rng.normal(0, 30, 24)
        oracle = rollout_objective(x0, ref.states, ref.forces.reshape(2, 12), u.reshape(2, 12),
                                   w.Q_x, w.R_u, w.h, A, B, c)
        assert abs(ocp.cost(u) - oracle) <= 1e-8 * abs(oracle)


def test_rollout_cost_matches_oracle_solution():
    rng = np.random.default_rng(7)
    w = ob.OcpWeights(N=2)
    x0 = STAND.copy()
    x0[4] = 0.2
    sched = np.array([[1, 0, 1, 1], [1, 0, 1, 1]])
    cmd = ob.VelocityCommand(vx=0.3)
    res = ob.rollout_cost(sched, x0, FEET, cmd, P, w, FR)
    ref = ob.build_reference(x0, cmd, 2, w.h, P, sched)
    feet_steps = ob.plan_footholds(sched, FEET, np.ones(4), x0, ref, w.h)
    ocp = ob.build_ocp(sched, ref, x0, feet_steps, P, w, FR)
    x, _, _ = enumerate_qp(ocp.qp.H, ocp.qp.g, ocp.qp.A_eq, ocp.qp.b_eq, ocp.qp.A_in, ocp.qp.b_in, max_active=4)
    A, B, c = ob.linearized_model(sched, ref, x0, feet_steps, P, w.h)
    oracle = rollout_objective(x0, ref.states, ref.forces.reshape(2, 12), x.reshape(2, 12), w.Q_x, w.R_u, w.h, A, B, c)
    assert res.status == "optimal"
    assert res.p_tilde == pytest.approx(oracle, abs=1e-6)
    del rng


def test_equilibrium_rollout_cost_is_tiny():
    res = ob.rollout_cost(np.ones((16, 4)), STAND, FEET, ob.VelocityCommand(), P, ob.OcpWeights(), FR)
    assert res.status == "optimal" and res.p_tilde <= 1e-6


def test_all_swing_costs_more_than_all_stance():
    w = ob.OcpWeights()
    stance = ob.rollout_cost(np.ones((16, 4)), STAND, FEET, ob.VelocityCommand(), P, w, FR)
    swing = ob.rollout_cost(np.zeros((16, 4)), STAND, FEET, ob.VelocityCommand(), P, w, FR)
    assert swing.p_tilde > stance.p_tilde and swing.p_tilde > 1.0


def test_failed_solve_is_penalized(monkeypatch):
    w = ob.OcpWeights(N=4)
    stand = ob.rollout_cost(np.ones((4, 4)), STAND, FEET, ob.VelocityCommand(vx=0.2), P, w, FR).p_tilde
    real = ob.solve

    def flaky(problem, **kw):
        sol = real(problem, **kw)
        if problem.n < 48:  # only the schedule with a swing leg fails
            sol.status = "infeasible"
        return sol

    monkeypatch.setattr(ob, "solve", flaky)
    sched = np.ones((4, 4))
    sched[1, 2] = 0
    res = ob.rollout_cost(sched, STAND, FEET, ob.VelocityCommand(vx=0.2), P, w, FR)
    assert res.status == "penalized"
    assert res.p_tilde == pytest.approx(ob.PENALTY_FACTOR * (1.0 + stand), rel=1e-12)


def test_mirrored_instance_has_equal_cost():
    rng = np.random.default_rng(3)
    w = ob.OcpWeights(N=8)
    fh = ob.FootholdConfig(reach_weight=2e3)
    for _ in range(10):
        x0, _, feet, cmd = random_instance(rng)
        sched = rng.integers(0, 2, (8, 4))
        a = ob.rollout_cost(sched, x0, feet, cmd, P, w, FR, footholds=fh)
        b = ob.rollout_cost(sched[:, [1, 0, 3, 2]], mirror_state(x0), mirror_feet(feet), cmd.mirrored(), P, w, FR,
                            footholds=fh.mirrored())
        assert b.p_tilde == pytest.approx(a.p_tilde, rel=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_weight_scaling_scales_cost(seed, s):
    rng = np.random.default_rng(seed)
    x0, _, feet, cmd = random_instance(rng)
    sched = np.ones((6, 4))
    sched[2:4, 1] = 0
    w = ob.OcpWeights(N=6)
    a = ob.rollout_cost(sched, x0, feet, cmd, P, w, FR)
    b = ob.rollout_cost(sched, x0, feet, cmd, P, w.scaled(s), FR)
    assert abs(b.p_tilde - s * a.p_tilde) <= 1e-8 * max(1.0, s * a.p_tilde)
    assert np.allclose(a.forces, b.forces, atol=1e-6)


def test_optimal_forces_respect_friction_pyramid():
    rng = np.random.default_rng(5)
    w = ob.OcpWeights()
    for _ in range(10):
        x0, _, feet, cmd = random_instance(rng)
        sched = rng.integers(0, 2, (16, 4))
        sched[:, 0] = 1
        res = ob.rollout_cost(sched, x0, feet, cmd, P, w, FR)
        if res.status != "optimal":
            continue
        f = res.forces.reshape(16, 4, 3)
        fz = f[..., 2]
        on = sched.astype(bool)
        tol = 1e-6
        assert np.all(fz[on] >= FR.f_z_min - tol) and np.all(fz[on] <= 2 * P.weight + tol)
        assert np.all(np.abs(f[..., 0][on]) <= FR.mu * fz[on] + tol)
        assert np.all(np.abs(f[..., 1][on]) <= FR.mu * fz[on] + tol)
        assert np.all(f[~on] == 0.0)


def test_reach_penalty_hand_value():
    sched = np.ones((1, 4))
    ref = ob.build_reference(STAND, ob.VelocityCommand(), 1, 0.04, P, sched)
    feet = np.broadcast_to(FEET, (1, 4, 3)).copy()
    feet[0, 0, 0] += 0.25  # LF foot 0.25 m ahead of its hip, 0.10 beyond reach
    fh = ob.FootholdConfig(reach_weight=100.0, max_reach=0.15)
    assert ob.reach_cost(sched, feet, ref, 0.04, fh) == pytest.approx(100.0 * 0.04 * 0.1 ** 2, rel=1e-12)
    assert ob.reach_cost(sched, feet, ref, 0.04, ob.FootholdConfig()) == 0.0


def test_validation():
    with pytest.raises(srb.ValidationError):
        ob.OcpWeights(N=0)
    with pytest.raises(srb.ValidationError):
        ob.OcpWeights(Q_x=-np.ones(12))
    w = ob.OcpWeights(N=3)
    ref = ob.build_reference(STAND, ob.VelocityCommand(), 3, w.h)
    with pytest.raises(srb.ValidationError):
        ob.build_ocp(np.ones((2, 4)), ref, STAND, FEET, P, w, FR)
    with pytest.raises(srb.ValidationError):
        ob.build_ocp(np.ones((3, 4)), ref, STAND, FEET, P, w, ob.FrictionParams(mu=0.0))
