"""Condensed MPC rollout: reference generation, footholds, QP assembly, cost.

The OCP is the quadratic tracking problem

    P = sum_{k=0}^{N} (|x_k - x_ref_k|^2_Q + |u_k - u_ref_k|^2_R) * h

(the control term stops at N-1) subject to the explicit-Euler linearization
of the SRB dynamics and a friction pyramid per stance foot.  States are
condensed out, so the QP decision vector is the stacked forces u_0..u_{N-1}.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import srb_dynamics as srb
from .qp_core import QpProblem, solve
from .srb_dynamics import NU, NX, N_LEGS, InertiaParams, ValidationError

PENALTY_FACTOR = 1e6

# hip offsets in the trunk frame (x, y), legs ordered LF, RF, LH, RH
DEFAULT_HIPS = np.array([[0.24, 0.13], [0.24, -0.13], [-0.24, 0.13], [-0.24, -0.13]])


def default_q() -> np.ndarray:
    return np.array([0, 0, 1500, 200, 200, 200, 500, 500, 200, 20, 20, 20], dtype=float)


@dataclass
class OcpWeights:
    Q_x: np.ndarray = field(default_factory=default_q)
    R_u: np.ndarray = field(default_factory=lambda: np.full(NU, 1e-4))
    h: float = 0.04
    N: int = 16

    def __post_init__(self):
        self.Q_x = np.asarray(self.Q_x, dtype=float).reshape(NX)
        self.R_u = np.asarray(self.R_u, dtype=float).reshape(NU)
        if np.any(self.Q_x < 0) or np.any(self.R_u < 0):
            raise ValidationError("weights must be non-negative")
        if not self.h > 0:
            raise ValidationError("MPC step h must be positive")
        if int(self.N) < 1:
            raise ValidationError("horizon N must be at least 1")
        self.N = int(self.N)

    def scaled(self, s: float) -> "OcpWeights":
        return OcpWeights(self.Q_x * s, self.R_u * s, self.h, self.N)


@dataclass
class FrictionParams:
    mu: float = 0.5
    f_z_min: float = 5.0
    f_z_max: float | None = None  # None -> 2 m g

    def resolved_max(self, params: InertiaParams) -> float:
        return 2.0 * params.weight if self.f_z_max is None else float(self.f_z_max)

    def validate(self, params: InertiaParams) -> None:
        if not self.mu > 0:
            raise ValidationError("friction coefficient must be positive")
        if not 0 <= self.f_z_min < self.resolved_max(params):
            raise ValidationError("need 0 <= f_z_min < f_z_max")


@dataclass
class VelocityCommand:
    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0
    target_height: float = 0.35

    def mirrored(self) -> "VelocityCommand":
        return VelocityCommand(self.vx, -self.vy, -self.yaw_rate, self.target_height)


@dataclass(frozen=True)
class Terrain:
    """Flat ground (slope 0) or a plane inclined by ``slope`` rad along world x."""

    slope: float = 0.0

    def height(self, x, y=0.0):
        return np.tan(self.slope) * np.asarray(x, dtype=float)

    def frame(self) -> np.ndarray:
        """Columns: tangent t1, tangent t2, normal n (world frame)."""
        s, c = np.sin(self.slope), np.cos(self.slope)
        return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])

    def aligned_attitude(self, yaw: float) -> tuple[float, float]:
        """Roll and pitch that align the trunk z-axis with the ground normal."""
        st, ct = np.sin(self.slope), np.cos(self.slope)
        roll = -np.arcsin(st * np.sin(yaw))
        pitch = np.arctan2(-st * np.cos(yaw), ct)
        return float(roll), float(pitch)


@dataclass
class FootholdConfig:
    """Foothold heuristic settings and the optional leg-reach penalty.

    With ``reach_weight > 0`` a rollout also pays
    ``reach_weight * h * sum max(0, |foot - hip| - max_reach)^2`` over stance
    feet along the reference; the SRB model itself has no kinematic limits.
    """

    hips: np.ndarray = field(default_factory=lambda: DEFAULT_HIPS.copy())
    k_v: float = 0.03
    nominal_stance: float = 0.6 / 1.4
    max_reach: float = 0.15
    reach_weight: float = 0.0

    def mirrored(self) -> "FootholdConfig":
        hips = self.hips[[1, 0, 3, 2]] * np.array([1.0, -1.0])
        return FootholdConfig(hips, self.k_v, self.nominal_stance, self.max_reach, self.reach_weight)


@dataclass
class ReferenceTrajectory:
    states: np.ndarray  # (N+1, 12)
    forces: np.ndarray  # (N, 12)

    @property
    def N(self) -> int:
        return self.forces.shape[0]


@dataclass
class RolloutCost:
    p_tilde: float
    status: str  # "optimal" | "penalized"
    forces: np.ndarray | None = None


def gravity_forces(schedule, params: InertiaParams) -> np.ndarray:
    """Per-step reference forces: the weight shared equally by stance legs."""
    schedule = np.asarray(schedule, dtype=float).reshape(-1, N_LEGS)
    n_stance = schedule.sum(axis=1)
    fz = np.divide(params.weight, n_stance, out=np.zeros_like(n_stance), where=n_stance > 0)
    forces = np.zeros((schedule.shape[0], N_LEGS, 3))
    forces[:, :, 2] = schedule * fz[:, None]
    return forces.reshape(-1, NU)


def _planar_rot(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s], [s, c]])


def build_reference(state0, cmd: VelocityCommand, N: int, h: float, params: InertiaParams | None = None,
                    schedule=None, terrain: Terrain | None = None) -> ReferenceTrajectory:
    """Reference states/forces integrating the commanded planar twist from ``state0``.

    Position increments use the exact integral of the heading-rotated velocity
    over each step, so the result does not depend on ``h`` beyond sampling.
    """
    x0 = srb._vec(state0)
    params = params or InertiaParams()
    terrain = terrain or Terrain()
    if int(N) < 1:
        raise ValidationError("horizon N must be at least 1")
    vb = np.array([cmd.vx, cmd.vy])
    r = cmd.yaw_rate
    yaw0 = x0[8]

    states = np.zeros((N + 1, NX))
    pxy = x0[0:2].copy()
    for k in range(N + 1):
        yaw = yaw0 + r * k * h
        if k > 0:
            y_prev = yaw0 + r * (k - 1) * h
            if abs(r) > 1e-12:
                s0, s1 = np.sin(y_prev), np.sin(yaw)
                c0, c1 = np.cos(y_prev), np.cos(yaw)
                pxy = pxy + np.array([vb[0] * (s1 - s0) - vb[1] * (c0 - c1),
                                      vb[0] * (c0 - c1) + vb[1] * (s1 - s0)]) / r
            else:
                pxy = pxy + h * (_planar_rot(yaw) @ vb)
        vxy = _planar_rot(yaw) @ vb
        roll, pitch = terrain.aligned_attitude(yaw)
        slope_z = np.tan(terrain.slope)
        states[k, 0:2] = pxy
        states[k, 2] = terrain.height(pxy[0]) + cmd.target_height
        states[k, 3:5] = vxy
        states[k, 5] = slope_z * vxy[0]
        states[k, 6:9] = (roll, pitch, yaw)
        # body rates that realise yaw_rate about world z at this attitude
        cr, sr, cp, sp = np.cos(roll), np.sin(roll), np.cos(pitch), np.sin(pitch)
        states[k, 9:12] = r * np.array([-sp, sr * cp, cr * cp])

    if schedule is None:
        schedule = np.ones((N, N_LEGS))
    schedule = np.asarray(schedule).reshape(-1, N_LEGS)
    if schedule.shape[0] != N:
        raise ValidationError(f"schedule has {schedule.shape[0]} rows, expected {N}")
    return ReferenceTrajectory(states, gravity_forces(schedule, params))


def raibert_foothold(hip_ground_projection, v_meas, v_ref, stance_duration: float, k_v: float = 0.03,
                     terrain: Terrain | None = None) -> np.ndarray:
    """Foothold ``hip + v * T/2 + k_v (v - v_ref)`` projected onto the terrain."""
    if not stance_duration > 0:
        raise ValidationError("stance duration must be positive")
    hip = np.asarray(hip_ground_projection, dtype=float)[:2]
    v = np.asarray(v_meas, dtype=float)[:2]
    vr = np.asarray(v_ref, dtype=float)[:2]
    xy = hip + v * stance_duration / 2.0 + k_v * (v - vr)
    z = (terrain or Terrain()).height(xy[0])
    return np.array([xy[0], xy[1], float(z)])


def hip_positions(ref_state, hips) -> np.ndarray:
    """Ground projections (x, y) of the hips for a trunk at ``ref_state``."""
    return ref_state[0:2] + (np.asarray(hips) @ _planar_rot(ref_state[8]).T)


def plan_footholds(schedule, feet0, contacts0, state0, reference: ReferenceTrajectory, h: float,
                   footholds: FootholdConfig | None = None, terrain: Terrain | None = None) -> np.ndarray:
    """Per-step foot positions (N, 4, 3) for a contact schedule.

    Stance feet keep their position; a leg touching down at step k is placed by
    the Raibert rule using the reference hip at k and the measured velocity.
    """
    fh = footholds or FootholdConfig()
    schedule = np.asarray(schedule).reshape(-1, N_LEGS)
    N = schedule.shape[0]
    feet = np.asarray(feet0, dtype=float).reshape(N_LEGS, 3).copy()
    prev = np.asarray(contacts0).reshape(N_LEGS)
    v_meas = srb._vec(state0)[3:5]
    out = np.zeros((N, N_LEGS, 3))
    for k in range(N):
        for i in range(N_LEGS):
            if schedule[k, i] and not prev[i]:
                end = k
                while end < N and schedule[end, i]:
                    end += 1
                t_st = (end - k) * h if end < N else max((end - k) * h, fh.nominal_stance)
                hip = hip_positions(reference.states[k], fh.hips)[i]
                feet[i] = raibert_foothold(hip, v_meas, reference.states[k, 3:5], t_st, fh.k_v, terrain)
        out[k] = feet
        prev = schedule[k]
    return out


def reach_cost(schedule, feet_steps, reference: ReferenceTrajectory, h: float,
               footholds: FootholdConfig | None = None) -> float:
    """Penalty on stance feet farther than ``max_reach`` from their hip (planar)."""
    fh = footholds or FootholdConfig()
    if fh.reach_weight == 0.0:
        return 0.0
    schedule = np.asarray(schedule).reshape(-1, N_LEGS)
    total = 0.0
    for k in range(schedule.shape[0]):
        hips = hip_positions(reference.states[k + 1], fh.hips)
        for i in range(N_LEGS):
            if schedule[k, i]:
                d = np.hypot(*(feet_steps[k, i, :2] - hips[i]))
                total += max(0.0, d - fh.max_reach) ** 2
    return fh.reach_weight * h * total


def friction_rows(friction: FrictionParams, params: InertiaParams, terrain: Terrain | None = None):
    """Six pyramid rows ``C f <= d`` for one stance foot."""
    frame = (terrain or Terrain()).frame()
    t1, t2, n = frame[:, 0], frame[:, 1], frame[:, 2]
    mu = friction.mu
    C = np.array([-n, n, t1 - mu * n, -t1 - mu * n, t2 - mu * n, -t2 - mu * n])
    d = np.array([-friction.f_z_min, friction.resolved_max(params), 0.0, 0.0, 0.0, 0.0])
    return C, d


@dataclass
class CondensedOcp:
    """QP in the stacked forces plus what is needed to recover states and P."""

    qp: QpProblem
    offset: float
    x_free: np.ndarray  # (N, 12) states 1..N under zero forces
    gamma: np.ndarray  # (12N, n_var)
    var_map: np.ndarray  # indices into the full 12N force vector
    u_ref: np.ndarray  # (N, 12)
    x_ref: np.ndarray  # (N+1, 12)
    x0: np.ndarray

    def cost(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.qp.H @ u + self.qp.g @ u + self.offset)

    def full_forces(self, u) -> np.ndarray:
        full = np.zeros(self.u_ref.size)
        full[self.var_map] = u
        return full.reshape(self.u_ref.shape)

    def states(self, u) -> np.ndarray:
        return self.x_free + (self.gamma @ np.asarray(u, dtype=float)).reshape(self.x_free.shape)


def linearized_model(schedule, reference: ReferenceTrajectory, state0, feet_steps, params: InertiaParams, h: float):
    """Per-step affine model x_{k+1} = A_k x_k + B_k u_k + c_k.

    Step 0 is linearized at the measured state, later steps at the reference.
    """
    schedule = np.asarray(schedule).reshape(-1, N_LEGS)
    N = schedule.shape[0]
    x0 = srb._vec(state0)
    A = np.zeros((N, NX, NX))
    B = np.zeros((N, NX, NU))
    c = np.zeros((N, NX))
    u_ref = reference.forces.reshape(N, NU)
    for k in range(N):
        xbar = x0 if k == 0 else reference.states[k]
        A[k], B[k] = srb.linearize(xbar, u_ref[k], feet_steps[k], schedule[k], params, h)
        nxt = srb.step(xbar, feet_steps[k], u_ref[k], schedule[k], params, h)
        c[k] = nxt - A[k] @ xbar - B[k] @ u_ref[k]
    return A, B, c


def build_ocp(schedule, reference: ReferenceTrajectory, state0, feet, params: InertiaParams, weights: OcpWeights,
              friction: FrictionParams, terrain: Terrain | None = None, reduced: bool = False) -> CondensedOcp:
    """Condense one rollout into a dense QP over the stacked forces.

    ``feet`` is either the current (4, 3) foot positions, held over the
    horizon, or per-step positions (N, 4, 3).  With ``reduced=False`` swing
    forces stay as variables pinned to zero by equality rows; ``reduced=True``
    drops them from the decision vector instead.
    """
    schedule = np.asarray(schedule)
    if schedule.ndim != 2 or schedule.shape[1] != N_LEGS:
        raise ValidationError(f"schedule must be (N, 4), got {schedule.shape}")
    N = schedule.shape[0]
    if N != weights.N:
        raise ValidationError(f"schedule length {N} does not match horizon N={weights.N}")
    if reference.states.shape != (N + 1, NX) or reference.forces.shape != (N, NU):
        raise ValidationError("reference trajectory does not match the schedule length")
    feet = np.asarray(feet, dtype=float)
    if feet.shape == (N_LEGS, 3):
        feet = np.broadcast_to(feet, (N, N_LEGS, 3))
    if feet.shape != (N, N_LEGS, 3):
        raise ValidationError(f"feet must be (4, 3) or (N, 4, 3), got {feet.shape}")
    friction.validate(params)
    h = weights.h
    x0 = srb._vec(state0)

    A, B, c = linearized_model(schedule, reference, x0, feet, params, h)

    # free response and the block lower-triangular input map
    x_free = np.zeros((N, NX))
    x = x0
    for k in range(N):
        x = A[k] @ x + c[k]
        x_free[k] = x
    gamma = np.zeros((N * NX, N * NU))
    for j in range(N):
        blk = B[j]
        for k in range(j, N):
            gamma[k * NX:(k + 1) * NX, j * NU:(j + 1) * NU] = blk
            if k + 1 < N:
                blk = A[k + 1] @ blk

    stance = np.repeat(schedule.astype(bool), 3, axis=1).reshape(-1)
    var_map = np.flatnonzero(stance) if reduced else np.arange(N * NU)
    gamma = gamma[:, var_map]

    Qbar = np.tile(weights.Q_x, N)
    Rbar = np.tile(weights.R_u, N)[var_map]
    u_ref_full = reference.forces.reshape(-1)
    u_ref = u_ref_full[var_map]
    err_free = x_free.reshape(-1) - reference.states[1:].reshape(-1)
    e0 = x0 - reference.states[0]

    GQ = gamma.T * Qbar
    H = 2.0 * h * (GQ @ gamma + np.diag(Rbar))
    H = 0.5 * (H + H.T)
    g = 2.0 * h * (GQ @ err_free - Rbar * u_ref)
    offset = h * (e0 @ (weights.Q_x * e0) + err_free @ (Qbar * err_free) + u_ref @ (Rbar * u_ref))

    # friction pyramid per stance foot, swing forces pinned
    Cf, df = friction_rows(friction, params, terrain)
    pos = {v: i for i, v in enumerate(var_map)}
    n_var = var_map.size
    rows_in, rhs_in, rows_eq = [], [], []
    for k in range(N):
        for i in range(N_LEGS):
            base = k * NU + 3 * i
            if schedule[k, i]:
                for r in range(6):
                    row = np.zeros(n_var)
                    row[[pos[base], pos[base + 1], pos[base + 2]]] = Cf[r]
                    rows_in.append(row)
                    rhs_in.append(df[r])
            elif not reduced:
                for a in range(3):
                    row = np.zeros(n_var)
                    row[pos[base + a]] = 1.0
                    rows_eq.append(row)
    A_in = np.array(rows_in).reshape(-1, n_var) if rows_in else np.zeros((0, n_var))
    b_in = np.array(rhs_in, dtype=float)
    A_eq = np.array(rows_eq).reshape(-1, n_var) if rows_eq else np.zeros((0, n_var))
    b_eq = np.zeros(A_eq.shape[0])
    qp = QpProblem(H, g, A_eq, b_eq, A_in, b_in)
    return CondensedOcp(qp, float(offset), x_free, gamma, var_map,
                        reference.forces.reshape(N, NU), reference.states, x0)


def stand_cost(state0, feet, params, weights, friction, cmd, contacts0, terrain=None, footholds=None) -> float:
    """Rollout cost of keeping all legs in stance; anchors the infeasibility penalty."""
    N = weights.N
    sched = np.ones((N, N_LEGS), dtype=np.int8)
    res = _solve_rollout(sched, state0, feet, cmd, params, weights, friction, contacts0, terrain, footholds)
    return res.p_tilde if res.status == "optimal" else 0.0


def _solve_rollout(schedule, state0, feet, cmd, params, weights, friction, contacts0, terrain, footholds,
                   method="active_set"):
    N = weights.N
    ref = build_reference(state0, cmd, N, weights.h, params, schedule, terrain)
    feet_steps = plan_footholds(schedule, feet, contacts0, state0, ref, weights.h, footholds, terrain)
    ocp = build_ocp(schedule, ref, state0, feet_steps, params, weights, friction, terrain, reduced=True)
    sol = solve(ocp.qp, method=method)
    if sol.status != "optimal":
        return RolloutCost(np.nan, "penalized")
    extra = reach_cost(schedule, feet_steps, ref, weights.h, footholds)
    return RolloutCost(max(ocp.cost(sol.x_star), 0.0) + extra, "optimal", ocp.full_forces(sol.x_star))


def rollout_cost(schedule, state0, feet, cmd: VelocityCommand, params: InertiaParams, weights: OcpWeights,
                 friction: FrictionParams, contacts0=None, terrain: Terrain | None = None,
                 footholds: FootholdConfig | None = None, method: str = "active_set") -> RolloutCost:
    """Optimal tracking cost of one MPC rollout for an (N, 4) contact schedule.

    ``contacts0`` are the contact flags in effect before the schedule starts
    (defaults to all stance).  A failed solve yields the penalty
    ``1e6 * (1 + stand cost)``.
    """
    schedule = np.asarray(schedule).reshape(-1, N_LEGS)
    contacts0 = np.ones(N_LEGS) if contacts0 is None else np.asarray(contacts0)
    res = _solve_rollout(schedule, state0, feet, cmd, params, weights, friction, contacts0, terrain, footholds, method)
    if res.status == "optimal":
        return res
    base = stand_cost(state0, feet, params, weights, friction, cmd, contacts0, terrain, footholds)
    return RolloutCost(PENALTY_FACTOR * (1.0 + base), "penalized")
