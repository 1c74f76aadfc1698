"""Compiled rollout evaluation for the planner hot path.

Mirrors ``ocp_builder``'s reference, foothold, linearization and condensing
steps inside one numba function, then solves the reduced QP (swing forces
removed) with the Goldfarb-Idnani solver.  ``ocp_builder`` stays the readable
reference; the two are checked against each other in the tests.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .ocp_builder import (PENALTY_FACTOR, FootholdConfig, FrictionParams, OcpWeights, RolloutCost, Terrain,
                          VelocityCommand)
from .qp_core import gi_solve
from .srb_dynamics import N_LEGS, NU, InertiaParams, ValidationError, _vec

STATUS_OK = 0


@dataclass
class RolloutContext:
    """Everything a rollout needs apart from the contact schedule."""

    state0: np.ndarray
    feet: np.ndarray
    contacts0: np.ndarray
    cmd: VelocityCommand = field(default_factory=VelocityCommand)
    params: InertiaParams = field(default_factory=InertiaParams)
    weights: OcpWeights = field(default_factory=OcpWeights)
    friction: FrictionParams = field(default_factory=FrictionParams)
    terrain: Terrain = field(default_factory=Terrain)
    footholds: FootholdConfig = field(default_factory=FootholdConfig)

    def __post_init__(self):
        self.state0 = _vec(self.state0).copy()
        self.feet = np.asarray(self.feet, dtype=float).reshape(N_LEGS, 3).copy()
        self.contacts0 = np.asarray(self.contacts0, dtype=float).reshape(N_LEGS).copy()
        self.friction.validate(self.params)
        self._packed = None
        self._stand = None

    def packed(self):
        if self._packed is None:
            p, w, f = self.params, self.weights, self.friction
            cmd = np.array([self.cmd.vx, self.cmd.vy, self.cmd.yaw_rate, self.cmd.target_height])
            fh = self.footholds
            scal = np.array([p.m, w.h, f.mu, f.f_z_min, f.resolved_max(p), fh.k_v, fh.nominal_stance,
                             self.terrain.slope, fh.max_reach, fh.reach_weight])
            self._packed = (self.state0, self.feet, self.contacts0, cmd, np.ascontiguousarray(p.I_c),
                            np.ascontiguousarray(p.I_inv), p.g.copy(), w.Q_x.copy(), w.R_u.copy(),
                            np.ascontiguousarray(self.footholds.hips, dtype=float), scal)
        return self._packed

    def stand_cost(self) -> float:
        if self._stand is None:
            sched = np.ones((self.weights.N, N_LEGS))
            cost, status, _ = rollout_kernel(sched, *self.packed())
            self._stand = cost if status == STATUS_OK else 0.0
        return self._stand

    def penalty(self) -> float:
        return PENALTY_FACTOR * (1.0 + self.stand_cost())


@njit(cache=True, nogil=True)
def _skew(a):
    out = np.zeros((3, 3))
    out[0, 1] = -a[2]
    out[0, 2] = a[1]
    out[1, 0] = a[2]
    out[1, 2] = -a[0]
    out[2, 0] = -a[1]
    out[2, 1] = a[0]
    return out


@njit(cache=True, nogil=True)
def _deriv(x, feet, u, sched_row, m, I, I_inv, g):
    dx = np.zeros(12)
    total = np.zeros(3)
    torque = np.zeros(3)
    for i in range(4):
        if sched_row[i] == 0:
            continue
        f = u[3 * i:3 * i + 3]
        r = feet[i] - x[0:3]
        total += f
        torque += np.cross(r, f)
    dx[0:3] = x[3:6]
    dx[3:6] = total / m + g
    r, p = x[6], x[7]
    cr, sr, cp, tp = np.cos(r), np.sin(r), np.cos(p), np.tan(p)
    w = x[9:12]
    dx[6] = w[0] + sr * tp * w[1] + cr * tp * w[2]
    dx[7] = cr * w[1] - sr * w[2]
    dx[8] = (sr * w[1] + cr * w[2]) / cp
    dx[9:12] = I_inv @ (-np.cross(w, I @ w) + torque)
    return dx


@njit(cache=True, nogil=True)
def _linearize(x, feet, u, sched_row, m, I, I_inv, g, h):
    J = np.zeros((12, 12))
    for a in range(3):
        J[a, 3 + a] = 1.0
    r, p = x[6], x[7]
    cr, sr, cp, sp, tp = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.tan(p)
    w = x[9:12]
    a_ = sr * w[1] + cr * w[2]
    b_ = cr * w[1] - sr * w[2]
    J[6, 6] = tp * b_
    J[6, 7] = a_ / cp ** 2
    J[7, 6] = -sr * w[1] - cr * w[2]
    J[8, 6] = b_ / cp
    J[8, 7] = a_ * sp / cp ** 2
    J[6, 9] = 1.0
    J[6, 10] = sr * tp
    J[6, 11] = cr * tp
    J[7, 10] = cr
    J[7, 11] = -sr
    J[8, 10] = sr / cp
    J[8, 11] = cr / cp
    J[9:12, 9:12] = I_inv @ (_skew(I @ w) - _skew(w) @ I)
    ftot = np.zeros(3)
    for i in range(4):
        if sched_row[i] != 0:
            ftot += u[3 * i:3 * i + 3]
    J[9:12, 0:3] = I_inv @ _skew(ftot)
    A = np.eye(12) + h * J
    B = np.zeros((12, 12))
    for i in range(4):
        if sched_row[i] == 0:
            continue
        for a in range(3):
            B[3 + a, 3 * i + a] = h / m
        B[9:12, 3 * i:3 * i + 3] = h * (I_inv @ _skew(feet[i] - x[0:3]))
    return A, B


@njit(cache=True, nogil=True)
def _reference(x0, cmd, N, h, slope):
    states = np.zeros((N + 1, 12))
    vx, vy, yr, zt = cmd[0], cmd[1], cmd[2], cmd[3]
    yaw0 = x0[8]
    px, py = x0[0], x0[1]
    st, ct, tt = np.sin(slope), np.cos(slope), np.tan(slope)
    for k in range(N + 1):
        yaw = yaw0 + yr * k * h
        if k > 0:
            yp = yaw0 + yr * (k - 1) * h
            if abs(yr) > 1e-12:
                s0, s1, c0, c1 = np.sin(yp), np.sin(yaw), np.cos(yp), np.cos(yaw)
                px += (vx * (s1 - s0) - vy * (c0 - c1)) / yr
                py += (vx * (c0 - c1) + vy * (s1 - s0)) / yr
            else:
                c, s = np.cos(yaw), np.sin(yaw)
                px += h * (c * vx - s * vy)
                py += h * (s * vx + c * vy)
        c, s = np.cos(yaw), np.sin(yaw)
        wvx = c * vx - s * vy
        roll = -np.arcsin(st * s)
        pitch = np.arctan2(-st * c, ct)
        states[k, 0] = px
        states[k, 1] = py
        states[k, 2] = tt * px + zt
        states[k, 3] = wvx
        states[k, 4] = s * vx + c * vy
        states[k, 5] = tt * wvx
        states[k, 6] = roll
        states[k, 7] = pitch
        states[k, 8] = yaw
        crr, srr, cpp, spp = np.cos(roll), np.sin(roll), np.cos(pitch), np.sin(pitch)
        states[k, 9] = -yr * spp
        states[k, 10] = yr * srr * cpp
        states[k, 11] = yr * crr * cpp
    return states


@njit(cache=True, nogil=True)
def _footholds(sched, feet0, contacts0, x0, ref, h, hips, k_v, nominal, slope):
    N = sched.shape[0]
    feet = feet0.copy()
    out = np.zeros((N, 4, 3))
    prev = contacts0.copy()
    tt = np.tan(slope)
    for k in range(N):
        c, s = np.cos(ref[k, 8]), np.sin(ref[k, 8])
        for i in range(4):
            if sched[k, i] != 0 and prev[i] == 0:
                end = k
                while end < N and sched[end, i] != 0:
                    end += 1
                t_st = (end - k) * h
                if end >= N and nominal > t_st:
                    t_st = nominal
                hx = ref[k, 0] + c * hips[i, 0] - s * hips[i, 1]
                hy = ref[k, 1] + s * hips[i, 0] + c * hips[i, 1]
                fx = hx + x0[3] * t_st / 2.0 + k_v * (x0[3] - ref[k, 3])
                fy = hy + x0[4] * t_st / 2.0 + k_v * (x0[4] - ref[k, 4])
                feet[i, 0] = fx
                feet[i, 1] = fy
                feet[i, 2] = tt * fx
        out[k] = feet
        for i in range(4):
            prev[i] = sched[k, i]
    return out


@njit(cache=True, nogil=True)
def rollout_kernel(sched, x0, feet0, contacts0, cmd, I, I_inv, g, Q, R, hips, scal):
    """Returns (cost, status, full force vector) for an (N, 4) schedule."""
    m, h, mu, fzmin, fzmax, k_v, nominal, slope = (scal[0], scal[1], scal[2], scal[3], scal[4], scal[5],
                                                    scal[6], scal[7])
    max_reach, reach_weight = scal[8], scal[9]
    N = sched.shape[0]
    ref = _reference(x0, cmd, N, h, slope)
    feet = _footholds(sched, feet0, contacts0, x0, ref, h, hips, k_v, nominal, slope)

    # reference forces and the reduced variable map
    uref = np.zeros((N, 12))
    n_var = 0
    for k in range(N):
        ns = 0
        for i in range(4):
            ns += 1 if sched[k, i] != 0 else 0
        for i in range(4):
            if sched[k, i] != 0:
                uref[k, 3 * i + 2] = m * np.sqrt(g @ g) / ns
                n_var += 3
    col0 = np.zeros(N + 1, dtype=np.int64)
    for k in range(N):
        cnt = 0
        for i in range(4):
            if sched[k, i] != 0:
                cnt += 3
        col0[k + 1] = col0[k] + cnt

    As = np.zeros((N, 12, 12))
    Bs = np.zeros((N, 12, 12))
    cs = np.zeros((N, 12))
    x_free = np.zeros((N, 12))
    x = x0.copy()
    for k in range(N):
        xbar = x0 if k == 0 else ref[k]
        A, B = _linearize(xbar, feet[k], uref[k], sched[k], m, I, I_inv, g, h)
        nxt = xbar + h * _deriv(xbar, feet[k], uref[k], sched[k], m, I, I_inv, g)
        cs[k] = nxt - A @ xbar - B @ uref[k]
        As[k] = A
        Bs[k] = B
        x = A @ x + cs[k]
        x_free[k] = x

    gamma = np.zeros((N * 12, n_var))
    for j in range(N):
        w = col0[j + 1] - col0[j]
        if w == 0:
            continue
        blk = np.zeros((12, w))
        c = 0
        for i in range(4):
            if sched[j, i] != 0:
                blk[:, c:c + 3] = Bs[j][:, 3 * i:3 * i + 3]
                c += 3
        for k in range(j, N):
            gamma[k * 12:(k + 1) * 12, col0[j]:col0[j + 1]] = blk
            if k + 1 < N:
                blk = As[k + 1] @ blk

    Qbar = np.zeros(N * 12)
    err = np.zeros(N * 12)
    for k in range(N):
        Qbar[k * 12:(k + 1) * 12] = Q
        err[k * 12:(k + 1) * 12] = x_free[k] - ref[k + 1]
    Rbar = np.zeros(n_var)
    ured = np.zeros(n_var)
    for k in range(N):
        c = col0[k]
        for i in range(4):
            if sched[k, i] != 0:
                Rbar[c:c + 3] = R[3 * i:3 * i + 3]
                ured[c:c + 3] = uref[k, 3 * i:3 * i + 3]
                c += 3
    GQ = gamma.T * Qbar
    H = 2.0 * h * (GQ @ gamma)
    for i in range(n_var):
        H[i, i] += 2.0 * h * Rbar[i]
    H = 0.5 * (H + H.T)
    gvec = 2.0 * h * (GQ @ err - Rbar * ured)
    e0 = x0 - ref[0]
    offset = h * (e0 @ (Q * e0) + err @ (Qbar * err) + ured @ (Rbar * ured))

    # friction pyramid as N x >= b rows
    st, ct = np.sin(slope), np.cos(slope)
    t1 = np.array([ct, 0.0, st])
    t2 = np.array([0.0, 1.0, 0.0])
    nn = np.array([-st, 0.0, ct])
    C = np.zeros((6, 3))
    C[0] = -nn
    C[1] = nn
    C[2] = t1 - mu * nn
    C[3] = -t1 - mu * nn
    C[4] = t2 - mu * nn
    C[5] = -t2 - mu * nn
    d = np.array([-fzmin, fzmax, 0.0, 0.0, 0.0, 0.0])
    n_feet = n_var // 3
    Nc = np.zeros((6 * n_feet, n_var))
    bc = np.zeros(6 * n_feet)
    for f in range(n_feet):
        for r in range(6):
            Nc[6 * f + r, 3 * f:3 * f + 3] = -C[r]
            bc[6 * f + r] = -d[r]

    extra = 0.0
    if reach_weight != 0.0:
        for k in range(N):
            c, s = np.cos(ref[k + 1, 8]), np.sin(ref[k + 1, 8])
            for i in range(4):
                if sched[k, i] != 0:
                    hx = ref[k + 1, 0] + c * hips[i, 0] - s * hips[i, 1]
                    hy = ref[k + 1, 1] + s * hips[i, 0] + c * hips[i, 1]
                    d = np.hypot(feet[k, i, 0] - hx, feet[k, i, 1] - hy)
                    if d > max_reach:
                        extra += (d - max_reach) ** 2
        extra *= reach_weight * h

    if n_var == 0:
        return max(offset, 0.0) + extra, STATUS_OK, np.zeros(N * 12)
    xs, _, status, _ = gi_solve(H, gvec, Nc, bc, 0, 4000)
    cost = 0.5 * xs @ (H @ xs) + gvec @ xs + offset
    full = np.zeros(N * 12)
    for k in range(N):
        c = col0[k]
        for i in range(4):
            if sched[k, i] != 0:
                full[k * 12 + 3 * i:k * 12 + 3 * i + 3] = xs[c:c + 3]
                c += 3
    return max(cost, 0.0) + extra, status, full


def evaluate(schedule, ctx: RolloutContext) -> RolloutCost:
    """Rollout cost of one (N, 4) schedule, with the infeasibility penalty applied."""
    sched = np.ascontiguousarray(np.asarray(schedule, dtype=float).reshape(-1, N_LEGS))
    if sched.shape[0] != ctx.weights.N:
        raise ValidationError(f"schedule length {sched.shape[0]} does not match horizon N={ctx.weights.N}")
    cost, status, full = rollout_kernel(sched, *ctx.packed())
    if status != STATUS_OK or not np.isfinite(cost):
        return RolloutCost(ctx.penalty(), "penalized")
    return RolloutCost(float(cost), "optimal", full.reshape(-1, NU))


def evaluate_many(schedules, ctx: RolloutContext, workers: int = 1) -> list[RolloutCost]:
    """Evaluate several schedules; results are returned in input order."""
    schedules = list(schedules)
    ctx.packed()
    if workers <= 1 or len(schedules) < 2:
        return [evaluate(s, ctx) for s in schedules]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: evaluate(s, ctx), schedules))

