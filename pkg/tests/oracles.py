"""Independent reference implementations used only by the tests."""
from itertools import combinations

import numpy as np


def enumerate_qp(H, g, A_eq, b_eq, A_in, b_in, tol=1e-9, max_active=None):
    """Strictly convex QP solved by trying every active inequality set.

    Returns ``(x, nu, lam)`` for the first active set whose KKT solution is
    primal feasible with non-negative multipliers.  ``max_active`` caps the
    set size for instances whose optimum is known to touch few constraints.
    """
    n = H.shape[0]
    p, q = A_eq.shape[0], A_in.shape[0]
    for size in range((q if max_active is None else max_active) + 1):
        for act in combinations(range(q), size):
            A = np.vstack([A_eq, A_in[list(act)]]) if size else A_eq
            b = np.concatenate([b_eq, b_in[list(act)]]) if size else b_eq
            m = A.shape[0]
            K = np.block([[H, A.T], [A, np.zeros((m, m))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-g, b]))
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(sol)) or np.linalg.cond(K) > 1e15:
                continue
            x, mult = sol[:n], sol[n:]
            lam = np.zeros(q)
            lam[list(act)] = mult[p:]
            if np.all(A_in @ x <= b_in + tol) and np.all(lam >= -tol):
                return x, mult[:p], lam
    raise ValueError("no feasible active set")


def random_qp(rng, n=None, p=None, q=None):
    n = n or int(rng.integers(1, 7))
    p = min(n - 1, int(rng.integers(0, 3))) if p is None else p
    q = int(rng.integers(0, 9)) if q is None else q
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = rng.normal(size=n) * 3
    x0 = rng.normal(size=n)
    A_eq = rng.normal(size=(p, n))
    b_eq = A_eq @ x0
    A_in = rng.normal(size=(q, n))
    b_in = A_in @ x0 + rng.uniform(0, 1, q)
    return H, g, A_eq, b_eq, A_in, b_in


def rollout_objective(x0, x_ref, u_ref, u, Q, R, h, A, B, c):
    """Tracking cost by stepping an affine model forward, weighted by h."""
    x = np.array(x0, dtype=float)
    e = x - x_ref[0]
    total = e @ np.diag(Q) @ e
    for k in range(len(u)):
        du = u[k] - u_ref[k]
        total += du @ np.diag(R) @ du
        x = A[k] @ x + B[k] @ u[k] + c[k]
        e = x - x_ref[k + 1]
        total += e @ np.diag(Q) @ e
    return float(h * total)


def short_phase_mask(seqs, dt, contact0, active0, t_swing_min=0.24, t_stance_min=0.16, eps=1e-9):
    """Per-sequence flag: some completed phase is shorter than its minimum.

    ``seqs`` is (n, S, 4); ``contact0``/``active0`` (n, 4) give the phase in
    force before the first step and how long it has lasted.  Phases still open
    at the end of the sequence are not judged.
    """
    seqs = np.asarray(seqs)
    n, S, legs = seqs.shape
    bad = np.zeros(n, dtype=bool)
    for i in range(legs):
        phase = np.asarray(contact0)[:, i].astype(int)
        run = np.asarray(active0, dtype=float)[:, i].copy()
        for k in range(S):
            a = seqs[:, k, i]
            switch = a != phase
            limit = np.where(phase == 1, t_stance_min, t_swing_min)
            bad |= switch & (run < limit - eps)
            run = np.where(switch, dt, run + dt)
            phase = a
    return bad


def completed_swing_durations(seq, dt, contact0, active0):
    """Durations of swing phases that end inside ``seq`` (one start state)."""
    seq = np.asarray(seq)
    out = []
    for i in range(seq.shape[1]):
        phase, run = int(contact0[i]), float(active0[i])
        for k in range(seq.shape[0]):
            if seq[k, i] == phase:
                run += dt
            else:
                if phase == 0:
                    out.append(run)
                phase, run = int(seq[k, i]), dt
    return out


def feasible_sequences(depth, dt, contact0, active0, t_swing_min=0.24, t_stance_min=0.16):
    """All contact sequences of ``depth`` steps with no early phase switch, in lexicographic action order."""
    idx = np.arange(16 ** depth)
    digits = (idx[:, None] // 16 ** np.arange(depth - 1, -1, -1)) % 16
    seqs = ((digits[:, :, None] >> np.array([3, 2, 1, 0])) & 1).astype(np.int8)
    n = seqs.shape[0]
    bad = short_phase_mask(seqs, dt, np.tile(contact0, (n, 1)), np.tile(active0, (n, 1)), t_swing_min, t_stance_min)
    return seqs[~bad]
