"""Dense convex QP solvers.

Problem form::

    minimize    1/2 x'Hx + g'x
    subject to  A_eq x  = b_eq
                A_in x <= b_in

Two deterministic methods are provided:

* ``"admm"`` (default): operator splitting in the style of OSQP, with Ruiz
  equilibration, over-relaxation, adaptive step size and solution polishing
  on the detected active set.  Supports warm starts.
* ``"active_set"``: the Goldfarb-Idnani dual active-set method.  Exact up to
  round-off and much cheaper on the small strictly convex rollout QPs.

Dual sign convention: ``H x + g + A_eq' nu + A_in' lam = 0`` with ``lam >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

RIDGE = 1e-9
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 4000


class QpValidationError(ValueError):
    pass


def _as_rows(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if n == 0:
        return a.reshape(a.shape[0] if a.ndim == 2 else 0, 0)
    return a.reshape(-1, n)


@dataclass(frozen=True)
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray

    def __post_init__(self):
        H = np.ascontiguousarray(self.H, dtype=float)
        n = H.shape[0]
        if H.shape != (n, n):
            raise QpValidationError(f"H must be square, got {H.shape}")
        if n and np.max(np.abs(H - H.T)) > 1e-12 * max(1.0, np.max(np.abs(H))):
            raise QpValidationError("H must be symmetric")
        g = np.asarray(self.g, dtype=float).reshape(n)
        A_eq = _as_rows(self.A_eq, n)
        b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        A_in = _as_rows(self.A_in, n)
        b_in = np.asarray(self.b_in, dtype=float).reshape(-1)
        if A_eq.shape[0] != b_eq.size or A_in.shape[0] != b_in.size:
            raise QpValidationError("constraint matrices and right-hand sides disagree in size")
        for name, val in (("H", H), ("g", g), ("A_eq", A_eq), ("b_eq", b_eq), ("A_in", A_in), ("b_in", b_in)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @classmethod
    def unconstrained(cls, H, g) -> "QpProblem":
        n = np.asarray(H).shape[0]
        return cls(H, g, np.zeros((0, n)), np.zeros(0), np.zeros((0, n)), np.zeros(0))

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.g @ x)

    def scaled(self, s: float) -> "QpProblem":
        return QpProblem(self.H * s, self.g * s, self.A_eq, self.b_eq, self.A_in, self.b_in)

    def dump(self, path) -> None:
        """Write each block as a titled row-major matrix with ``%.17g`` values."""
        with open(path, "w") as fh:
            fh.write("# schema: qp_problem v1\n")
            for name in ("H", "g", "A_eq", "b_eq", "A_in", "b_in"):
                val = np.atleast_2d(getattr(self, name))
                if getattr(self, name).ndim == 1:
                    val = val.reshape(-1, 1)
                fh.write(f"{name} {val.shape[0]} {val.shape[1]}\n")
                for row in val:
                    fh.write(" ".join("%.17g" % v for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "QpProblem":
        blocks = {}
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "# schema: qp_problem v1":
                raise QpValidationError(f"unknown QP dump version: {header!r}")
            for _ in range(6):
                name, r, c = fh.readline().split()
                rows = [np.array(fh.readline().split(), dtype=float) for _ in range(int(r))]
                blocks[name] = np.array(rows).reshape(int(r), int(c))
        n = blocks["H"].shape[0]
        return cls(blocks["H"], blocks["g"].reshape(-1), blocks["A_eq"].reshape(-1, n), blocks["b_eq"].reshape(-1),
                   blocks["A_in"].reshape(-1, n), blocks["b_in"].reshape(-1))


@dataclass
class QpSolution:
    x_star: np.ndarray
    objective: float
    status: str  # "optimal" | "max_iter" | "infeasible"
    primal_residual: float
    dual_residual: float
    complementarity: float
    iterations: int
    y_eq: np.ndarray
    y_in: np.ndarray


def kkt_residual(problem: QpProblem, x, duals) -> tuple[float, float, float]:
    """(primal, dual, complementarity) residuals in the infinity norm.

    ``duals`` is ``(nu, lam)``.  Negative inequality multipliers count as
    dual infeasibility.
    """
    x = np.asarray(x, dtype=float)
    nu, lam = (np.asarray(d, dtype=float) for d in duals)
    primal = 0.0
    if problem.b_eq.size:
        primal = max(primal, float(np.max(np.abs(problem.A_eq @ x - problem.b_eq))))
    slack = problem.A_in @ x - problem.b_in
    if slack.size:
        primal = max(primal, float(np.max(np.maximum(slack, 0.0))))
    stat = problem.H @ x + problem.g + problem.A_eq.T @ nu + problem.A_in.T @ lam
    dual = float(np.max(np.abs(stat))) if stat.size else 0.0
    if lam.size:
        dual = max(dual, float(np.max(np.maximum(-lam, 0.0))))
    comp = float(np.max(np.abs(lam * slack))) if lam.size else 0.0
    return primal, dual, comp


def _finish(problem, x, y_eq, y_in, status, iters) -> QpSolution:
    p, d, c = kkt_residual(problem, x, (y_eq, y_in))
    return QpSolution(x, problem.objective(x), status, p, d, c, iters, y_eq, y_in)


def solve(problem: QpProblem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
          method: str = "admm", warm_start: QpSolution | None = None) -> QpSolution:
    """Solve a convex QP; see the module docstring for the methods."""
    if not tol > 0:
        raise QpValidationError("tol must be positive")
    if problem.n == 0:
        z = np.zeros(0)
        return _finish(problem, z, np.zeros(problem.b_eq.size), np.zeros(problem.b_in.size), "optimal", 0)
    if problem.b_eq.size and not _equalities_consistent(problem):
        x = np.linalg.lstsq(problem.A_eq, problem.b_eq, rcond=None)[0]
        return _finish(problem, x, np.zeros(problem.b_eq.size), np.zeros(problem.b_in.size), "infeasible", 0)
    if method == "active_set":
        return _solve_active_set(problem, tol, max_iter)
    if method == "admm":
        return _solve_admm(problem, tol, max_iter, warm_start)
    raise QpValidationError(f"unknown method {method!r}")


def _equalities_consistent(problem: QpProblem) -> bool:
    A, b = problem.A_eq, problem.b_eq
    x = np.linalg.lstsq(A, b, rcond=None)[0]
    return float(np.max(np.abs(A @ x - b))) <= 1e-9 * max(1.0, float(np.max(np.abs(b))))


# --------------------------------------------------------------------------- #
# Goldfarb-Idnani dual active set
# --------------------------------------------------------------------------- #

@njit(cache=True, nogil=True)
def _checked_cholesky(H):
    """Lower Cholesky factor, or an empty array when H is not safely positive definite."""
    n = H.shape[0]
    dmax = 0.0
    for i in range(n):
        dmax = max(dmax, abs(H[i, i]))
    try:
        L = np.linalg.cholesky(H)
    except Exception:  # noqa: BLE001 - numba raises a generic error here
        return np.zeros((0, 0))
    for i in range(n):
        if not L[i, i] * L[i, i] > 1e-13 * dmax:
            return np.zeros((0, 0))
    return L


@njit(cache=True, nogil=True)
def _forward(L, v):
    n = v.shape[0]
    y = np.empty(n)
    for i in range(n):
        acc = v[i]
        for j in range(i):
            acc -= L[i, j] * y[j]
        y[i] = acc / L[i, i]
    return y


@njit(cache=True, nogil=True)
def _backward(L, v):
    n = v.shape[0]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = v[i]
        for j in range(i + 1, n):
            acc -= L[j, i] * x[j]
        x[i] = acc / L[i, i]
    return x


@njit(cache=True, nogil=True)
def gi_solve(H, g, N, b, meq, max_iter):
    """Goldfarb-Idnani for min 1/2 x'Hx + g'x s.t. N[i]x >= b[i] (first meq equalities).

    Range-space variant: with H = LL', the active normals are kept as rows
    of W = (L^-1 N_A)', so each iteration costs a pair of triangular solves plus a
    small system in the active-set size.

    Returns (x, u, status, iterations) with status 0 optimal, 1 infeasible,
    2 iteration cap, 3 factorization failure.  ``u`` holds multipliers of
    ``N x >= b`` (non-negative for inequalities).
    """
    n = H.shape[0]
    m = N.shape[0]
    x = np.zeros(n)
    u_out = np.zeros(m)
    # the ridge is only added when H itself is numerically singular, so a
    # positive definite H yields the unbiased minimizer
    L = _checked_cholesky(H)
    if L.shape[0] == 0:
        Hr = H.copy()
        for i in range(n):
            Hr[i, i] += RIDGE
        L = _checked_cholesky(Hr)
        if L.shape[0] == 0:
            return x, u_out, 3, 0
    x = -_backward(L, _forward(L, g))

    W = np.zeros((n, n))
    active = np.empty(n, dtype=np.int64)
    u = np.zeros(n + 1)
    sign = np.ones(m)
    in_active = np.zeros(m, dtype=np.bool_)
    row_scale = np.empty(m)
    for i in range(m):
        row_scale[i] = 1.0 + np.abs(N[i]).sum()
    q = 0
    it = 0

    while True:
        p = -1
        s_p = 0.0
        for i in range(meq):
            if not in_active[i]:
                p = i
                s_p = N[i] @ x - b[i]
                break
        if p < 0 and m > meq:
            slack = N[meq:] @ x - b[meq:]
            xs = 1.0 + np.abs(x).max()
            best = 0.0
            for j in range(m - meq):
                i = meq + j
                if in_active[i]:
                    continue
                val = slack[j] / (row_scale[i] * xs)
                if val < -1e-13 and val < best:
                    best = val
                    p = i
                    s_p = slack[j]
        if p < 0:
            break
        if p < meq and s_p > 0.0:
            sign[p] = -1.0
            s_p = -s_p
        n_p = N[p] * sign[p]
        b_p = b[p] * sign[p]
        u_p = 0.0

        while True:
            it += 1
            if it > max_iter:
                for j in range(q):
                    u_out[active[j]] = u[j] * sign[active[j]]
                return x, u_out, 2, it
            y = _forward(L, n_p)
            if q > 0:
                Wq = W[:q]
                r = np.linalg.solve(Wq @ Wq.T, Wq @ y)
                resid = y - Wq.T @ r
            else:
                r = np.zeros(0)
                resid = y
            zn = resid @ resid
            # dual step length
            t1 = np.inf
            k = -1
            for j in range(q):
                if active[j] >= meq and r[j] > 0.0:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1 = ratio
                        k = j
            t2 = np.inf
            if zn > 1e-20 * (y @ y):
                t2 = -s_p / zn
            t = min(t1, t2)
            if t == np.inf:
                for j in range(q):
                    u_out[active[j]] = u[j] * sign[active[j]]
                return x, u_out, 1, it
            if t2 < np.inf:
                x = x + t * _backward(L, resid)
            for j in range(q):
                u[j] -= t * r[j]
            u_p += t
            if t == t2:
                W[q] = y
                active[q] = p
                u[q] = u_p
                in_active[p] = True
                q += 1
                break
            # drop blocking constraint k
            in_active[active[k]] = False
            for j in range(k, q - 1):
                active[j] = active[j + 1]
                u[j] = u[j + 1]
                W[j] = W[j + 1]
            q -= 1
            s_p = n_p @ x - b_p

    for j in range(q):
        u_out[active[j]] = u[j] * sign[active[j]]
    return x, u_out, 0, it


def _solve_active_set(problem: QpProblem, tol: float, max_iter: int) -> QpSolution:
    p, q = problem.b_eq.size, problem.b_in.size
    N = np.ascontiguousarray(np.vstack([problem.A_eq, -problem.A_in]))
    b = np.concatenate([problem.b_eq, -problem.b_in])
    x, u, status, iters = gi_solve(problem.H, problem.g, N, b, p, max_iter)
    y_eq = -u[:p]
    y_in = u[p:].copy()
    name = {0: "optimal", 1: "infeasible", 2: "max_iter", 3: "max_iter"}[status]
    sol = _finish(problem, x, y_eq, y_in, name, iters)
    if name == "optimal" and max(sol.primal_residual, sol.dual_residual, sol.complementarity) > tol:
        sol.status = "max_iter"
    return sol


# --------------------------------------------------------------------------- #
# ADMM
# --------------------------------------------------------------------------- #

def _ruiz(H, A, iters=15):
    n, m = H.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Hs, As = H.copy(), A.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(Hs).max(axis=0), np.abs(As).max(axis=0) if m else 0.0)
        dD = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        dE = 1.0 / np.sqrt(np.clip(np.abs(As).max(axis=1), 1e-4, 1e4)) if m else np.ones(0)
        Hs = dD[:, None] * Hs * dD[None, :]
        As = dE[:, None] * As * dD[None, :]
        D *= dD
        E *= dE
    return D, E, Hs, As


def _polish(problem, x, y_eq, y_in, tol):
    """Solve the equality QP on the guessed active set; None if inconsistent."""
    act = np.flatnonzero(problem.b_in - problem.A_in @ x < y_in)
    A = np.vstack([problem.A_eq, problem.A_in[act]])
    b = np.concatenate([problem.b_eq, problem.b_in[act]])
    n, k = problem.n, A.shape[0]
    delta = 1e-10
    K = np.zeros((n + k, n + k))
    K[:n, :n] = problem.H + delta * np.eye(n)
    K[:n, n:] = A.T
    K[n:, :n] = A
    K[n:, n:] = -delta * np.eye(k)
    Kt = K.copy()
    Kt[:n, :n] -= delta * np.eye(n)
    Kt[n:, n:] = 0.0
    rhs = np.concatenate([-problem.g, b])
    try:
        sol = np.linalg.solve(K, rhs)
        for _ in range(5):
            sol = sol + np.linalg.solve(K, rhs - Kt @ sol)
    except np.linalg.LinAlgError:
        return None
    xp = sol[:n]
    lam = np.zeros(problem.b_in.size)
    lam[act] = sol[n + problem.b_eq.size:]
    nu = sol[n:n + problem.b_eq.size]
    return xp, nu, lam


def _solve_admm(problem: QpProblem, tol: float, max_iter: int, warm: QpSolution | None) -> QpSolution:
    n, p = problem.n, problem.b_eq.size
    H = problem.H + RIDGE * np.eye(n)
    A = np.vstack([problem.A_eq, problem.A_in])
    m = A.shape[0]
    lo = np.concatenate([problem.b_eq, np.full(problem.b_in.size, -np.inf)])
    hi = np.concatenate([problem.b_eq, problem.b_in])
    D, E, Hs, As = _ruiz(H, A)
    c = 1.0 / max(1.0, float(np.abs(D * problem.g).max()) if n else 1.0)
    Hs = Hs * c
    qs = c * D * problem.g
    ls, us = E * lo, E * hi
    is_eq = np.arange(m) < p

    sigma, alpha = 1e-6, 1.6
    rho = 0.1
    rho_vec = np.where(is_eq, 1e3 * rho, rho)

    if warm is not None and warm.x_star.size == n and warm.y_in.size == problem.b_in.size:
        x = warm.x_star / D
        y = np.concatenate([warm.y_eq, warm.y_in]) / E * c
        z = As @ x
    else:
        x = np.zeros(n)
        y = np.zeros(m)
        z = np.zeros(m)

    def factor():
        return np.linalg.cholesky(Hs + sigma * np.eye(n) + As.T @ (rho_vec[:, None] * As))

    Lk = factor()

    def kkt_solve(rhs):
        t = np.linalg.solve(Lk, rhs)
        return np.linalg.solve(Lk.T, t)

    def unscaled(xs, ys):
        return D * xs, (E * ys / c)

    best = None
    check_every = 10
    y_prev = y.copy()
    for it in range(1, max_iter + 1):
        rhs = sigma * x - qs + As.T @ (rho_vec * z - y)
        xt = kkt_solve(rhs)
        zt = As @ xt
        x = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = np.clip(zr + y / rho_vec, ls, us)
        y = y + rho_vec * (zr - z_new)
        z = z_new

        if it % check_every and it != 1:
            continue
        xu, yu = unscaled(x, y)
        sol = _finish(problem, xu, yu[:p].copy(), yu[p:].copy(), "optimal", it)
        raw_ok = max(sol.primal_residual, sol.dual_residual, sol.complementarity) <= tol
        if raw_ok or it % (5 * check_every) == 0:
            pol = _polish(problem, xu, yu[:p], yu[p:], tol)
            if pol is not None:
                ps = _finish(problem, pol[0], pol[1], pol[2], "optimal", it)
                if max(ps.primal_residual, ps.dual_residual, ps.complementarity) <= tol:
                    return ps
        if raw_ok:
            return sol
        best = sol
        # primal infeasibility certificate
        dy = y - y_prev
        y_prev = y.copy()
        ndy = np.abs(dy).max() if m else 0.0
        if ndy > 1e-12:
            lin = np.abs(D * (As.T @ dy)).max()
            fin_u, fin_l = np.isfinite(us), np.isfinite(ls)
            up = np.where(dy > 0, np.where(fin_u, np.where(fin_u, us, 0.0) * dy, np.inf), 0.0)
            low = np.where(dy < 0, np.where(fin_l, np.where(fin_l, ls, 0.0) * dy, np.inf), 0.0)
            if lin < 1e-9 * ndy and (up.sum() + low.sum()) < -1e-9 * ndy:
                best.status = "infeasible"
                return best
        # adapt rho on the scaled residual balance
        if it % (5 * check_every) == 0:
            rp = np.abs(As @ x - z).max() / max(np.abs(As @ x).max(), np.abs(z).max(), 1e-12)
            rd = np.abs(Hs @ x + qs + As.T @ y).max() / max(np.abs(Hs @ x).max(), np.abs(As.T @ y).max(),
                                                             np.abs(qs).max(), 1e-12)
            new_rho = float(np.clip(rho * np.sqrt(rp / max(rd, 1e-30)), 1e-6, 1e6))
            if new_rho > 5 * rho or new_rho < rho / 5:
                rho = new_rho
                rho_vec = np.where(is_eq, 1e3 * rho, rho)
                Lk = factor()
    best = best or _finish(problem, *([D * x] + list(np.split(E * y / c, [p]))), "max_iter", max_iter)
    best.status = "max_iter"
    best.iterations = max_iter
    return best
