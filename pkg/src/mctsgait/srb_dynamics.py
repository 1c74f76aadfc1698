"""Single-rigid-body (SRB) dynamics of a quadruped trunk.

State layout (12-vector)::

    [p_c (3), v_c (3), phi (3: roll, pitch, yaw), omega_b (3)]

Control layout (12-vector): ground reaction forces of the four feet in the
world frame, stacked ``[f_LF, f_RF, f_LH, f_RH]``.

Euler angles follow the ZYX (yaw-pitch-roll) convention, i.e. the trunk
orientation is ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NX = 12
NU = 12
N_LEGS = 4
LEG_NAMES = ("LF", "RF", "LH", "RH")

PITCH_GUARD = 1e-3
DEFAULT_GRAVITY = (0.0, 0.0, -9.81)


class ValidationError(ValueError):
    """Raised when an input violates a documented invariant."""


class SingularityError(ValueError):
    """Raised when the Euler-rate map is evaluated too close to gimbal lock."""


@dataclass
class SrbState:
    p_c: np.ndarray
    v_c: np.ndarray
    phi: np.ndarray
    omega_b: np.ndarray

    def __post_init__(self):
        for name in ("p_c", "v_c", "phi", "omega_b"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(3)
            setattr(self, name, arr)

    @classmethod
    def from_vector(cls, x) -> "SrbState":
        x = np.asarray(x, dtype=float).reshape(NX)
        return cls(x[0:3].copy(), x[3:6].copy(), x[6:9].copy(), x[9:12].copy())

    @classmethod
    def standing(cls, height: float = 0.35, yaw: float = 0.0) -> "SrbState":
        return cls(np.array([0.0, 0.0, height]), np.zeros(3), np.array([0.0, 0.0, yaw]), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p_c, self.v_c, self.phi, self.omega_b])


@dataclass
class InertiaParams:
    m: float = 22.0
    I_c: np.ndarray = field(default_factory=lambda: np.diag([0.15, 0.40, 0.45]))
    g: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_GRAVITY))

    def __post_init__(self):
        self.I_c = np.asarray(self.I_c, dtype=float).reshape(3, 3)
        self.g = np.asarray(self.g, dtype=float).reshape(3)
        if not self.m > 0:
            raise ValidationError(f"mass must be positive, got {self.m}")
        if np.max(np.abs(self.I_c - self.I_c.T)) > 1e-12:
            raise ValidationError("inertia tensor must be symmetric")
        if np.any(np.linalg.eigvalsh(self.I_c) <= 0):
            raise ValidationError("inertia tensor must be positive definite")
        self.I_inv = np.linalg.inv(self.I_c)

    @property
    def weight(self) -> float:
        return self.m * float(np.linalg.norm(self.g))


def _vec(x, n=NX, name="state") -> np.ndarray:
    if isinstance(x, SrbState):
        x = x.as_vector()
    x = np.asarray(x, dtype=float)
    if x.size != n:
        raise ValidationError(f"{name} must have {n} entries, got {x.size}")
    x = x.reshape(n)
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite values")
    return x


def _feet(feet) -> np.ndarray:
    feet = np.asarray(feet, dtype=float).reshape(N_LEGS, 3)
    if not np.all(np.isfinite(feet)):
        raise ValidationError("foot positions contain non-finite values")
    return feet


def _contacts(contacts) -> np.ndarray:
    c = np.asarray(contacts).reshape(N_LEGS)
    if not np.all((c == 0) | (c == 1)):
        raise ValidationError(f"contact flags must be binary, got {c}")
    return c.astype(float)


def skew(a) -> np.ndarray:
    return np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])


def rotation_matrix(phi) -> np.ndarray:
    """World-from-body rotation for ZYX Euler angles (roll, pitch, yaw)."""
    r, p, y = phi
    cr, sr, cp, sp, cy, sy = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def _check_pitch(pitch: float) -> None:
    if abs(pitch) >= np.pi / 2 - PITCH_GUARD:
        raise SingularityError(f"pitch {pitch:.6f} rad is within {PITCH_GUARD} rad of gimbal lock")


def euler_rate_map(phi) -> np.ndarray:
    """Matrix ``E_inv`` with ``phi_dot = E_inv @ omega_b`` (ZYX convention)."""
    phi = _vec(phi, 3, "phi")
    r, p = phi[0], phi[1]
    _check_pitch(p)
    cr, sr, cp, tp = np.cos(r), np.sin(r), np.cos(p), np.tan(p)
    return np.array(
        [
            [1.0, sr * tp, cr * tp],
            [0.0, cr, -sr],
            [0.0, sr / cp, cr / cp],
        ]
    )


def _euler_rate_jacobian(phi, omega) -> np.ndarray:
    """d(E_inv(phi) @ omega)/d(phi)."""
    r, p = phi[0], phi[1]
    cr, sr, cp, sp, tp = np.cos(r), np.sin(r), np.cos(p), np.sin(p), np.tan(p)
    a = sr * omega[1] + cr * omega[2]
    b = cr * omega[1] - sr * omega[2]
    return np.array(
        [
            [tp * b, a / cp**2, 0.0],
            [-sr * omega[1] - cr * omega[2], 0.0, 0.0],
            [b / cp, a * sp / cp**2, 0.0],
        ]
    )


def continuous_dynamics(state, feet, forces, contacts, params: InertiaParams, ext_force=None) -> np.ndarray:
    """Time derivative of the SRB state.

    ``ext_force`` is an optional world-frame force applied at the CoM (used by
    the simulator for pushes); it is not part of the planning model.
    """
    x = _vec(state)
    feet = _feet(feet)
    f = _vec(forces, NU, "forces").reshape(N_LEGS, 3)
    delta = _contacts(contacts)
    v, phi, w = x[3:6], x[6:9], x[9:12]
    e_inv = euler_rate_map(phi)

    active = delta[:, None] * f
    total = active.sum(axis=0)
    if ext_force is not None:
        total = total + np.asarray(ext_force, dtype=float).reshape(3)
    r = feet - x[0:3]
    torque = np.cross(r, active).sum(axis=0)

    dx = np.empty(NX)
    dx[0:3] = v
    dx[3:6] = total / params.m + params.g
    dx[6:9] = e_inv @ w
    dx[9:12] = params.I_inv @ (-np.cross(w, params.I_c @ w) + torque)
    return dx


def step(state, feet, forces, contacts, params: InertiaParams, h: float, method: str = "euler", ext_force=None) -> np.ndarray:
    """Advance the state by ``h`` seconds with explicit Euler or RK4.

    Returns the new state as a 12-vector.
    """
    if not h > 0:
        raise ValidationError(f"step size must be positive, got {h}")
    x = _vec(state)

    def rhs(y):
        return continuous_dynamics(y, feet, forces, contacts, params, ext_force)

    if method == "euler":
        return x + h * rhs(x)
    if method == "rk4":
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    raise ValidationError(f"unknown integrator {method!r}")


def state_jacobian(state, feet, forces, contacts, params: InertiaParams) -> np.ndarray:
    """Continuous-time Jacobian d(x_dot)/dx."""
    x = _vec(state)
    f = _vec(forces, NU, "forces").reshape(N_LEGS, 3)
    delta = _contacts(contacts)
    phi, w = x[6:9], x[9:12]
    e_inv = euler_rate_map(phi)
    I, I_inv = params.I_c, params.I_inv

    J = np.zeros((NX, NX))
    J[0:3, 3:6] = np.eye(3)
    J[6:9, 6:9] = _euler_rate_jacobian(phi, w)
    J[6:9, 9:12] = e_inv
    J[9:12, 9:12] = I_inv @ (skew(I @ w) - skew(w) @ I)
    # r_i = p_f,i - p_c, so d(r_i x f_i)/dp_c = skew(f_i)
    J[9:12, 0:3] = I_inv @ skew((delta[:, None] * f).sum(axis=0))
    return J


def input_jacobian(state, feet, contacts, params: InertiaParams) -> np.ndarray:
    """Continuous-time Jacobian d(x_dot)/du; columns of swing legs are zero."""
    x = _vec(state)
    feet = _feet(feet)
    delta = _contacts(contacts)
    Bc = np.zeros((NX, NU))
    for i in range(N_LEGS):
        if delta[i] == 0:
            continue
        cols = slice(3 * i, 3 * i + 3)
        Bc[3:6, cols] = np.eye(3) / params.m
        Bc[9:12, cols] = params.I_inv @ skew(feet[i] - x[0:3])
    return Bc


def linearize(ref_state, ref_forces, feet, contacts, params: InertiaParams, h: float):
    """Jacobians ``(A, B)`` of the explicit-Euler step map at the reference."""
    if not h > 0:
        raise ValidationError(f"step size must be positive, got {h}")
    A = np.eye(NX) + h * state_jacobian(ref_state, feet, ref_forces, contacts, params)
    B = h * input_jacobian(ref_state, feet, contacts, params)
    return A, B


def kinetic_energy_rot(omega, params: InertiaParams) -> float:
    omega = np.asarray(omega, dtype=float)
    return 0.5 * float(omega @ params.I_c @ omega)
