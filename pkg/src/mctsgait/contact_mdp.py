"""Contact-state MDP over four legs.

A state holds, per leg, the contact flag and two phase timers.  The timer of
the current phase runs; the other one keeps the duration of the last
completed phase.  Actions are 4-tuples of contact flags; their integer index
is ``LF*8 + RF*4 + LH*2 + RH``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .srb_dynamics import LEG_NAMES, N_LEGS, ValidationError

TIME_EPS = 1e-9
GAIT_SCHEMA = "# schema: gait_sequence v1"
MIRROR_LEGS = (1, 0, 3, 2)
TROT_PAIRS = ((0, 3), (1, 2))


@dataclass(frozen=True)
class FeasibilityConfig:
    t_swing_min: float = 0.24
    t_stance_min: float = 0.16

    def __post_init__(self):
        if not (self.t_swing_min > 0 and self.t_stance_min > 0):
            raise ValidationError("minimum swing and stance times must be positive")


@dataclass(frozen=True)
class ContactState:
    in_contact: tuple = (1, 1, 1, 1)
    t_swing: tuple = (0.0, 0.0, 0.0, 0.0)
    t_stance: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        c = tuple(int(v) for v in self.in_contact)
        sw = tuple(float(v) for v in self.t_swing)
        st = tuple(float(v) for v in self.t_stance)
        if len(c) != N_LEGS or len(sw) != N_LEGS or len(st) != N_LEGS:
            raise ValidationError("contact state needs four entries per field")
        if any(v not in (0, 1) for v in c):
            raise ValidationError(f"contact flags must be binary, got {c}")
        if min(sw + st) < 0 or not np.all(np.isfinite(sw + st)):
            raise ValidationError("phase timers must be finite and non-negative")
        object.__setattr__(self, "in_contact", c)
        object.__setattr__(self, "t_swing", sw)
        object.__setattr__(self, "t_stance", st)

    @classmethod
    def initial(cls, cfg: FeasibilityConfig | None = None) -> "ContactState":
        """All legs in stance and already past the stance minimum."""
        cfg = cfg or FeasibilityConfig()
        return cls((1, 1, 1, 1), (0.0,) * 4, (cfg.t_stance_min,) * 4)

    def active_timer(self, leg: int) -> float:
        return self.t_stance[leg] if self.in_contact[leg] else self.t_swing[leg]

    def mirrored(self) -> "ContactState":
        p = MIRROR_LEGS
        return ContactState(tuple(self.in_contact[i] for i in p), tuple(self.t_swing[i] for i in p),
                            tuple(self.t_stance[i] for i in p))


def action_index(action) -> int:
    a = tuple(int(v) for v in action)
    return a[0] * 8 + a[1] * 4 + a[2] * 2 + a[3]


def action_from_index(idx: int) -> tuple:
    return ((idx >> 3) & 1, (idx >> 2) & 1, (idx >> 1) & 1, idx & 1)


def transition(state: ContactState, action, dt: float) -> ContactState:
    if not dt > 0:
        raise ValidationError("dt must be positive")
    sw, st = list(state.t_swing), list(state.t_stance)
    new = tuple(int(v) for v in action)
    for i in range(N_LEGS):
        if new[i] == state.in_contact[i]:
            if new[i]:
                st[i] += dt
            else:
                sw[i] += dt
        elif new[i]:
            st[i] = dt
        else:
            sw[i] = dt
    return ContactState(new, tuple(sw), tuple(st))


def locked_legs(state: ContactState, cfg: FeasibilityConfig) -> list[bool]:
    """Legs whose current phase has not yet reached its minimum duration."""
    out = []
    for i in range(N_LEGS):
        limit = cfg.t_stance_min if state.in_contact[i] else cfg.t_swing_min
        out.append(state.active_timer(i) < limit - TIME_EPS)
    return out


def feasible_actions(state: ContactState, cfg: FeasibilityConfig | None = None) -> list[tuple]:
    """Feasible next contact flags, ordered by action index."""
    locked = locked_legs(state, cfg or FeasibilityConfig())
    acts = []
    for idx in range(2 ** N_LEGS):
        a = action_from_index(idx)
        if all(a[i] == state.in_contact[i] for i in range(N_LEGS) if locked[i]):
            acts.append(a)
    return acts


@dataclass
class GaitSequence:
    steps: np.ndarray
    dt_node: float = 0.08

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.int8).reshape(-1, N_LEGS)
        if np.any((steps != 0) & (steps != 1)):
            raise ValidationError("gait entries must be 0 or 1")
        if not self.dt_node > 0:
            raise ValidationError("dt_node must be positive")
        self.steps = steps

    def __len__(self) -> int:
        return self.steps.shape[0]

    def __eq__(self, other) -> bool:
        return (isinstance(other, GaitSequence) and self.dt_node == other.dt_node
                and np.array_equal(self.steps, other.steps))

    def key(self) -> bytes:
        return self.steps.tobytes()

    def mirrored(self) -> "GaitSequence":
        return GaitSequence(self.steps[:, list(MIRROR_LEGS)], self.dt_node)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(GAIT_SCHEMA + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", *LEG_NAMES])
        for k, row in enumerate(self.steps):
            w.writerow([f"{k * self.dt_node:.6g}", *(int(v) for v in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GaitSequence":
        lines = text.splitlines()
        if not lines or lines[0].strip() != GAIT_SCHEMA:
            raise ValidationError(f"unsupported gait file version: {lines[0] if lines else ''!r}")
        rows = list(csv.reader(lines[1:]))
        if not rows or rows[0] != ["t", *LEG_NAMES]:
            raise ValidationError("gait file header must be t,LF,RF,LH,RH")
        body = rows[1:]
        steps = np.array([[int(v) for v in r[1:]] for r in body], dtype=np.int8).reshape(-1, N_LEGS)
        times = [float(r[0]) for r in body]
        dt = times[1] - times[0] if len(times) > 1 else 0.08
        return cls(steps, round(dt, 9))


def to_mpc_schedule(gait: GaitSequence, h: float) -> np.ndarray:
    """Repeat each node row ``dt_node / h`` times."""
    ratio = gait.dt_node / h
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9:
        raise ValidationError(f"dt_node {gait.dt_node} is not an integer multiple of h {h}")
    return np.repeat(gait.steps, k, axis=0)


def replay(steps, dt: float, start: ContactState) -> ContactState:
    state = start
    for row in np.asarray(steps).reshape(-1, N_LEGS):
        state = transition(state, row, dt)
    return state


def completion_coins(seed, count: int, n_steps: int) -> np.ndarray:
    """Fair coins of shape (count, n_steps, 4) from a generator keyed by ``seed``.

    ``seed`` may be an int or a tuple of ints (e.g. plan seed and node key).
    """
    key = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    rng = np.random.default_rng([int(v) & 0xFFFFFFFFFFFFFFFF for v in key])
    return rng.integers(0, 2, size=(count, n_steps, N_LEGS), dtype=np.int8)


def sample_completions(partial: GaitSequence, state_at_end: ContactState, target_len: int, seed, count: int,
                       cfg: FeasibilityConfig | None = None, leg_order=(0, 1, 2, 3)) -> np.ndarray:
    """``count`` completions of ``partial`` to ``target_len`` steps, shape (count, target_len, 4).

    Every free leg takes an independent fair coin, which makes each feasible
    action equally likely.  Coins are indexed by absolute step, so the same
    seed yields the same draws whatever the prefix length.  ``leg_order``
    chooses which coin column drives each leg; passing ``MIRROR_LEGS`` gives
    the left-right mirrored draws.
    """
    cfg = cfg or FeasibilityConfig()
    S = len(partial)
    if S > target_len:
        raise ValidationError(f"partial sequence ({S}) longer than target ({target_len})")
    out = np.empty((count, target_len, N_LEGS), dtype=np.int8)
    out[:, :S] = partial.steps
    if S == target_len:
        return out
    coins = completion_coins(seed, count, target_len)[:, :, list(leg_order)]
    dt = partial.dt_node
    contact = np.tile(np.array(state_at_end.in_contact, dtype=np.int8), (count, 1))
    t_sw = np.tile(np.array(state_at_end.t_swing), (count, 1))
    t_st = np.tile(np.array(state_at_end.t_stance), (count, 1))
    for k in range(S, target_len):
        active = np.where(contact == 1, t_st, t_sw)
        limit = np.where(contact == 1, cfg.t_stance_min, cfg.t_swing_min)
        locked = active < limit - TIME_EPS
        a = np.where(locked, contact, coins[:, k])
        same = a == contact
        t_st = np.where(a == 1, np.where(same, t_st + dt, dt), t_st)
        t_sw = np.where(a == 0, np.where(same, t_sw + dt, dt), t_sw)
        contact = a
        out[:, k] = a
    return out


def sample_completion(partial: GaitSequence, state_at_end: ContactState, target_len: int, seed,
                      cfg: FeasibilityConfig | None = None, leg_order=(0, 1, 2, 3)) -> GaitSequence:
    """Single uniformly drawn feasible completion (the first of ``sample_completions``)."""
    if len(partial) == target_len:
        return partial
    steps = sample_completions(partial, state_at_end, target_len, seed, 1, cfg, leg_order)[0]
    return GaitSequence(steps, partial.dt_node)


def legality_violations(steps, dt: float, start: ContactState, cfg: FeasibilityConfig | None = None) -> list[str]:
    """Replay ``steps`` and report every action outside the feasible set."""
    cfg = cfg or FeasibilityConfig()
    bad = []
    state = start
    for k, row in enumerate(np.asarray(steps).reshape(-1, N_LEGS)):
        a = tuple(int(v) for v in row)
        if a not in feasible_actions(state, cfg):
            bad.append(f"step {k}: action {a} infeasible from {state}")
        state = transition(state, a, dt)
    return bad


def phase_durations(steps, dt: float, start: ContactState):
    """Completed phases as ``(leg, in_contact, duration)``; phases still open at the end are omitted.

    A phase already running at the start counts its elapsed time from
    ``start``.
    """
    steps = np.asarray(steps).reshape(-1, N_LEGS)
    out = []
    for i in range(N_LEGS):
        phase = start.in_contact[i]
        run = start.active_timer(i)
        for k in range(steps.shape[0]):
            if steps[k, i] == phase:
                run += dt
            else:
                out.append((i, phase, run))
                phase = int(steps[k, i])
                run = dt
    return out


def short_phases(steps, dt: float, start: ContactState, cfg: FeasibilityConfig | None = None) -> list:
    """Completed phases shorter than their minimum (boundary-truncated ones exempt)."""
    cfg = cfg or FeasibilityConfig()
    out = []
    for leg, contact, dur in phase_durations(steps, dt, start):
        limit = cfg.t_stance_min if contact else cfg.t_swing_min
        if dur < limit - TIME_EPS:
            out.append((leg, contact, dur))
    return out


def swing_term(steps, dt: float, start: ContactState, lam: float, t_swing_ref: float, mode: str = "signed") -> float:
    """Swing-time cost over completed swing phases of a full sequence."""
    if mode not in ("signed", "absolute"):
        raise ValidationError(f"unknown swing penalty mode {mode!r}")
    if lam == 0.0:
        return 0.0
    total = 0.0
    for _, contact, dur in phase_durations(steps, dt, start):
        if contact:
            continue
        diff = t_swing_ref - dur
        total += lam * (diff if mode == "signed" else abs(diff))
    return total


@dataclass
class TrotFiller:
    """Deterministic trot-like continuation used when planning is cut short.

    Diagonal pairs alternate.  A swinging leg lands once it reaches
    ``swing_target``; a pair lifts when both of its legs have been in stance
    for at least ``stance_target`` and the other pair is fully in stance.
    """

    cfg: FeasibilityConfig = field(default_factory=FeasibilityConfig)
    t_swing_ref: float = 0.32

    def next_action(self, state: ContactState) -> tuple:
        swing_target = max(self.cfg.t_swing_min, self.t_swing_ref)
        stance_target = self.cfg.t_stance_min
        a = list(state.in_contact)
        for i in range(N_LEGS):
            if not state.in_contact[i] and state.t_swing[i] >= swing_target - TIME_EPS:
                a[i] = 1
        for pair, other in (TROT_PAIRS, TROT_PAIRS[::-1]):
            ready = all(state.in_contact[i] and state.t_stance[i] >= stance_target - TIME_EPS for i in pair)
            if ready and all(a[j] for j in other):
                for i in pair:
                    a[i] = 0
                break
        return tuple(a)

    def complete(self, partial: GaitSequence, state_at_end: ContactState, target_len: int) -> GaitSequence:
        steps = np.empty((target_len, N_LEGS), dtype=np.int8)
        steps[:len(partial)] = partial.steps
        state = state_at_end
        for k in range(len(partial), target_len):
            a = self.next_action(state)
            steps[k] = a
            state = transition(state, a, partial.dt_node)
        return GaitSequence(steps, partial.dt_node)
