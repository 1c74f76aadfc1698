"""Closed-loop plan-on-model simulation and experiment presets.

The plant is the SRB model itself, integrated with RK4, plus external pushes
at the CoM.  Every MPC period the rollout QP is solved on the current
schedule and its first forces are held for the period.  Contact plans come
from MCTS (rollout, value-function or hybrid scoring), a learned action
policy, a periodic gait or a fixed replayed sequence.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import contact_mdp as mdp
from . import ocp_builder as ob
from . import srb_dynamics as srb
from .contact_mdp import ContactState, GaitSequence, TrotFiller
from .mcts_planner import ConfigError, PlannerConfig, plan
from .rollout_kernel import RolloutContext, evaluate
from .srb_dynamics import N_LEGS, ValidationError
from .value_function import VfDataset, ap_plan, context_features, log_policy, log_tree, node_value_fn

METRICS_SCHEMA = "# schema: metrics v1"
METRICS_HEADER = ["t", "cost", "vx", "vy", "vz", "vlat", "px", "py", "pz",
                  "phase_LF", "phase_RF", "phase_LH", "phase_RH"]
PLANNER_KINDS = ("mcts_full", "mcts_vf", "mcts_hybrid", "periodic", "ap", "replay")
FAIL_STREAK = 5
REACH_WEIGHT = 2e3
POST_PUSH_WINDOW = 0.6


def split_seed(parent: int, *index: int) -> int:
    """Child seed from a parent seed and an index path (root -> trial -> plan)."""
    ss = np.random.SeedSequence([int(parent) & 0xFFFFFFFF, *(int(i) & 0xFFFFFFFF for i in index)])
    return int(ss.generate_state(1, np.uint32)[0])


@dataclass
class SimConfig:
    plant_dt: float = 0.002
    mpc_period: float = 0.04
    mcts_period: float = 0.08
    duration: float = 2.0
    slope: float = 0.0
    cmd: ob.VelocityCommand = field(default_factory=lambda: ob.VelocityCommand(0.3))
    deterministic: bool = True
    fall_height: float = 0.15
    fall_tilt: float = 0.8

    def __post_init__(self):
        if not (self.plant_dt > 0 and self.mpc_period > 0 and self.mcts_period > 0 and self.duration > 0):
            raise ValidationError("simulation periods and duration must be positive")
        if not self.mcts_period >= self.mpc_period >= self.plant_dt:
            raise ValidationError("need mcts_period >= mpc_period >= plant_dt")

    @property
    def substeps(self) -> int:
        return max(1, int(round(self.mpc_period / self.plant_dt)))

    @property
    def replan_ticks(self) -> int:
        """MCTS period rounded to a whole number of MPC periods."""
        return max(1, int(round(self.mcts_period / self.mpc_period)))


@dataclass
class Disturbance:
    start: float
    duration: float = 0.1
    force: tuple = (0.0, 150.0, 0.0)

    def __post_init__(self):
        if not self.duration > 0:
            raise ValidationError("disturbance duration must be positive")
        self.force = tuple(float(v) for v in self.force)


@dataclass
class SwingPhasePush:
    """Push timed at ``fraction`` of the first LF swing after ``warmup`` seconds.

    If LF does not lift within ``wait`` seconds the push falls back to
    ``warmup + wait + fraction * nominal_swing``.
    """

    fraction: float
    warmup: float = 0.6
    wait: float = 0.6
    nominal_swing: float = 0.32
    duration: float = 0.1
    force: tuple = (0.0, 150.0, 0.0)


@dataclass
class PeriodicGait:
    frequency: float = 1.4
    duty: float = 0.6
    offsets: tuple = (0.0, 0.5, 0.5, 0.0)

    def __post_init__(self):
        if not 0 < self.duty <= 1:
            raise ValidationError("duty factor must lie in (0, 1]")
        if not self.frequency > 0:
            raise ValidationError("step frequency must be positive")

    @property
    def swing_duration(self) -> float:
        return (1.0 - self.duty) / self.frequency


def periodic_schedule(gait: PeriodicGait, t: float, N: int, h: float) -> np.ndarray:
    """(N, 4) contact flags; leg i stands iff frac(t f + offset_i) < duty."""
    times = t + h * np.arange(N)
    phase = np.mod(times[:, None] * gait.frequency + np.asarray(gait.offsets)[None, :], 1.0)
    return (phase < gait.duty - 1e-12).astype(np.int8)


def recovery_time(vlat, dt: float, threshold: float = 0.03, window: float = 0.1, start_index: int = 0):
    """Seconds after ``start_index`` until |v| stays below ``threshold`` for ``window``.

    Returns None when the series never settles.
    """
    v = np.abs(np.asarray(vlat, dtype=float))
    if v.size == 0:
        raise ValidationError("empty series")
    need = max(1, int(math.ceil(window / dt - 1e-9)))
    below = v < threshold
    run = 0
    for i in range(start_index, v.size):
        run = run + 1 if below[i] else 0
        if run >= need:
            return (i - need + 1 - start_index) * dt
    return None


@dataclass
class Metrics:
    t: np.ndarray
    cost: np.ndarray
    vel: np.ndarray
    vlat: np.ndarray
    pos: np.ndarray
    phases: np.ndarray
    push_time: float | None = None
    push_end: float | None = None
    failed: bool = False
    fail_reason: str = ""
    plan_wall_ms: list = field(default_factory=list)
    plan_stats: list = field(default_factory=list)
    executed: np.ndarray | None = None
    mpc_h: float = 0.04
    window: float = POST_PUSH_WINDOW

    def window_mask(self, start: float | None = None) -> np.ndarray:
        """Ticks in ``[start, start + window)``; the whole run when there was no push."""
        s = self.push_time if start is None else start
        if s is None:
            return np.ones(self.t.shape, dtype=bool)
        return (self.t >= s - 1e-12) & (self.t < s + self.window - 1e-12)

    def mean_cost(self, start: float | None = None) -> float:
        m = self.window_mask(start)
        return float(np.mean(self.cost[m])) if m.any() else float("nan")

    def peak_lateral(self, start: float | None = None) -> tuple[float, float]:
        """(peak |v_lat|, time after push of the peak)."""
        m = self.window_mask(start)
        idx = np.flatnonzero(m)
        j = idx[np.argmax(np.abs(self.vlat[idx]))]
        s = self.push_time or 0.0
        return float(abs(self.vlat[j])), float(self.t[j] - s)

    def recovery(self, threshold: float = 0.03, window: float = 0.1):
        if self.push_end is None:
            return recovery_time(self.vlat, self.mpc_h, threshold, window)
        start = int(np.searchsorted(self.t, self.push_end - 1e-9))
        return recovery_time(self.vlat, self.mpc_h, threshold, window, start)

    @property
    def rollout_fraction(self) -> float:
        vals = [s.rollout_fraction for s in self.plan_stats]
        return float(np.mean(vals)) if vals else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(METRICS_SCHEMA + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for k in range(self.t.size):
            w.writerow(["%.6f" % self.t[k], "%.17g" % self.cost[k], *("%.17g" % v for v in self.vel[k]),
                        "%.17g" % self.vlat[k], *("%.17g" % v for v in self.pos[k]),
                        *(int(v) for v in self.phases[k])])
        return buf.getvalue()


@dataclass
class EpisodeSetup:
    """Planner-side configuration shared by all planner kinds."""

    planner: PlannerConfig = field(default_factory=lambda: PlannerConfig(horizon=0.32, budget_iterations=8))
    params: srb.InertiaParams = field(default_factory=srb.InertiaParams)
    weights: ob.OcpWeights | None = None
    friction: ob.FrictionParams = field(default_factory=ob.FrictionParams)
    footholds: ob.FootholdConfig = field(default_factory=lambda: ob.FootholdConfig(reach_weight=REACH_WEIGHT))
    gait: PeriodicGait | None = None
    vf: object = None
    ap: object = None
    replay: GaitSequence | None = None
    mirror: bool = False
    on_plan: object = None  # called as on_plan(tree, ctx, cstate, seq) after each MCTS plan

    def mpc_weights(self, sim: SimConfig) -> ob.OcpWeights:
        if self.weights is not None:
            return self.weights
        n = int(round(self.planner.horizon / sim.mpc_period))
        return ob.OcpWeights(h=sim.mpc_period, N=n)


def initial_feet(state: np.ndarray, fh: ob.FootholdConfig, terrain: ob.Terrain) -> np.ndarray:
    hips = ob.hip_positions(state, fh.hips)
    return np.column_stack([hips, terrain.height(hips[:, 0])])


def initial_state(sim: SimConfig) -> np.ndarray:
    terrain = ob.Terrain(sim.slope)
    x = srb.SrbState.standing(sim.cmd.target_height).as_vector()
    roll, pitch = terrain.aligned_attitude(0.0)
    x[6], x[7] = roll, pitch
    return x


class _PushClock:
    """Resolves swing-phase-relative pushes while the episode runs."""

    def __init__(self, pushes):
        self.fixed = [p for p in pushes if isinstance(p, Disturbance)]
        self.pending = [p for p in pushes if isinstance(p, SwingPhasePush)]

    def update(self, t: float, lf_lifted: bool, lf_swing_len: float | None) -> None:
        keep = []
        for p in self.pending:
            if t >= p.warmup - 1e-9 and lf_lifted:
                T = lf_swing_len if lf_swing_len else p.nominal_swing
                self.fixed.append(Disturbance(t + p.fraction * T, p.duration, p.force))
            elif t >= p.warmup + p.wait - 1e-9:
                self.fixed.append(Disturbance(t + p.fraction * p.nominal_swing, p.duration, p.force))
            else:
                keep.append(p)
        self.pending = keep

    def force(self, t: float) -> np.ndarray:
        f = np.zeros(3)
        for d in self.fixed:
            if d.start - 1e-12 <= t < d.start + d.duration - 1e-12:
                f += np.asarray(d.force)
        return f

    def first(self):
        return min(self.fixed, key=lambda d: d.start) if self.fixed else None


def _rows_to_ticks(steps: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(steps, k, axis=0)


def run_episode(kind: str, sim: SimConfig, disturbances=(), setup: EpisodeSetup | None = None,
                seed: int = 0) -> Metrics:
    """Simulate one episode and return its metrics."""
    if kind not in PLANNER_KINDS:
        raise ValidationError(f"unknown planner kind {kind!r}")
    setup = setup or EpisodeSetup()
    pcfg = setup.planner
    if kind == "mcts_full":
        pcfg = replace(pcfg, rollouts_enabled=True, vf_enabled=False)
    elif kind == "mcts_vf":
        pcfg = replace(pcfg, rollouts_enabled=False, vf_enabled=True)
    elif kind == "mcts_hybrid":
        pcfg = replace(pcfg, rollouts_enabled=True, vf_enabled=True)
    if setup.mirror:
        pcfg = replace(pcfg, leg_order=mdp.MIRROR_LEGS)
    if kind in ("mcts_full", "mcts_vf", "mcts_hybrid") and sim.deterministic and \
            pcfg.budget_iterations is None and pcfg.budget_rollouts is None:
        raise ConfigError("deterministic episodes need an iteration or rollout budget")
    if kind == "periodic" and setup.gait is None:
        raise ConfigError("periodic planner needs a gait")
    if kind == "ap" and setup.ap is None:
        raise ConfigError("action policy planner needs a model (paths.model)")
    if kind == "replay" and setup.replay is None:
        raise ConfigError("replay planner needs a gait sequence")
    if pcfg.vf_enabled and setup.vf is None:
        raise ConfigError("value function enabled but no model supplied (paths.model)")

    params = setup.params
    weights = setup.mpc_weights(sim)
    h = weights.h
    N = weights.N
    k_node = int(round(pcfg.dt_node / h))
    if abs(pcfg.dt_node / h - k_node) > 1e-9:
        raise ValidationError("dt_node must be a multiple of the MPC period")
    terrain = ob.Terrain(sim.slope)
    cmd = sim.cmd
    fh = setup.footholds.mirrored() if setup.mirror else setup.footholds
    filler = TrotFiller(pcfg.feasibility, pcfg.t_swing_ref)
    if setup.mirror:
        filler = _MirroredFiller(filler)

    x = initial_state(sim)
    feet = initial_feet(x, fh, terrain)
    cstate = ContactState.initial(pcfg.feasibility)
    n_ticks = int(round(sim.duration / sim.mpc_period))
    clock = _PushClock(list(disturbances))

    ts, costs, vels, vlats, poss, phases, executed = [], [], [], [], [], [], []
    metrics = Metrics(np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                      np.zeros((0, 4)), mpc_h=sim.mpc_period)
    plan_ticks = None  # per-MPC-tick schedule of the active plan
    plan_start = 0
    fail_streak = 0
    prev_lf = 1
    plan_index = 0

    for tick in range(n_ticks):
        t = tick * sim.mpc_period
        # contact plan
        if kind == "periodic":
            sched = periodic_schedule(setup.gait, t, N, h)
        else:
            # a replayed sequence is laid out once for the whole episode
            if plan_ticks is None or (kind != "replay" and tick - plan_start >= sim.replan_ticks):
                seq = _make_plan(kind, cstate, x, feet, cmd, params, weights, setup, pcfg, terrain, fh, filler,
                                 seed, plan_index, metrics)
                plan_index += 1
                plan_ticks = _rows_to_ticks(seq.steps, k_node)
                plan_node_state = mdp.replay(seq.steps, pcfg.dt_node, cstate)
                span = n_ticks + N if kind == "replay" else N + sim.replan_ticks
                plan_tail = filler.complete(GaitSequence(np.zeros((0, 4)), pcfg.dt_node), plan_node_state,
                                            int(math.ceil(span / k_node)) + 1)
                plan_ticks = np.vstack([plan_ticks, _rows_to_ticks(plan_tail.steps, k_node)])
                plan_start = tick
            j = tick - plan_start
            sched = plan_ticks[j:j + N]
        sched = np.asarray(sched, dtype=np.int8)

        # push timing keyed on LF lift-off
        lf_lift = prev_lf == 1 and sched[0, 0] == 0
        swing_len = None
        if lf_lift:
            run = int(np.argmax(sched[:, 0] == 1)) if np.any(sched[:, 0] == 1) else sched.shape[0]
            swing_len = run * h if run < sched.shape[0] else None
            if kind == "periodic":
                swing_len = setup.gait.swing_duration
        clock.update(t, lf_lift, swing_len)
        prev_lf = int(sched[0, 0])

        # touchdowns get Raibert footholds
        contacts_prev = np.array(cstate.in_contact)
        ref = ob.build_reference(x, cmd, N, h, params, sched, terrain)
        planned_feet = ob.plan_footholds(sched, feet, contacts_prev, x, ref, h, fh, terrain)
        feet = planned_feet[0].copy()

        ctx = RolloutContext(x, feet, sched[0], cmd, params, weights, setup.friction, terrain, fh)
        res = evaluate(sched, ctx)
        if res.status == "optimal":
            u0 = res.forces[0]
            fail_streak = 0
        else:
            u0 = ref.forces[0]
            fail_streak += 1

        e = x - ref.states[0]
        du = u0 - ref.forces[0]
        stage = h * float(e @ (weights.Q_x * e) + du @ (weights.R_u * du))
        yaw = x[8]
        ts.append(t)
        costs.append(stage)
        vels.append(x[3:6].copy())
        vlats.append(-math.sin(yaw) * x[3] + math.cos(yaw) * x[4])
        poss.append(x[0:3].copy())
        phases.append(sched[0].copy())
        executed.append(sched[0].copy())

        if fail_streak >= FAIL_STREAK:
            metrics.failed, metrics.fail_reason = True, "persistently infeasible QP"
            break
        # plant
        try:
            for sub in range(sim.substeps):
                tp = t + sub * sim.plant_dt
                x = srb.step(x, feet, u0, sched[0], params, sim.plant_dt, "rk4", clock.force(tp + 0.5 * sim.plant_dt))
        except (srb.SingularityError, ValidationError) as exc:
            metrics.failed, metrics.fail_reason = True, f"plant error: {exc}"
            break
        cstate = mdp.transition(cstate, sched[0], h)
        if x[2] - float(terrain.height(x[0])) < sim.fall_height or max(abs(x[6]), abs(x[7] - ref.states[0, 7])) > sim.fall_tilt:
            metrics.failed, metrics.fail_reason = True, "fall"
            break

    metrics.t = np.array(ts)
    metrics.cost = np.array(costs)
    metrics.vel = np.array(vels).reshape(-1, 3)
    metrics.vlat = np.array(vlats)
    metrics.pos = np.array(poss).reshape(-1, 3)
    metrics.phases = np.array(phases).reshape(-1, 4)
    metrics.executed = np.array(executed, dtype=np.int8).reshape(-1, 4)
    first = clock.first()
    if first is not None:
        metrics.push_time = first.start
        metrics.push_end = first.start + first.duration
    return metrics


class _MirroredFiller:
    """Trot filler acting in the mirrored leg frame."""

    def __init__(self, base: TrotFiller):
        self.base = base

    def complete(self, partial: GaitSequence, state_at_end: ContactState, target_len: int) -> GaitSequence:
        out = self.base.complete(partial.mirrored(), state_at_end.mirrored(), target_len)
        return out.mirrored()


def _make_plan(kind, cstate, x, feet, cmd, params, weights, setup, pcfg, terrain, fh, filler, seed, plan_index,
               metrics) -> GaitSequence:
    if kind == "replay":
        seq = setup.replay
        if abs(seq.dt_node - pcfg.dt_node) > 1e-12:
            raise ConfigError(f"replayed sequence has node step {seq.dt_node}, planner uses {pcfg.dt_node}")
        bad = mdp.legality_violations(seq.steps, pcfg.dt_node, cstate, pcfg.feasibility)
        if bad:
            raise ValidationError(f"replayed sequence is not executable: {bad[0]}")
        return seq
    ctx = RolloutContext(x, feet, np.array(cstate.in_contact), cmd, params, weights, setup.friction, terrain, fh)
    if kind == "ap":
        return ap_plan(setup.ap, ctx, cstate, pcfg)
    vf = None
    if pcfg.vf_enabled:
        vf = node_value_fn(setup.vf, ctx, cstate)
    seq, stats, tree = plan(cstate, ctx, pcfg, split_seed(seed, plan_index), vf, filler)
    if setup.on_plan is not None:
        setup.on_plan(tree, ctx, cstate, seq)
    metrics.plan_stats.append(stats)
    metrics.plan_wall_ms.append(stats.wall_ms)
    return seq


# experiment presets

SWING_FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8)
ABLATION_AXES = ("tree_dt", "num_simulations", "horizon", "replan_freq")
SWEEP_SCHEMA = "# schema: ablation_sweep v1"
SWEEP_HEADER = ["axis", "value", "trials", "failures", "mean_cost", "ci95", "mean_wall_ms", "median_wall_ms"]
COMPARE_SCHEMA = "# schema: compare_trials v1"
COMPARE_HEADER = ["preset", "condition", "method", "trial", "seed", "mean_cost", "peak_vlat", "peak_after",
                  "recovery", "failed"]
TRACE_SCHEMA = "# schema: lateral_trace v1"
COMPARE_PRESETS = ("baseline_id_od", "eod_rollout_impact", "periodic_vs_mcts")


def _csv(schema: str, header, rows) -> str:
    buf = io.StringIO()
    buf.write(schema + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.9g" % v
    return str(v)


def _run_all(jobs, workers: int):
    """Run (kind, sim, disturbances, setup, seed) jobs, results in job order."""
    if workers <= 1:
        return [run_episode(*j) for j in jobs]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda j: run_episode(*j), jobs))


@dataclass
class SweepPoint:
    axis: str
    value: float
    costs: list
    failures: int
    wall_ms: list

    @property
    def mean_cost(self) -> float:
        return float(np.mean(self.costs)) if self.costs else float("nan")

    @property
    def std_err(self) -> float:
        n = len(self.costs)
        return float(np.std(self.costs, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")

    def row(self) -> list:
        w = self.wall_ms
        return [self.axis, _fmt(self.value), len(self.costs) + self.failures, self.failures, _fmt(self.mean_cost),
                _fmt(1.96 * self.std_err), _fmt(float(np.mean(w)) if w else float("nan")),
                _fmt(float(np.median(w)) if w else float("nan"))]


def push_protocol(trials: int, fractions=SWING_FRACTIONS, seed: int = 0):
    """(disturbances, seed) pairs for ``trials`` repetitions at each swing fraction."""
    return [([SwingPhasePush(f)], split_seed(seed, j, i)) for j in range(trials) for i, f in enumerate(fractions)]


def apply_axis(axis: str, value: float, sim: SimConfig, setup: EpisodeSetup):
    """Copies of ``sim`` and ``setup`` with one ablation parameter changed."""
    if axis not in ABLATION_AXES:
        raise ValidationError(f"unknown ablation axis {axis!r}")
    pcfg = setup.planner
    if axis == "tree_dt":
        pcfg = replace(pcfg, dt_node=float(value))
    elif axis == "num_simulations":
        pcfg = replace(pcfg, M=int(value))
    elif axis == "horizon":
        pcfg = replace(pcfg, horizon=float(value))
    else:
        if not value > 0:
            raise ValidationError("replanning frequency must be positive")
        sim = replace(sim, mcts_period=1.0 / float(value))
    return sim, replace(setup, planner=pcfg, weights=None if axis == "horizon" else setup.weights)


def ablation_sweep(axis: str, grid, trials: int = 10, sim: SimConfig | None = None,
                   setup: EpisodeSetup | None = None, seed: int = 0, fractions=SWING_FRACTIONS,
                   kind: str = "mcts_full", workers: int = 1) -> list[SweepPoint]:
    """Push-protocol tracking cost and planner wall time per grid value.

    Trials share seeds across grid points so the comparison uses common
    random numbers.  Failed episodes are counted and left out of the means.
    """
    sim = sim or SimConfig()
    setup = setup or EpisodeSetup()
    if len(grid) == 0:
        raise ValidationError("grid must not be empty")
    points = []
    for value in sorted(grid):
        s2, u2 = apply_axis(axis, value, sim, setup)
        jobs = [(kind, s2, d, u2, sd) for d, sd in push_protocol(trials, fractions, seed)]
        results = _run_all(jobs, workers)
        costs = [m.mean_cost() for m in results if not m.failed]
        wall = [w for m in results for w in m.plan_wall_ms]
        points.append(SweepPoint(axis, float(value), costs, sum(m.failed for m in results), wall))
    return points


def sweep_csv(points) -> str:
    return _csv(SWEEP_SCHEMA, SWEEP_HEADER, [p.row() for p in points])


@dataclass
class TrialRecord:
    preset: str
    condition: str
    method: str
    trial: int
    seed: int
    metrics: Metrics

    def row(self) -> list:
        m = self.metrics
        peak, after = m.peak_lateral() if m.t.size else (float("nan"), float("nan"))
        return [self.preset, self.condition, self.method, self.trial, self.seed, _fmt(m.mean_cost()), _fmt(peak),
                _fmt(after), _fmt(m.recovery()), _fmt(m.failed)]


@dataclass
class CompareResult:
    preset: str
    records: list

    def select(self, method: str, condition: str | None = None) -> list:
        return [r for r in self.records if r.method == method and (condition is None or r.condition == condition)]

    def mean_cost(self, method: str, condition: str | None = None, include_failed: bool = False) -> float:
        """Mean over trials of the post-push cost.

        Failed trials are skipped unless ``include_failed``, in which case they
        contribute the mean cost of the trace recorded before the failure.
        """
        vals = []
        for r in self.select(method, condition):
            if not r.metrics.failed:
                vals.append(r.metrics.mean_cost())
            elif include_failed and r.metrics.cost.size:
                vals.append(float(np.mean(r.metrics.cost)))
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        return _csv(COMPARE_SCHEMA, COMPARE_HEADER, [r.row() for r in self.records])

    def trace_csv(self, condition: str | None = None) -> str:
        """Mean lateral velocity per method, aligned on the push start."""
        methods = list(dict.fromkeys(r.method for r in self.records))
        traces = {}
        length = None
        for meth in methods:
            rows = []
            for r in self.select(meth, condition):
                m = r.metrics
                i0 = int(np.searchsorted(m.t, (m.push_time or 0.0) - 1e-9))
                rows.append(m.vlat[i0:])
            n = min(len(v) for v in rows)
            traces[meth] = np.mean([v[:n] for v in rows], axis=0)
            length = n if length is None else min(length, n)
        h = self.records[0].metrics.mpc_h
        out = [[_fmt(k * h)] + [_fmt(traces[m][k]) for m in methods] for k in range(length or 0)]
        return _csv(TRACE_SCHEMA, ["t_after_push", *methods], out)


def random_push(seed: int, earliest: float = 0.8, latest: float = 1.2) -> Disturbance:
    rng = np.random.default_rng(seed)
    return Disturbance(float(earliest + (latest - earliest) * rng.random()))


def eod_setup(setup: EpisodeSetup, m_rollouts: int, rollout_budget: int) -> EpisodeSetup:
    """Hybrid planner with ``m_rollouts`` per simulation under a fixed QP-solve budget."""
    pcfg = replace(setup.planner, M=int(m_rollouts), budget_iterations=None, budget_rollouts=int(rollout_budget))
    return replace(setup, planner=pcfg)


EOD_SLOPE = math.radians(10.0)
EOD_SPEED = 0.6
EOD_ROLLOUT_BUDGET = 160


def compare_experiment(preset: str, trials: int = 20, sim: SimConfig | None = None,
                       setup: EpisodeSetup | None = None, seed: int = 0, workers: int = 1,
                       hybrid_rollouts=(5, 20, 40), rollout_budget: int = EOD_ROLLOUT_BUDGET,
                       trot_frequencies=(1.4, 2.0)) -> CompareResult:
    """Run one of the method-comparison protocols.

    ``baseline_id_od``: full rollouts, value function and action policy at an
    in-distribution (0.3 m/s, flat) and an out-of-distribution (0.6 m/s,
    sloped) condition.  ``eod_rollout_impact``: value-function-only against
    hybrid planners with several rollout counts on the sloped condition, all
    under the same QP-solve budget.  ``periodic_vs_mcts``: full-rollout MCTS
    against periodic trots under seeded lateral pushes.
    """
    if preset not in COMPARE_PRESETS:
        raise ValidationError(f"unknown comparison preset {preset!r}")
    sim = sim or SimConfig()
    setup = setup or EpisodeSetup()
    seeds = [split_seed(seed, j) for j in range(trials)]
    jobs, labels = [], []

    def add(condition, method, kind, s, u, dist):
        for j, sd in enumerate(seeds):
            jobs.append((kind, s, dist(sd), u, sd))
            labels.append((condition, method, j, sd))

    eod_sim = replace(sim, slope=EOD_SLOPE, cmd=replace(sim.cmd, vx=EOD_SPEED))
    push = lambda sd: [SwingPhasePush(SWING_FRACTIONS[sd % len(SWING_FRACTIONS)])]
    if preset == "baseline_id_od":
        if setup.vf is None or setup.ap is None:
            raise ConfigError("baseline_id_od needs a value-function model and an action-policy model (paths.model)")
        for cond, s in (("ID", sim), ("OD", eod_sim)):
            add(cond, "full", "mcts_full", s, setup, push)
            add(cond, "vf", "mcts_vf", s, setup, push)
            add(cond, "ap", "ap", s, setup, push)
    elif preset == "eod_rollout_impact":
        if setup.vf is None:
            raise ConfigError("eod_rollout_impact needs a value-function model (paths.model)")
        vf_iters = max(1, rollout_budget // min(hybrid_rollouts))
        vf_setup = replace(setup, planner=replace(setup.planner, budget_iterations=vf_iters, budget_rollouts=None))
        add("EOD", "vf", "mcts_vf", eod_sim, vf_setup, push)
        for m in hybrid_rollouts:
            add("EOD", f"hybrid_{m}", "mcts_hybrid", eod_sim, eod_setup(setup, m, rollout_budget), push)
    else:
        dist = lambda sd: [random_push(sd)]
        add("push", "mcts", "mcts_full", sim, setup, dist)
        for f in trot_frequencies:
            add("push", f"trot_{f:g}", "periodic", sim, replace(setup, gait=PeriodicGait(f, 0.6)), dist)
    results = _run_all(jobs, workers)
    return CompareResult(preset, [TrialRecord(preset, c, meth, j, sd, m)
                                  for (c, meth, j, sd), m in zip(labels, results)])


def generate_dataset(episodes: int, sim: SimConfig | None = None, setup: EpisodeSetup | None = None,
                     seed: int = 0, max_speed: float = 0.5, policy: bool = False) -> tuple[VfDataset, int]:
    """Log full-rollout MCTS trees from pushed episodes at random speeds up to ``max_speed``.

    Returns the dataset and the number of rollout-scored nodes seen.  With
    ``policy`` the samples are (prefix, next action) pairs along each chosen
    sequence instead of node costs.
    """
    sim = sim or SimConfig()
    setup = setup or EpisodeSetup()
    sink = VfDataset()
    scored = [0]

    def on_plan(tree, ctx, cstate, seq):
        context = context_features(ctx, cstate)
        if policy:
            log_policy(seq, context, sink)
        else:
            scored[0] += sum(1 for n in tree.nodes[1:] if n.p_bar is not None)
            log_tree(tree, context, sink)

    u = replace(setup, on_plan=on_plan)
    for e in range(episodes):
        sd = split_seed(seed, e)
        rng = np.random.default_rng(sd)
        s = replace(sim, cmd=replace(sim.cmd, vx=float(max_speed * rng.random())))
        run_episode("mcts_full", s, [SwingPhasePush(float(rng.choice(SWING_FRACTIONS)))], u, sd)
    return sink, scored[0]
