"""Command-line entry points and configuration loading.

Exit codes: 0 ok, 2 configuration error, 3 failed episode, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from . import contact_mdp as mdp
from . import ocp_builder as ob
from . import sim_harness as sh
from . import srb_dynamics as srb
from . import value_function as vfn
from .contact_mdp import ContactState, FeasibilityConfig, GaitSequence, TrotFiller
from .mcts_planner import ConfigError, PlannerConfig, TREE_HEADER, plan, tree_rows
from .rollout_kernel import RolloutContext

EXIT_OK, EXIT_CONFIG, EXIT_EPISODE, EXIT_IO = 0, 2, 3, 4
TREE_SCHEMA = "# schema: mcts_tree v1"
DATASET_SCHEMA = "# schema: vf_dataset v1"
CURVE_SCHEMA = "# schema: loss_curve v1"
SUMMARY_SCHEMA = "# schema: vf_summary v1"
STATE_SCHEMA = "state_snapshot v1"

# section -> key -> expected kind; "vec:n" means a list of n numbers
SCHEMA = {
    "robot": {"mass": "float", "inertia": "vec:3", "hips": "vec:8"},
    "ocp": {"q_x": "vec:12", "r_u": "vec:12", "mu": "float", "f_z_min": "float", "f_z_max": "float?",
            "k_v": "float", "max_reach": "float", "reach_weight": "float"},
    "planner": {"dt_node": "float", "horizon": "float", "M": "int", "lam": "float", "t_swing_ref": "float",
                "exploration_c": "float", "alpha": "float", "budget_iterations": "int?",
                "budget_wall_ms": "float?", "budget_rollouts": "int?", "rollouts_enabled": "bool",
                "vf_enabled": "bool", "stop_at_terminal": "bool", "extraction": "str", "workers": "int",
                "t_swing_min": "float", "t_stance_min": "float", "kind": "str"},
    "sim": {"plant_dt": "float", "mpc_period": "float", "mcts_period": "float", "duration": "float",
            "slope_deg": "float", "vx": "float", "vy": "float", "yaw_rate": "float", "height": "float",
            "gait_frequency": "float", "gait_duty": "float", "pushes": "list", "swing_fraction": "float?",
            "mirror": "bool"},
    "paths": {"dataset": "str?", "model": "str?", "ap_model": "str?", "state": "str?", "replay": "str?"},
    "mode": {"deterministic": "bool", "swing_penalty_mode": "str"},
    "experiment": {"axis": "str", "grid": "list", "trials": "int", "preset": "str", "episodes": "int",
                   "epochs": "int", "batch_size": "int", "head": "str", "max_speed": "float",
                   "workers": "int", "hidden": "list", "dropout": "float"},
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config_error(path: str, msg: str) -> CliError:
    return CliError(f"config error at {path}: {msg}", EXIT_CONFIG)


def _coerce(path: str, kind: str, value):
    optional = kind.endswith("?")
    kind = kind.rstrip("?")
    if value is None:
        if optional:
            return None
        raise _config_error(path, "value required")
    try:
        if kind == "float":
            if isinstance(value, bool):
                raise TypeError
            v = float(value)
            if not math.isfinite(v):
                raise ValueError
            return v
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if kind == "list":
            if not isinstance(value, list):
                raise TypeError
            return value
        if kind.startswith("vec:"):
            n = int(kind[4:])
            arr = np.asarray(value, dtype=float).ravel()
            if arr.size != n or not np.all(np.isfinite(arr)):
                raise ValueError
            return arr
    except (TypeError, ValueError):
        raise _config_error(path, f"expected {kind}, got {value!r}") from None
    raise _config_error(path, f"unsupported kind {kind}")


def parse_config(raw) -> dict:
    """Validate a nested mapping against SCHEMA; unknown keys are errors."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise _config_error("<root>", "top level must be a mapping")
    out = {}
    for section, body in raw.items():
        if section not in SCHEMA:
            raise _config_error(str(section), "unknown section")
        if body is None:
            body = {}
        if not isinstance(body, dict):
            raise _config_error(section, "section must be a mapping")
        out[section] = {}
        for key, value in body.items():
            path = f"{section}.{key}"
            if key not in SCHEMA[section]:
                raise _config_error(path, "unknown key")
            out[section][key] = _coerce(path, SCHEMA[section][key], value)
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise CliError(f"config error at <root>: not valid YAML ({exc})", EXIT_CONFIG) from None
    return parse_config(raw)


@dataclass
class RunConfig:
    params: srb.InertiaParams = field(default_factory=srb.InertiaParams)
    weights: ob.OcpWeights | None = None
    friction: ob.FrictionParams = field(default_factory=ob.FrictionParams)
    footholds: ob.FootholdConfig = field(default_factory=lambda: ob.FootholdConfig(reach_weight=sh.REACH_WEIGHT))
    planner: PlannerConfig = field(default_factory=lambda: PlannerConfig(horizon=0.32, budget_iterations=8))
    kind: str = "mcts_full"
    sim: sh.SimConfig = field(default_factory=sh.SimConfig)
    gait: sh.PeriodicGait = field(default_factory=sh.PeriodicGait)
    pushes: list = field(default_factory=list)
    mirror: bool = False
    paths: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)


def _guard(path: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (srb.ValidationError, ConfigError) as exc:
        raise _config_error(path, str(exc)) from None


def build_run_config(cfg: dict, deterministic: bool = False) -> RunConfig:
    """Turn a validated mapping into module configuration objects."""
    rc = RunConfig()
    robot = cfg.get("robot", {})
    if robot:
        inertia = robot.get("inertia", np.diag(rc.params.I_c))
        rc.params = _guard("robot", srb.InertiaParams, robot.get("mass", rc.params.m), np.diag(inertia))
    ocp = cfg.get("ocp", {})
    if "hips" in robot:
        rc.footholds = replace(rc.footholds, hips=robot["hips"].reshape(4, 2))
    for key in ("k_v", "max_reach", "reach_weight"):
        if key in ocp:
            rc.footholds = replace(rc.footholds, **{key: ocp[key]})
    fr = {k: ocp[k] for k in ("mu", "f_z_min", "f_z_max") if k in ocp}
    if fr:
        rc.friction = replace(rc.friction, **fr)
        _guard("ocp.mu", rc.friction.validate, rc.params)

    p = dict(cfg.get("planner", {}))
    rc.kind = p.pop("kind", rc.kind)
    if rc.kind not in sh.PLANNER_KINDS:
        raise _config_error("planner.kind", f"expected one of {sh.PLANNER_KINDS}, got {rc.kind!r}")
    feas = {k: p.pop(k) for k in ("t_swing_min", "t_stance_min") if k in p}
    if feas:
        p["feasibility"] = _guard("planner.t_swing_min", FeasibilityConfig, **feas)
    mode = cfg.get("mode", {})
    if "swing_penalty_mode" in mode:
        p["swing_penalty_mode"] = mode["swing_penalty_mode"]
    base = {"horizon": 0.32, "budget_iterations": 8}
    base.update(p)
    rc.planner = _guard("planner", PlannerConfig, **base)

    s = dict(cfg.get("sim", {}))
    cmd = ob.VelocityCommand(s.pop("vx", 0.3), s.pop("vy", 0.0), s.pop("yaw_rate", 0.0), s.pop("height", 0.35))
    rc.gait = _guard("sim.gait_frequency", sh.PeriodicGait, s.pop("gait_frequency", 1.4), s.pop("gait_duty", 0.6))
    pushes = s.pop("pushes", [])
    frac = s.pop("swing_fraction", None)
    rc.mirror = s.pop("mirror", False)
    slope = math.radians(s.pop("slope_deg", 0.0))
    det = mode.get("deterministic", True) or deterministic
    rc.sim = _guard("sim", sh.SimConfig, slope=slope, cmd=cmd, deterministic=det, **s)
    for i, item in enumerate(pushes):
        path = f"sim.pushes[{i}]"
        if not isinstance(item, dict) or set(item) - {"start", "duration", "force"} or "start" not in item:
            raise _config_error(path, "expected a mapping with start and optional duration, force")
        force = _coerce(path + ".force", "vec:3", item.get("force", [0.0, 150.0, 0.0]))
        rc.pushes.append(_guard(path, sh.Disturbance, _coerce(path + ".start", "float", item["start"]),
                                _coerce(path + ".duration", "float", item.get("duration", 0.1)), tuple(force)))
    if frac is not None:
        rc.pushes.append(sh.SwingPhasePush(frac))

    if "q_x" in ocp or "r_u" in ocp:
        n = int(round(rc.planner.horizon / rc.sim.mpc_period))
        d = ob.OcpWeights()
        rc.weights = _guard("ocp.q_x", ob.OcpWeights, ocp.get("q_x", d.Q_x), ocp.get("r_u", d.R_u),
                            rc.sim.mpc_period, n)
    rc.paths = dict(cfg.get("paths", {}))
    rc.experiment = dict(cfg.get("experiment", {}))
    return rc


def _read_text(path: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None


def _write_text(out_dir: str, name: str, text: str) -> str:
    try:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {name} under {out_dir}: {exc}", EXIT_IO) from None
    return path


def _load_model(path: str | None, key: str):
    if not path:
        raise _config_error(key, "model file required")
    if not os.path.exists(path):
        raise _config_error(key, f"model file {path} does not exist")
    try:
        return vfn.loads_model(_read_text(path))
    except srb.ValidationError as exc:
        raise _config_error(key, str(exc)) from None


def episode_setup(rc: RunConfig) -> sh.EpisodeSetup:
    setup = sh.EpisodeSetup(planner=rc.planner, params=rc.params, weights=rc.weights, friction=rc.friction,
                            footholds=rc.footholds, gait=rc.gait, mirror=rc.mirror)
    needs_vf = rc.kind in ("mcts_vf", "mcts_hybrid") or rc.planner.vf_enabled
    if needs_vf:
        setup.vf = _load_model(rc.paths.get("model"), "paths.model")
    if rc.kind == "ap":
        setup.ap = _load_model(rc.paths.get("ap_model") or rc.paths.get("model"), "paths.ap_model")
    if rc.kind == "replay":
        path = rc.paths.get("replay")
        if not path:
            raise _config_error("paths.replay", "replay planner needs a gait sequence file")
        try:
            setup.replay = GaitSequence.from_csv(_read_text(path))
        except srb.ValidationError as exc:
            raise _config_error("paths.replay", str(exc)) from None
    return setup


# state snapshots for the plan command

def dump_state(state, feet, cstate: ContactState) -> str:
    doc = {"schema": STATE_SCHEMA, "state": [float(v) for v in state],
           "feet": [[float(v) for v in row] for row in np.asarray(feet).reshape(4, 3)],
           "in_contact": list(cstate.in_contact), "t_swing": list(cstate.t_swing),
           "t_stance": list(cstate.t_stance)}
    return yaml.safe_dump(doc, sort_keys=False)


def load_state(text: str):
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise _config_error("paths.state", f"not valid YAML ({exc})") from None
    if not isinstance(doc, dict) or doc.get("schema") != STATE_SCHEMA:
        raise _config_error("paths.state", f"expected schema {STATE_SCHEMA!r}")
    extra = set(doc) - {"schema", "state", "feet", "in_contact", "t_swing", "t_stance"}
    if extra:
        raise _config_error(f"paths.state.{sorted(extra)[0]}", "unknown key")
    x = _coerce("paths.state.state", "vec:12", doc.get("state"))
    feet = _coerce("paths.state.feet", "vec:12", doc.get("feet")).reshape(4, 3)
    cs = _guard("paths.state", ContactState, doc.get("in_contact", (1, 1, 1, 1)),
                doc.get("t_swing", (0.0,) * 4), doc.get("t_stance", (0.16,) * 4))
    return x, feet, cs


def default_state(rc: RunConfig):
    x = sh.initial_state(rc.sim)
    feet = sh.initial_feet(x, rc.footholds, ob.Terrain(rc.sim.slope))
    return x, feet, ContactState.initial(rc.planner.feasibility)


# commands

def cmd_plan(rc: RunConfig, seed: int, out: str) -> int:
    if rc.planner.vf_enabled:
        vf_model = _load_model(rc.paths.get("model"), "paths.model")
    if rc.paths.get("state"):
        x, feet, cs = load_state(_read_text(rc.paths["state"]))
    else:
        x, feet, cs = default_state(rc)
    weights = rc.weights or ob.OcpWeights(h=rc.sim.mpc_period, N=int(round(rc.planner.horizon / rc.sim.mpc_period)))
    terrain = ob.Terrain(rc.sim.slope)
    ctx = RolloutContext(x, feet, np.array(cs.in_contact), rc.sim.cmd, rc.params, weights, rc.friction, terrain,
                         rc.footholds)
    vf = vfn.node_value_fn(vf_model, ctx, cs) if rc.planner.vf_enabled else None
    seq, stats, tree = _guard("planner", plan, cs, ctx, rc.planner, seed, vf,
                              TrotFiller(rc.planner.feasibility, rc.planner.t_swing_ref))
    _write_text(out, "gait.csv", seq.to_csv())
    buf = io.StringIO()
    buf.write(TREE_SCHEMA + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TREE_HEADER)
    w.writerows(tree_rows(tree))
    _write_text(out, "tree.csv", buf.getvalue())
    print(f"iterations={stats.iterations}")
    print(f"rollouts={stats.qp_solves}")
    print(f"nodes={len(tree.nodes)}")
    print(f"truncated={'true' if stats.truncated else 'false'}")
    print(f"rollout_fraction={stats.rollout_fraction:.6g}")
    print(f"wall_ms={stats.wall_ms:.3f}")
    print("sequence=" + " ".join(str(mdp.action_index(r)) for r in seq.steps))
    return EXIT_OK


def cmd_simulate(rc: RunConfig, seed: int, out: str) -> int:
    setup = episode_setup(rc)
    disturbances = list(rc.pushes)
    if rc.mirror:
        disturbances = [_mirror_push(d) for d in disturbances]
    m = _guard("planner", sh.run_episode, rc.kind, rc.sim, disturbances, setup, seed)
    _write_text(out, "metrics.csv", m.to_csv())
    executed = GaitSequence(m.executed, rc.sim.mpc_period) if m.executed is not None and len(m.executed) else None
    if executed is not None:
        _write_text(out, "executed.csv", executed.to_csv())
    print(f"failed={'true' if m.failed else 'false'}")
    if m.failed:
        print(f"reason={m.fail_reason}")
    print(f"mean_cost={m.mean_cost():.9g}")
    if m.push_time is not None:
        peak, after = m.peak_lateral()
        print(f"peak_vlat={peak:.6g} peak_after={after:.6g} recovery={m.recovery()}")
    return EXIT_EPISODE if m.failed else EXIT_OK


def _mirror_push(d):
    if isinstance(d, sh.Disturbance):
        return sh.Disturbance(d.start, d.duration, (d.force[0], -d.force[1], d.force[2]))
    return replace(d, force=(d.force[0], -d.force[1], d.force[2]))


def cmd_ablate(rc: RunConfig, seed: int, out: str) -> int:
    ex = rc.experiment
    axis = ex.get("axis")
    if axis not in sh.ABLATION_AXES:
        raise _config_error("experiment.axis", f"expected one of {sh.ABLATION_AXES}, got {axis!r}")
    grid = ex.get("grid")
    if not grid:
        raise _config_error("experiment.grid", "grid must be a non-empty list")
    grid = [_coerce(f"experiment.grid[{i}]", "float", v) for i, v in enumerate(grid)]
    pts = _guard("experiment", sh.ablation_sweep, axis, grid, ex.get("trials", 10), rc.sim, episode_setup(rc), seed,
                 workers=ex.get("workers", 1))
    _write_text(out, "sweep.csv", sh.sweep_csv(pts))
    for p in pts:
        print(f"{axis}={p.value:g} mean_cost={p.mean_cost:.6g} failures={p.failures}")
    return EXIT_OK


def cmd_compare(rc: RunConfig, seed: int, out: str) -> int:
    ex = rc.experiment
    preset = ex.get("preset")
    if preset not in sh.COMPARE_PRESETS:
        raise _config_error("experiment.preset", f"expected one of {sh.COMPARE_PRESETS}, got {preset!r}")
    setup = episode_setup(replace(rc, kind="mcts_full"))
    if preset in ("baseline_id_od", "eod_rollout_impact"):
        setup.vf = _load_model(rc.paths.get("model"), "paths.model")
    if preset == "baseline_id_od":
        setup.ap = _load_model(rc.paths.get("ap_model"), "paths.ap_model")
    res = _guard("experiment", sh.compare_experiment, preset, ex.get("trials", 20), rc.sim, setup, seed,
                 ex.get("workers", 1))
    _write_text(out, f"{preset}.csv", res.to_csv())
    _write_text(out, f"{preset}_trace.csv", res.trace_csv())
    for meth in dict.fromkeys(r.method for r in res.records):
        print(f"{meth} mean_cost={res.mean_cost(meth):.6g}")
    return EXIT_OK


def cmd_gen_dataset(rc: RunConfig, seed: int, out: str) -> int:
    ex = rc.experiment
    policy = ex.get("head", "value") == "policy"
    setup = episode_setup(replace(rc, kind="mcts_full"))
    ds, scored = _guard("experiment", sh.generate_dataset, ex.get("episodes", 2), rc.sim, setup, seed,
                        ex.get("max_speed", 0.5), policy)
    path = rc.paths.get("dataset") or os.path.join(out, "dataset.csv")
    _write_dataset(path, ds)
    print(f"rows={len(ds)}")
    print(f"scored_nodes={scored}")
    print(f"excluded={ds.excluded}")
    return EXIT_OK


def _write_dataset(path: str, ds: vfn.VfDataset) -> None:
    d = os.path.dirname(path) or "."
    _write_text(d, os.path.basename(path), DATASET_SCHEMA + "\n" + ds.to_csv())


def read_dataset(path: str) -> vfn.VfDataset:
    text = _read_text(path)
    first, _, rest = text.partition("\n")
    if first.strip() != DATASET_SCHEMA:
        raise _config_error("paths.dataset", f"expected first line {DATASET_SCHEMA!r}")
    try:
        return vfn.VfDataset.from_csv(rest)
    except srb.ValidationError as exc:
        raise _config_error("paths.dataset", str(exc)) from None


def _dataset_path(rc: RunConfig) -> str:
    path = rc.paths.get("dataset")
    if not path:
        raise _config_error("paths.dataset", "dataset file required")
    return path


def cmd_train_vf(rc: RunConfig, seed: int, out: str) -> int:
    ds = read_dataset(_dataset_path(rc))
    if len(ds) < 2:
        raise _config_error("paths.dataset", "need at least two samples")
    X, y = ds.arrays()
    ex = rc.experiment
    head = ex.get("head", "value")
    if head not in ("value", "policy"):
        raise _config_error("experiment.head", f"expected value or policy, got {head!r}")
    hidden = tuple(_coerce(f"experiment.hidden[{i}]", "int", v) for i, v in enumerate(ex.get("hidden", vfn.HIDDEN)))
    res = _guard("experiment", vfn.train, X, y, ex.get("epochs", 50), ex.get("batch_size", 64), seed=seed,
                 hidden=hidden, head=head, dropout=ex.get("dropout", vfn.DROPOUT))
    name = "policy.mlp" if head == "policy" else "value.mlp"
    _write_text(out, name, vfn.dumps_model(res.model))
    rows = [[e, "%.9g" % a, "%.9g" % b, "%.9g" % vfn.step_lr(e)] for e, (a, b) in
            enumerate(zip(res.train_loss, res.val_loss))]
    _write_text(out, "loss_curve.csv", _table(CURVE_SCHEMA, ["epoch", "train_loss", "val_loss", "lr"], rows))
    summary = evaluate_model(res.model, X[res.val_idx], y[res.val_idx])
    _write_text(out, "summary.csv", _table(SUMMARY_SCHEMA, list(summary), [list(summary.values())]))
    for k, v in summary.items():
        print(f"{k}={v}")
    return EXIT_OK


def evaluate_model(model: vfn.MlpModel, X, y) -> dict:
    if model.head == "value":
        pred = vfn.predict(model, X)
        rmse = float(np.sqrt(np.mean((pred - y) ** 2)))
        std = float(np.std(y))
        return {"samples": len(y), "rmse": "%.9g" % rmse, "target_std": "%.9g" % std,
                "rmse_over_std": "%.9g" % (rmse / std if std > 0 else float("nan"))}
    acc = float(np.mean(np.argmax(vfn.predict(model, X), axis=1) == y.astype(int)))
    return {"samples": len(y), "accuracy": "%.9g" % acc}


def cmd_eval_vf(rc: RunConfig, seed: int, out: str) -> int:
    model = _load_model(rc.paths.get("model"), "paths.model")
    X, y = read_dataset(_dataset_path(rc)).arrays()
    if X.shape[1] != model.sizes[0]:
        raise _config_error("paths.model", f"model expects {model.sizes[0]} inputs, dataset has {X.shape[1]}")
    summary = evaluate_model(model, X, y)
    _write_text(out, "eval.csv", _table(SUMMARY_SCHEMA, list(summary), [list(summary.values())]))
    for k, v in summary.items():
        print(f"{k}={v}")
    return EXIT_OK


def _table(schema: str, header, rows) -> str:
    buf = io.StringIO()
    buf.write(schema + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


COMMANDS = {"plan": cmd_plan, "simulate": cmd_simulate, "ablate": cmd_ablate, "compare": cmd_compare,
            "gen-dataset": cmd_gen_dataset, "train-vf": cmd_train_vf, "eval-vf": cmd_eval_vf}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mctsgait", description="Contact planning with MCTS over MPC rollouts.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--deterministic", action="store_true", help="force iteration budgets")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        rc = build_run_config(load_config(args.config), args.deterministic)
        return COMMANDS[args.command](rc, args.seed, args.out)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except (srb.ValidationError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
