"""Monte-Carlo tree search over contact states.

Each iteration selects a node by lowest lower-confidence bound, creates all
of its feasible children, scores every child (mean of M completed-sequence
rollouts plus a swing-time term, a learned value, or a blend of both) and
backs each score up to the root.
"""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import contact_mdp as mdp
from .contact_mdp import ContactState, FeasibilityConfig, GaitSequence, TrotFiller
from .rollout_kernel import RolloutContext, evaluate_many
from .srb_dynamics import N_LEGS, ValidationError

LCB_EPS = 1e-9


class PlannerLogicError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class PlannerConfig:
    dt_node: float = 0.08
    horizon: float = 0.64
    M: int = 120
    lam: float = 5.0
    t_swing_ref: float = 0.32
    exploration_c: float = 2.0
    alpha: float = 0.75
    budget_iterations: int | None = None
    budget_wall_ms: float | None = 80.0
    budget_rollouts: int | None = None
    rollouts_enabled: bool = True
    vf_enabled: bool = False
    swing_penalty_mode: str = "signed"
    stop_at_terminal: bool = True
    extraction: str = "mean"
    workers: int = 1
    leg_order: tuple = (0, 1, 2, 3)
    feasibility: FeasibilityConfig = field(default_factory=FeasibilityConfig)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")
        if int(self.M) < 1:
            raise ValidationError("M must be at least 1")
        if not self.dt_node > 0 or not self.horizon > 0:
            raise ValidationError("dt_node and horizon must be positive")
        ratio = self.horizon / self.dt_node
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValidationError(f"horizon {self.horizon} is not a multiple of dt_node {self.dt_node}")
        if not (self.rollouts_enabled or self.vf_enabled):
            raise ValidationError("at least one of rollouts or value function must be enabled")
        if self.swing_penalty_mode not in ("signed", "absolute"):
            raise ValidationError(f"unknown swing penalty mode {self.swing_penalty_mode!r}")
        if self.extraction not in ("mean", "best"):
            raise ValidationError(f"unknown extraction {self.extraction!r}")
        self.M = int(self.M)
        self.leg_order = tuple(int(v) for v in self.leg_order)

    @property
    def depth(self) -> int:
        return int(round(self.horizon / self.dt_node))


@dataclass
class Node:
    id: int
    parent: int | None
    depth: int
    state: ContactState
    action: tuple | None
    visits: int = 0
    cost_sum: float = 0.0
    children: list = field(default_factory=list)
    terminal: bool = False
    expanded: bool = False
    exhausted: bool = False
    p_bar: float | None = None
    p_vf: float | None = None
    p_combined: float | None = None
    penalized: bool = False

    @property
    def mean_cost(self) -> float:
        return self.cost_sum / self.visits if self.visits else 0.0


@dataclass
class PlanStats:
    iterations: int = 0
    nodes: int = 1
    rollouts: int = 0
    qp_solves: int = 0
    wall_ms: float = 0.0
    rollout_fraction: float = 0.0
    converged: bool = False
    truncated: bool = False


class Tree:
    def __init__(self, root_state: ContactState, depth: int):
        self.horizon_depth = depth
        self.nodes = [Node(0, None, 0, root_state, None, terminal=(depth == 0))]

    @property
    def root(self) -> Node:
        return self.nodes[0]

    def sequence(self, nid: int) -> np.ndarray:
        acts = []
        node = self.nodes[nid]
        while node.parent is not None:
            acts.append(node.action)
            node = self.nodes[node.parent]
        return np.array(acts[::-1], dtype=np.int8).reshape(-1, N_LEGS)

    def ancestors(self, nid: int):
        node = self.nodes[nid]
        while True:
            yield node
            if node.parent is None:
                return
            node = self.nodes[node.parent]


def combine_costs(p_bar: float | None, p_vf: float | None, alpha: float) -> float:
    if p_bar is None and p_vf is None:
        raise PlannerLogicError("no cost available to combine")
    if p_vf is None:
        return p_bar
    if p_bar is None:
        return p_vf
    return alpha * p_bar + (1.0 - alpha) * p_vf


def lcb(node: Node, parent_visits: int, c: float, scale: float) -> float:
    return node.mean_cost - c * scale * math.sqrt(math.log(parent_visits + 1) / (node.visits + LCB_EPS))


def _child_order(tree: Tree, node: Node, leg_order) -> list[int]:
    if leg_order == (0, 1, 2, 3):
        return node.children
    # rank children by the action index seen through the leg permutation
    return sorted(node.children,
                  key=lambda cid: mdp.action_index(tuple(tree.nodes[cid].action[i] for i in leg_order)))


def select(tree: Tree, c: float, skip_exhausted: bool = False, leg_order=(0, 1, 2, 3)) -> int:
    """Descend by lowest LCB to the first unexpanded or terminal node."""
    scale = abs(tree.root.mean_cost)
    node = tree.root
    while node.expanded and not node.terminal:
        best, best_val = None, math.inf
        for cid in _child_order(tree, node, leg_order):
            child = tree.nodes[cid]
            if skip_exhausted and child.exhausted:
                continue
            val = lcb(child, node.visits, c, scale)
            if val < best_val:
                best, best_val = child, val
        if best is None:
            return node.id
        node = best
    return node.id


def expand(tree: Tree, nid: int, cfg: PlannerConfig) -> list[int]:
    node = tree.nodes[nid]
    if node.terminal:
        raise PlannerLogicError(f"node {nid} is terminal")
    if node.expanded:
        raise PlannerLogicError(f"node {nid} is already expanded")
    new = []
    for a in mdp.feasible_actions(node.state, cfg.feasibility):
        cid = len(tree.nodes)
        d = node.depth + 1
        tree.nodes.append(Node(cid, nid, d, mdp.transition(node.state, a, cfg.dt_node), a,
                               terminal=(d == tree.horizon_depth)))
        node.children.append(cid)
        new.append(cid)
    node.expanded = True
    return new


def backpropagate(tree: Tree, nid: int, cost: float) -> None:
    for node in tree.ancestors(nid):
        node.visits += 1
        node.cost_sum += cost


def _mark_exhausted(tree: Tree, nid: int) -> None:
    for node in tree.ancestors(nid):
        if node.terminal or (node.expanded and all(tree.nodes[c].exhausted for c in node.children)):
            node.exhausted = True
        else:
            return


def prefix_key(seq: np.ndarray, leg_order=(0, 1, 2, 3)) -> int:
    """Stable 63-bit hash of a contact prefix, in the leg frame given by ``leg_order``."""
    canon = np.asarray(seq, dtype=np.int8).reshape(-1, N_LEGS)[:, list(leg_order)]
    digest = hashlib.blake2b(canon.tobytes() + bytes([canon.shape[0] & 0xFF]), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def completion_seed(plan_seed: int, seq: np.ndarray, leg_order=(0, 1, 2, 3)) -> tuple:
    """Generator key for the completions of the node reached by ``seq``."""
    return (int(plan_seed), prefix_key(seq, leg_order))


class RolloutEvaluator:
    """Scores full node sequences with cached MPC rollouts and the swing term."""

    def __init__(self, ctx: RolloutContext, root: ContactState, cfg: PlannerConfig):
        self.ctx = ctx
        self.root = root
        self.cfg = cfg
        self.cache: dict[bytes, float] = {}
        self.penalized: set[bytes] = set()
        self.qp_solves = 0
        self.requested = 0
        k = cfg.dt_node / ctx.weights.h
        self.repeat = int(round(k))
        if abs(k - self.repeat) > 1e-9 or self.repeat < 1:
            raise ValidationError(f"dt_node {cfg.dt_node} is not a multiple of the MPC step {ctx.weights.h}")
        if self.repeat * cfg.depth != ctx.weights.N:
            raise ValidationError(f"tree horizon spans {self.repeat * cfg.depth} MPC steps but N={ctx.weights.N}")

    def completions(self, seq: np.ndarray, node_state: ContactState, plan_seed: int) -> list[np.ndarray]:
        cfg = self.cfg
        if seq.shape[0] == cfg.depth:
            return [seq] * cfg.M
        batch = mdp.sample_completions(GaitSequence(seq, cfg.dt_node), node_state, cfg.depth,
                                       completion_seed(plan_seed, seq, cfg.leg_order), cfg.M, cfg.feasibility,
                                       cfg.leg_order)
        return list(batch)

    def solve_missing(self, full_seqs: list[np.ndarray]) -> None:
        todo, keys = [], []
        for s in full_seqs:
            key = s.tobytes()
            if key not in self.cache and key not in keys:
                keys.append(key)
                todo.append(np.repeat(s, self.repeat, axis=0))
        results = evaluate_many(todo, self.ctx, self.cfg.workers)
        self.qp_solves += len(todo)
        for key, res in zip(keys, results):
            self.cache[key] = res.p_tilde
            if res.status != "optimal":
                self.penalized.add(key)

    def sequence_cost(self, full: np.ndarray) -> float:
        cfg = self.cfg
        swing = mdp.swing_term(full, cfg.dt_node, self.root, cfg.lam, cfg.t_swing_ref, cfg.swing_penalty_mode)
        return self.cache[full.tobytes()] + swing

    def simulate(self, completions: list[np.ndarray]) -> tuple[float, bool]:
        """Mean cost over the given completed sequences; flags penalized rollouts."""
        self.requested += len(completions)
        total = math.fsum(self.sequence_cost(s) for s in completions)
        pen = any(s.tobytes() in self.penalized for s in completions)
        return total / len(completions), pen


def _vf_values(vf, tree: Tree, ids: list[int]) -> list[float]:
    seqs = [tree.sequence(i) for i in ids]
    return [float(v) for v in vf(seqs)]


def plan(root_state: ContactState, ctx: RolloutContext, cfg: PlannerConfig, seed: int = 0, vf=None,
         filler: TrotFiller | None = None):
    """Run MCTS and return ``(GaitSequence, PlanStats, Tree)``.

    ``vf`` maps a list of node prefixes (arrays of shape (d, 4)) to predicted
    costs; it is required when ``cfg.vf_enabled``.
    """
    if cfg.vf_enabled and vf is None:
        raise ConfigError("value function enabled but no model supplied (paths.model)")
    t_start = time.perf_counter()
    depth = cfg.depth
    tree = Tree(root_state, depth)
    stats = PlanStats()
    evaluator = RolloutEvaluator(ctx, root_state, cfg) if cfg.rollouts_enabled else None
    filler = filler or TrotFiller(cfg.feasibility, cfg.t_swing_ref)
    use_vf = cfg.vf_enabled and (cfg.alpha < 1.0 or not cfg.rollouts_enabled)
    scored_by_rollouts = 0
    scored = 0

    def out_of_budget() -> bool:
        if cfg.budget_iterations is not None and stats.iterations >= cfg.budget_iterations:
            return True
        if cfg.budget_rollouts is not None and evaluator is not None and evaluator.qp_solves >= cfg.budget_rollouts:
            return True
        if cfg.budget_iterations is None and cfg.budget_rollouts is None and cfg.budget_wall_ms is not None:
            return (time.perf_counter() - t_start) * 1e3 >= cfg.budget_wall_ms
        return False

    skip = not cfg.stop_at_terminal
    while True:
        if skip and tree.root.exhausted:
            stats.converged = True
            break
        if out_of_budget():
            stats.truncated = True
            break
        nid = select(tree, cfg.exploration_c, skip, cfg.leg_order)
        node = tree.nodes[nid]
        if node.terminal:
            if cfg.stop_at_terminal:
                stats.converged = True
                break
            _mark_exhausted(tree, nid)
            continue
        new = expand(tree, nid, cfg)
        p_bars = [None] * len(new)
        if evaluator is not None:
            comps = [evaluator.completions(tree.sequence(c), tree.nodes[c].state, seed) for c in new]
            evaluator.solve_missing([s for cs in comps for s in cs])
            for j, c in enumerate(new):
                p_bars[j], tree.nodes[c].penalized = evaluator.simulate(comps[j])
        p_vfs = _vf_values(vf, tree, new) if use_vf else [None] * len(new)
        for j, c in enumerate(new):
            child = tree.nodes[c]
            child.p_bar, child.p_vf = p_bars[j], p_vfs[j]
            child.p_combined = combine_costs(child.p_bar, child.p_vf, cfg.alpha)
            backpropagate(tree, c, child.p_combined)
            scored += 1
            scored_by_rollouts += child.p_bar is not None
            if child.terminal and skip:
                _mark_exhausted(tree, c)
        stats.iterations += 1

    seq = extract(tree, cfg, filler)
    stats.nodes = len(tree.nodes)
    if evaluator is not None:
        stats.rollouts = evaluator.requested
        stats.qp_solves = evaluator.qp_solves
    stats.rollout_fraction = scored_by_rollouts / scored if scored else 0.0
    stats.wall_ms = (time.perf_counter() - t_start) * 1e3
    return seq, stats, tree


def extract(tree: Tree, cfg: PlannerConfig, filler: TrotFiller) -> GaitSequence:
    """Root-to-leaf sequence, completed by the filler when the tree is too shallow."""
    if cfg.extraction == "best":
        leaf = _best_terminal(tree)
    else:
        leaf = tree.root
        while leaf.children:
            best = None
            for cid in _child_order(tree, leaf, cfg.leg_order):
                ch = tree.nodes[cid]
                if ch.visits and (best is None or ch.mean_cost < best.mean_cost):
                    best = ch
            if best is None:
                break
            leaf = best
    seq = GaitSequence(tree.sequence(leaf.id), cfg.dt_node)
    if len(seq) < tree.horizon_depth:
        seq = filler.complete(seq, leaf.state, tree.horizon_depth)
    return seq


def _best_terminal(tree: Tree) -> Node:
    best, best_key = tree.root, None
    for node in tree.nodes:
        if not node.terminal or node.p_combined is None:
            continue
        key = (node.p_combined, [mdp.action_index(a) for a in tree.sequence(node.id)])
        if best_key is None or key < best_key:
            best, best_key = node, key
    return best


TREE_HEADER = ["id", "parent", "depth", "action", "visits", "p_bar", "p_vf", "p_combined",
               "c_LF", "c_RF", "c_LH", "c_RH", "tsw_LF", "tsw_RF", "tsw_LH", "tsw_RH",
               "tst_LF", "tst_RF", "tst_LH", "tst_RH"]


def tree_rows(tree: Tree):
    def fmt(v):
        return "" if v is None else "%.17g" % v

    for n in tree.nodes:
        yield [n.id, "" if n.parent is None else n.parent, n.depth,
               "" if n.action is None else mdp.action_index(n.action), n.visits,
               fmt(n.p_bar), fmt(n.p_vf), fmt(n.p_combined), *n.state.in_contact,
               *("%.6g" % v for v in n.state.t_swing), *("%.6g" % v for v in n.state.t_stance)]
