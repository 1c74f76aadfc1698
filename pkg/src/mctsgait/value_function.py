"""Learned node-cost estimates for the planner.

An MLP with batch-norm and dropout maps a 78-entry input (robot errors, feet,
phase timers and a padded 12-step contact prefix) to a predicted node cost.
The same trunk with a 16-way head gives the action-policy baseline, which
picks the next contact action directly.
"""
from __future__ import annotations

import copy
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import contact_mdp as mdp
from . import ocp_builder as ob
from .contact_mdp import ContactState, GaitSequence
from .srb_dynamics import N_LEGS, ValidationError

S_MAX = 12
CONTEXT_DIM = 30
INPUT_DIM = CONTEXT_DIM + S_MAX * N_LEGS
HIDDEN = (512, 512, 512)
N_ACTIONS = 16
MODEL_MAGIC = "MLPV1"
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
DROPOUT = 0.1


def context_features(ctx, cstate: ContactState) -> np.ndarray:
    """The 30 non-sequence inputs: state errors, feet relative to the CoM, timers.

    Foot offsets are expressed in the yaw-aligned frame so the features do not
    depend on the heading.
    """
    x = ctx.state0
    ref = ob.build_reference(x, ctx.cmd, 1, ctx.weights.h, ctx.params, terrain=ctx.terrain).states[0]
    e = x - ref
    e[6:9] = np.angle(np.exp(1j * e[6:9]))
    c, s = math.cos(x[8]), math.sin(x[8])
    rel = ctx.feet - x[0:3]
    rel = np.column_stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]])
    return np.concatenate([[e[2]], e[3:6], e[6:9], e[9:12], rel.ravel(), cstate.t_swing, cstate.t_stance])


def assemble_input(context, sequence, s_max: int = S_MAX) -> np.ndarray:
    """Context features followed by the flattened contact prefix, padded with -1."""
    context = np.asarray(context, dtype=float).ravel()
    if context.size != CONTEXT_DIM:
        raise ValidationError(f"context must have {CONTEXT_DIM} entries, got {context.size}")
    seq = np.asarray(sequence, dtype=float).reshape(-1, N_LEGS)
    if seq.shape[0] > s_max:
        raise ValidationError(f"contact sequence has {seq.shape[0]} steps, at most {s_max} allowed")
    tail = -np.ones((s_max - seq.shape[0]) * N_LEGS)
    return np.concatenate([context, seq.ravel(), tail])


def assemble_batch(context, sequences, s_max: int = S_MAX) -> np.ndarray:
    return np.stack([assemble_input(context, s, s_max) for s in sequences]) if len(sequences) else \
        np.zeros((0, CONTEXT_DIM + s_max * N_LEGS))


@dataclass
class MlpModel:
    sizes: list
    weights: list
    biases: list
    bn_scale: list
    bn_shift: list
    bn_mean: list
    bn_var: list
    dropout: float = DROPOUT
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    y_mean: float = 0.0
    y_std: float = 1.0

    def __post_init__(self):
        self.sizes = [int(v) for v in self.sizes]
        if self.x_mean is None:
            self.x_mean = np.zeros(self.sizes[0])
        if self.x_std is None:
            self.x_std = np.ones(self.sizes[0])
        self.validate()

    @property
    def head(self) -> str:
        return "value" if self.sizes[-1] == 1 else "policy"

    @property
    def n_hidden(self) -> int:
        return len(self.sizes) - 2

    def validate(self) -> None:
        n = len(self.sizes) - 1
        if n < 1 or len(self.weights) != n or len(self.biases) != n:
            raise ValidationError("layer lists do not match the size chain")
        for i in range(n):
            if self.weights[i].shape != (self.sizes[i], self.sizes[i + 1]) or self.biases[i].shape != (self.sizes[i + 1],):
                raise ValidationError(f"layer {i} has inconsistent shapes")
        for lst in (self.bn_scale, self.bn_shift, self.bn_mean, self.bn_var):
            if len(lst) != n - 1 or any(a.shape != (self.sizes[i + 1],) for i, a in enumerate(lst)):
                raise ValidationError("batch-norm parameters do not match hidden layers")
        if any(np.any(v <= 0) for v in self.bn_var):
            raise ValidationError("batch-norm running variances must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.x_mean.shape != (self.sizes[0],) or self.x_std.shape != (self.sizes[0],) or np.any(self.x_std <= 0):
            raise ValidationError("input normalization must have positive std of input width")
        if not self.y_std > 0:
            raise ValidationError("target std must be positive")

    def params(self) -> list:
        """Trainable arrays in a fixed order (weights, biases, then batch-norm scale/shift)."""
        return [*self.weights, *self.biases, *self.bn_scale, *self.bn_shift]

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)


def init_model(sizes=(INPUT_DIM, *HIDDEN, 1), seed: int = 0, dropout: float = DROPOUT) -> MlpModel:
    """He-uniform weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    sizes = list(sizes)
    ws, bs = [], []
    for i in range(len(sizes) - 1):
        lim = math.sqrt(6.0 / sizes[i])
        ws.append(rng.uniform(-lim, lim, size=(sizes[i], sizes[i + 1])))
        bs.append(np.zeros(sizes[i + 1]))
    hid = sizes[1:-1]
    return MlpModel(sizes, ws, bs, [np.ones(n) for n in hid], [np.zeros(n) for n in hid],
                    [np.zeros(n) for n in hid], [np.ones(n) for n in hid], dropout)


def forward(model: MlpModel, X, mode: str = "eval", dropout_seed: int | None = 0, normalize: bool = True,
            freeze_bn: bool = False):
    """Network output in standardized target units, plus a cache in train mode.

    Train mode uses batch statistics (running ones when ``freeze_bn``) and
    inverted dropout; eval mode uses the running statistics and is
    deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"unknown mode {mode!r}")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.sizes[0]:
        raise ValidationError(f"expected inputs of shape (B, {model.sizes[0]}), got {X.shape}")
    a = (X - model.x_mean) / model.x_std if normalize else X
    train = mode == "train"
    batch_stats = train and not freeze_bn
    if batch_stats and X.shape[0] < 2 and model.n_hidden:
        raise ValidationError("batch-norm training needs at least two samples")
    rng = np.random.default_rng(dropout_seed) if train and model.dropout > 0 else None
    cache = {"inputs": [], "xhat": [], "inv_std": [], "relu": [], "mask": [], "frozen": not batch_stats}
    for i in range(model.n_hidden):
        cache["inputs"].append(a)
        z = a @ model.weights[i] + model.biases[i]
        if batch_stats:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
        else:
            mu, var = model.bn_mean[i], model.bn_var[i]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mu) * inv
        y = model.bn_scale[i] * xhat + model.bn_shift[i]
        r = np.maximum(y, 0.0)
        if rng is not None:
            keep = 1.0 - model.dropout
            mask = (rng.random(r.shape) < keep) / keep
            r = r * mask
        else:
            mask = None
        cache["xhat"].append(xhat)
        cache["inv_std"].append(inv)
        cache["relu"].append(y > 0)
        cache["mask"].append(mask)
        if batch_stats:
            cache.setdefault("stats", []).append((mu, var))
        a = r
    cache["inputs"].append(a)
    out = a @ model.weights[-1] + model.biases[-1]
    return (out, cache) if train else (out, None)


def update_running_stats(model: MlpModel, cache) -> None:
    for i, (mu, var) in enumerate(cache.get("stats", [])):
        model.bn_mean[i] = BN_MOMENTUM * model.bn_mean[i] + (1.0 - BN_MOMENTUM) * mu
        model.bn_var[i] = BN_MOMENTUM * model.bn_var[i] + (1.0 - BN_MOMENTUM) * var


def recalibrate_bn(model: MlpModel, X) -> None:
    """Set running batch-norm statistics to the population statistics of ``X``."""
    a = (np.asarray(X, dtype=float) - model.x_mean) / model.x_std
    for i in range(model.n_hidden):
        z = a @ model.weights[i] + model.biases[i]
        model.bn_mean[i] = z.mean(axis=0)
        model.bn_var[i] = z.var(axis=0)
        y = model.bn_scale[i] * (z - model.bn_mean[i]) / np.sqrt(model.bn_var[i] + BN_EPS) + model.bn_shift[i]
        a = np.maximum(y, 0.0)


def loss_and_grad_out(model: MlpModel, out: np.ndarray, targets):
    """Loss and its gradient with respect to the network output."""
    B = out.shape[0]
    if model.head == "value":
        t = np.asarray(targets, dtype=float).reshape(B, 1)
        d = out - t
        return 0.5 * float(np.mean(d ** 2)), d / B
    labels = np.asarray(targets, dtype=int).reshape(B)
    z = out - out.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    p[np.arange(B), labels] -= 1.0
    return -float(np.mean(logp[np.arange(B), labels])), p / B


def backward(model: MlpModel, cache, out: np.ndarray, targets):
    """Gradients for ``model.params()`` order and the loss.

    The value head uses 0.5 * mean squared error; the policy head uses mean
    cross-entropy over integer action labels.
    """
    loss, g = loss_and_grad_out(model, out, targets)
    n = len(model.weights)
    gw, gb = [None] * n, [None] * n
    gscale, gshift = [None] * model.n_hidden, [None] * model.n_hidden
    a = cache["inputs"][-1]
    gw[-1] = a.T @ g
    gb[-1] = g.sum(axis=0)
    da = g @ model.weights[-1].T
    B = a.shape[0]
    for i in reversed(range(model.n_hidden)):
        if cache["mask"][i] is not None:
            da = da * cache["mask"][i]
        dy = da * cache["relu"][i]
        xhat = cache["xhat"][i]
        gscale[i] = (dy * xhat).sum(axis=0)
        gshift[i] = dy.sum(axis=0)
        dxhat = dy * model.bn_scale[i]
        if cache["frozen"]:
            dz = dxhat * cache["inv_std"][i]
        else:
            dz = cache["inv_std"][i] / B * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        a_in = cache["inputs"][i]
        gw[i] = a_in.T @ dz
        gb[i] = dz.sum(axis=0)
        da = dz @ model.weights[i].T
    return [*gw, *gb, *gscale, *gshift], loss


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: MlpModel, lr: float = 1e-3) -> "AdamState":
        ps = model.params()
        return cls([np.zeros_like(p) for p in ps], [np.zeros_like(p) for p in ps], 0, lr)


def adam_step(model: MlpModel, grads: list, state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to the model parameters."""
    ps = model.params()
    if len(grads) != len(ps) or any(g.shape != p.shape for g, p in zip(grads, ps)):
        raise ValidationError("gradient shapes do not match the model parameters")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(ps, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def step_lr(epoch: int, lr0: float = 1e-3, factor: float = 0.5, every: int = 20) -> float:
    return lr0 * factor ** (epoch // every)


def predict(model: MlpModel, X) -> np.ndarray:
    """Eval-mode output in target units (values) or raw logits (policy)."""
    out, _ = forward(model, X, "eval")
    if model.head == "value":
        return model.y_mean + model.y_std * out[:, 0]
    return out


@dataclass
class TrainResult:
    model: MlpModel
    train_loss: list
    val_loss: list
    best_epoch: int
    val_idx: np.ndarray = None


def _eval_loss(model: MlpModel, X, t) -> float:
    if len(X) == 0:
        return float("nan")
    out, _ = forward(model, X, "eval")
    return loss_and_grad_out(model, out, t)[0]


def train(X, y, epochs: int = 50, batch_size: int = 64, lr0: float = 1e-3, seed: int = 0,
          hidden=HIDDEN, head: str = "value", dropout: float = DROPOUT, val_fraction: float = 0.1,
          lr_every: int = 20, frozen_bn_epochs: int = 30) -> TrainResult:
    """Fit on a seeded 90/10 split and return the best-validation checkpoint.

    The last ``frozen_bn_epochs`` epochs normalize with population statistics
    of the training split instead of batch statistics, and the parameters are
    averaged over the steps of that phase.  Per-batch statistics and Adam's
    step jitter otherwise leave a noise floor of a few percent of the target
    spread.  The averaged model competes with the per-epoch checkpoints for
    the best validation loss.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[0] != y.shape[0]:
        raise ValidationError("need at least two samples with matching targets")
    if head not in ("value", "policy"):
        raise ValidationError(f"unknown head {head!r}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(X.shape[0])
    n_val = max(1, int(round(val_fraction * X.shape[0]))) if X.shape[0] >= 3 else 0
    val_idx, tr_idx = order[:n_val], order[n_val:]
    Xtr, Xval = X[tr_idx], X[val_idx]

    out_dim = 1 if head == "value" else N_ACTIONS
    model = init_model((X.shape[1], *hidden, out_dim), int(rng.integers(2 ** 31)), dropout)
    model.x_mean = Xtr.mean(axis=0)
    std = Xtr.std(axis=0)
    model.x_std = np.where(std > 1e-12, std, 1.0)
    if head == "value":
        y = y.astype(float)
        model.y_mean = float(y[tr_idx].mean())
        sd = float(y[tr_idx].std())
        model.y_std = sd if sd > 1e-12 else 1.0
        t_all = (y - model.y_mean) / model.y_std
    else:
        t_all = y.astype(int)
    ttr, tval = t_all[tr_idx], t_all[val_idx]

    adam = AdamState.for_model(model, lr0)
    best, best_loss, best_epoch = model.copy(), math.inf, -1
    tr_curve, val_curve = [], []
    freeze_from = max(0, epochs - frozen_bn_epochs)
    avg, n_avg = None, 0
    for epoch in range(epochs):
        adam.lr = step_lr(epoch, lr0, 0.5, lr_every)
        frozen = epoch >= freeze_from
        if epoch == freeze_from:
            recalibrate_bn(model, Xtr)
            avg = model.copy()
        perm = rng.permutation(len(tr_idx))
        losses = []
        for start in range(0, len(perm), batch_size):
            b = perm[start:start + batch_size]
            if len(b) < 2 and not frozen:
                continue
            out, cache = forward(model, Xtr[b], "train", int(rng.integers(2 ** 31)), freeze_bn=frozen)
            grads, loss = backward(model, cache, out, ttr[b])
            if not frozen:
                update_running_stats(model, cache)
            adam_step(model, grads, adam)
            losses.append(loss)
            if frozen:
                n_avg += 1
                for pa, p in zip(avg.params(), model.params()):
                    pa += (p - pa) / n_avg
        tr_curve.append(float(np.mean(losses)) if losses else float("nan"))
        vl = _eval_loss(model, Xval, tval) if n_val else tr_curve[-1]
        val_curve.append(vl)
        if vl < best_loss:
            best, best_loss, best_epoch = model.copy(), vl, epoch
        if frozen and n_val:
            va = _eval_loss(avg, Xval, tval)
            if va < best_loss:
                best, best_loss, best_epoch = avg.copy(), va, epoch
    return TrainResult(best, tr_curve, val_curve, best_epoch, val_idx)


# model files

def _fmt(a) -> str:
    return " ".join("%.17g" % v for v in np.asarray(a, dtype=float).ravel())


def save_model(model: MlpModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_model(model))


def dumps_model(model: MlpModel) -> str:
    lines = [MODEL_MAGIC, " ".join(str(s) for s in model.sizes)]
    for w, b in zip(model.weights, model.biases):
        lines += [_fmt(w), _fmt(b)]
    for i in range(model.n_hidden):
        lines += [_fmt(model.bn_scale[i]), _fmt(model.bn_shift[i]), _fmt(model.bn_mean[i]), _fmt(model.bn_var[i])]
    lines += [_fmt(model.x_mean), _fmt(model.x_std), _fmt([model.y_mean]), _fmt([model.y_std])]
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> MlpModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MODEL_MAGIC:
        raise ValidationError(f"not a {MODEL_MAGIC} model file")
    try:
        sizes = [int(v) for v in lines[1].split()]
        it = iter(lines[2:])

        def arr(n):
            a = np.array([float(v) for v in next(it).split()])
            if a.size != n:
                raise ValidationError(f"expected {n} values, got {a.size}")
            return a

        ws, bs = [], []
        for i in range(len(sizes) - 1):
            ws.append(arr(sizes[i] * sizes[i + 1]).reshape(sizes[i], sizes[i + 1]))
            bs.append(arr(sizes[i + 1]))
        bn = [[], [], [], []]
        for n in sizes[1:-1]:
            for lst in bn:
                lst.append(arr(n))
        x_mean, x_std = arr(sizes[0]), arr(sizes[0])
        y_mean, y_std = float(arr(1)[0]), float(arr(1)[0])
    except (StopIteration, ValueError, IndexError) as exc:
        raise ValidationError(f"truncated or malformed model file: {exc}") from exc
    return MlpModel(sizes, ws, bs, *bn, DROPOUT, x_mean, x_std, y_mean, y_std)


def load_model(path) -> MlpModel:
    with open(path) as fh:
        return loads_model(fh.read())


# datasets

DATASET_HEADER = [f"f{i:02d}" for i in range(INPUT_DIM)] + ["target"]


def _round9(a) -> np.ndarray:
    return np.array([float("%.9g" % v) for v in np.ravel(a)])


@dataclass
class VfDataset:
    """Single-writer sample sink; rows are stored at file precision."""

    rows: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    excluded: int = 0

    def append(self, x, y) -> None:
        x = np.asarray(x, dtype=float)
        if x.shape != (INPUT_DIM,):
            raise ValidationError(f"sample must have {INPUT_DIM} features")
        if not math.isfinite(float(y)):
            raise ValidationError("target must be finite")
        self.rows.append(_round9(x))
        self.targets.append(float("%.9g" % float(y)))

    def __len__(self) -> int:
        return len(self.rows)

    def arrays(self):
        return np.array(self.rows).reshape(-1, INPUT_DIM), np.array(self.targets)

    def extend(self, other: "VfDataset") -> None:
        self.rows += other.rows
        self.targets += other.targets
        self.excluded += other.excluded

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for x, y in zip(self.rows, self.targets):
            w.writerow(["%.9g" % v for v in x] + ["%.9g" % y])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "VfDataset":
        rd = csv.reader(io.StringIO(text))
        header = next(rd, None)
        if header != DATASET_HEADER:
            raise ValidationError("dataset header does not match f00..f77,target")
        ds = cls()
        for lineno, row in enumerate(rd, start=2):
            if len(row) != INPUT_DIM + 1:
                raise ValidationError(f"line {lineno}: expected {INPUT_DIM + 1} columns")
            ds.rows.append(np.array([float(v) for v in row[:-1]]))
            ds.targets.append(float(row[-1]))
        return ds

    @classmethod
    def read(cls, path) -> "VfDataset":
        with open(path) as fh:
            return cls.from_csv(fh.read())


def log_tree(tree, context, sink: VfDataset) -> int:
    """Append one sample per rollout-scored node; penalized nodes are skipped and counted."""
    added = 0
    for node in tree.nodes[1:]:
        if node.p_bar is None:
            continue
        if node.penalized or not math.isfinite(node.p_bar):
            sink.excluded += 1
            continue
        sink.append(assemble_input(context, tree.sequence(node.id)), node.p_bar)
        added += 1
    return added


def log_policy(sequence, context, sink: VfDataset) -> int:
    """Append (prefix, next action index) pairs along a chosen sequence."""
    steps = np.asarray(sequence.steps if isinstance(sequence, GaitSequence) else sequence).reshape(-1, N_LEGS)
    for d in range(min(steps.shape[0], S_MAX)):
        sink.append(assemble_input(context, steps[:d]), mdp.action_index(steps[d]))
    return min(steps.shape[0], S_MAX)


# planner hooks

def node_value_fn(model: MlpModel, ctx, cstate: ContactState):
    """Callable mapping a list of node prefixes to predicted costs for this robot context."""
    if model.head != "value":
        raise ValidationError("node values need a value-head model")
    context = context_features(ctx, cstate)

    def values(prefixes):
        return predict(model, assemble_batch(context, prefixes))

    return values


def action_policy_forward(model: MlpModel, context, prefix, state: ContactState,
                          cfg: mdp.FeasibilityConfig | None = None) -> tuple:
    """Highest-logit feasible next action; ties go to the lowest action index."""
    if model.head != "policy":
        raise ValidationError("action selection needs a 16-way policy model")
    logits = predict(model, assemble_input(context, prefix)[None, :])[0]
    allowed = np.full(N_ACTIONS, -np.inf)
    for a in mdp.feasible_actions(state, cfg):
        idx = mdp.action_index(a)
        allowed[idx] = logits[idx]
    if not np.isfinite(allowed).any():
        raise RuntimeError("no feasible action to choose from")
    return mdp.action_from_index(int(np.argmax(allowed)))


def ap_plan(model: MlpModel, ctx, cstate: ContactState, pcfg) -> GaitSequence:
    """Build a full node sequence by querying the policy one step at a time.

    The timers in the input stay those of the root; only the contact prefix
    grows.
    """
    context = context_features(ctx, cstate)
    steps = []
    state = cstate
    for _ in range(pcfg.depth):
        a = action_policy_forward(model, context, np.array(steps, dtype=float).reshape(-1, N_LEGS), state,
                                  pcfg.feasibility)
        steps.append(a)
        state = mdp.transition(state, a, pcfg.dt_node)
    return GaitSequence(np.array(steps, dtype=np.int8).reshape(-1, N_LEGS), pcfg.dt_node)
