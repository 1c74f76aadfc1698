import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mctsgait import contact_mdp as cm
from mctsgait import mcts_planner as mp
from mctsgait import ocp_builder as ob
from mctsgait import value_function as vf
from mctsgait.rollout_kernel import RolloutContext
from mctsgait.srb_dynamics import SrbState, ValidationError

FEET = np.column_stack([ob.DEFAULT_HIPS, np.zeros(4)])


def standing_ctx(N=8):
    return RolloutContext(SrbState.standing(0.35).as_vector(), FEET, np.ones(4), ob.VelocityCommand(),
                          weights=ob.OcpWeights(N=N))


def gradient_check(sizes, head="value", batch=6, per_param=30, seed=0):
    rng = np.random.default_rng(seed)
    m = vf.init_model(sizes, seed, dropout=0.0)
    for i in range(m.n_hidden):
        m.bn_scale[i] = rng.uniform(0.5, 1.5, sizes[i + 1])
        m.bn_shift[i] = rng.normal(0, 0.3, sizes[i + 1])
    X = rng.normal(size=(batch, sizes[0]))
    t = rng.normal(size=batch) if head == "value" else rng.integers(0, sizes[-1], batch)
    out, cache = vf.forward(m, X, "train")
    grads, _ = vf.backward(m, cache, out, t)
    worst, eps = 0.0, 1e-5
    for p, g in zip(m.params(), grads):
        for j in rng.choice(p.size, min(p.size, per_param), replace=False):
            orig = p.flat[j]
            p.flat[j] = orig + eps
            lp = vf.loss_and_grad_out(m, vf.forward(m, X, "train")[0], t)[0]
            p.flat[j] = orig - eps
            lm = vf.loss_and_grad_out(m, vf.forward(m, X, "train")[0], t)[0]
            p.flat[j] = orig
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(fd - g.flat[j]) / max(abs(fd), abs(g.flat[j]), 1e-6))
    return worst


def test_context_and_padding():
    ctx = standing_ctx()
    context = vf.context_features(ctx, cm.ContactState.initial())
    assert context.shape == (30,)
    assert np.all(context[:10] == 0.0)
    x = vf.assemble_input(context, np.zeros((0, 4)))
    assert x.shape == (78,) and np.all(x[30:] == -1)
    x5 = vf.assemble_input(context, np.ones((5, 4)))
    assert np.sum(x5 == -1) == 28 and np.all(x5[-28:] == -1)
    with pytest.raises(ValidationError):
        vf.assemble_input(context, np.ones((13, 4)))


def test_context_feet_are_heading_independent():
    x = SrbState.standing(0.35, yaw=0.7).as_vector()
    c, s = math.cos(0.7), math.sin(0.7)
    feet = FEET.copy()
    feet[:, :2] = FEET[:, :2] @ np.array([[c, s], [-s, c]])
    ctx = RolloutContext(x, feet, np.ones(4), ob.VelocityCommand())
    a = vf.context_features(ctx, cm.ContactState.initial())
    b = vf.context_features(standing_ctx(), cm.ContactState.initial())
    assert np.allclose(a, b, atol=1e-12)


def test_zero_network_outputs_zero():
    m = vf.init_model((78, 8, 8, 1))
    for w in m.weights:
        w[:] = 0.0
    X = np.random.default_rng(0).normal(size=(5, 78))
    assert np.all(vf.forward(m, X, "eval")[0] == 0.0)


def test_toy_forward_by_hand():
    m = vf.init_model((2, 1, 1), dropout=0.0)
    m.weights = [np.array([[0.5], [-1.0]]), np.array([[2.0]])]
    m.biases = [np.array([0.1]), np.array([0.3])]
    m.bn_mean, m.bn_var = [np.array([0.2])], [np.array([4.0])]
    m.bn_scale, m.bn_shift = [np.array([1.5])], [np.array([0.25])]
    x = np.array([[2.0, -1.0]])
    z = 0.5 * 2.0 - 1.0 * -1.0 + 0.1  # 2.1
    y = 1.5 * (z - 0.2) / math.sqrt(4.0 + 1e-5) + 0.25
    assert vf.forward(m, x, "eval")[0][0, 0] == pytest.approx(2.0 * max(y, 0.0) + 0.3, abs=1e-14)


def test_eval_is_deterministic():
    m = vf.init_model((78, 16, 16, 1), 3)
    X = np.random.default_rng(1).normal(size=(4, 78))
    assert np.array_equal(vf.predict(m, X), vf.predict(m, X))


def test_backward_trivial_cases():
    m = vf.init_model((4, 6, 1), 0, dropout=0.0)
    X = np.random.default_rng(2).normal(size=(5, 4))
    out, cache = vf.forward(m, X, "train")
    grads, loss = vf.backward(m, cache, out, out[:, 0])
    assert loss == 0.0 and all(np.all(g == 0) for g in grads)
    t = np.zeros(5)
    grads, _ = vf.backward(m, cache, out, t)
    assert grads[len(m.weights) + len(m.biases) - 1][0] == pytest.approx(np.mean(out[:, 0] - t), abs=1e-15)


@pytest.mark.parametrize("sizes,head", [((5, 7, 6, 1), "value"), ((5, 7, 6, 16), "policy")])
def test_gradient_check_small(sizes, head):
    assert gradient_check(sizes, head) <= 1e-4


def test_adam_examples():
    m = vf.init_model((1, 1), dropout=0.0)
    before = [p.copy() for p in m.params()]
    st_ = vf.AdamState.for_model(m, lr=0.01)
    vf.adam_step(m, [np.zeros_like(p) for p in m.params()], st_)
    assert st_.t == 1 and all(np.array_equal(a, b) for a, b in zip(before, m.params()))

    m = vf.init_model((1, 1), dropout=0.0)
    w0 = m.weights[0][0, 0]
    st_ = vf.AdamState.for_model(m, lr=0.01)
    vf.adam_step(m, [np.array([[0.3]]), np.array([-2.0])], st_)
    assert m.weights[0][0, 0] == pytest.approx(w0 - 0.01, abs=1e-9)
    assert m.biases[0][0] == pytest.approx(0.01, abs=1e-9)
    # second identical step, tracked by hand
    g = 0.3
    m1, v1 = 0.1 * g, 0.001 * g * g
    m2, v2 = 0.9 * m1 + 0.1 * g, 0.999 * v1 + 0.001 * g * g
    step2 = 0.01 * (m2 / (1 - 0.9 ** 2)) / (math.sqrt(v2 / (1 - 0.999 ** 2)) + 1e-8)
    w1 = m.weights[0][0, 0]
    vf.adam_step(m, [np.array([[0.3]]), np.array([-2.0])], st_)
    assert m.weights[0][0, 0] == pytest.approx(w1 - step2, abs=1e-15)
    assert st_.m[0][0, 0] == pytest.approx(m2, rel=1e-14) and st_.v[0][0, 0] == pytest.approx(v2, rel=1e-14)


def test_lr_schedule():
    assert [vf.step_lr(e) for e in (0, 19, 20, 40)] == [1e-3, 1e-3, 5e-4, 2.5e-4]


def test_training_is_seed_deterministic_and_decreases_loss():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 6))
    y = np.sin(X[:, 0]) + X[:, 1] ** 2
    a = vf.train(X, y, epochs=30, seed=1, hidden=(32, 32))
    b = vf.train(X, y, epochs=30, seed=1, hidden=(32, 32))
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
    assert a.train_loss[29] <= a.train_loss[0]
    with pytest.raises(ValidationError):
        vf.train(np.zeros((0, 6)), np.zeros(0))


def test_dropout_free_frozen_training_is_exact():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(100, 3))
    y = X @ [1.0, -2.0, 0.5]
    runs = [vf.train(X, y, epochs=4, seed=9, hidden=(8,), dropout=0.0, frozen_bn_epochs=4) for _ in range(2)]
    assert vf.dumps_model(runs[0].model) == vf.dumps_model(runs[1].model)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.floats(-1e4, 1e4))
def test_target_normalization_round_trip(mean, std, y):
    assert (mean + std * ((y - mean) / std)) == pytest.approx(y, abs=1e-12 * max(1.0, abs(y)) + 1e-12)


def test_model_round_trip(tmp_path):
    m = vf.init_model((78, 16, 16, 1), 5)
    m.x_mean = np.random.default_rng(0).normal(size=78)
    m.y_mean, m.y_std = 3.25, 0.7
    vf.save_model(m, tmp_path / "v.mlp")
    text = (tmp_path / "v.mlp").read_text()
    assert text.splitlines()[0] == "MLPV1" and text.splitlines()[1] == "78 16 16 1"
    m2 = vf.load_model(tmp_path / "v.mlp")
    X = np.random.default_rng(1).normal(size=(7, 78))
    assert np.array_equal(vf.predict(m, X), vf.predict(m2, X))
    with pytest.raises(ValidationError):
        vf.loads_model("MLPV1\n78 16 1\n1 2 3\n")
    with pytest.raises(ValidationError):
        vf.loads_model("MLPV0\n")


def test_dataset_round_trip(tmp_path):
    ds = vf.VfDataset()
    rng = np.random.default_rng(0)
    for _ in range(5):
        ds.append(rng.normal(size=78) * 10 ** rng.uniform(-5, 5), rng.normal() * 100)
    ds.write(tmp_path / "d.csv")
    back = vf.VfDataset.read(tmp_path / "d.csv")
    assert np.array_equal(back.arrays()[0], ds.arrays()[0])
    assert np.array_equal(back.arrays()[1], ds.arrays()[1])
    with pytest.raises(ValidationError):
        ds.append(np.zeros(78), float("nan"))


def test_log_tree_counts_and_exclusions():
    cfg = mp.PlannerConfig(horizon=0.32, M=3, budget_iterations=2)
    ctx = standing_ctx()
    _, _, tree = mp.plan(cm.ContactState.initial(), ctx, cfg)
    scored = [n for n in tree.nodes[1:] if n.p_bar is not None]
    tree.nodes[scored[0].id].penalized = True
    sink = vf.VfDataset()
    added = vf.log_tree(tree, vf.context_features(ctx, cm.ContactState.initial()), sink)
    assert added == len(scored) - 1 == len(sink) and sink.excluded == 1
    assert sink.targets[0] == float("%.9g" % scored[1].p_bar)


def policy_model(bias_logits):
    m = vf.init_model((78, 4, 16), dropout=0.0)
    m.weights[-1][:] = 0.0
    m.biases[-1][:] = bias_logits
    return m


def test_action_policy_tie_break_and_mask():
    context = np.zeros(30)
    free = cm.ContactState((1, 1, 1, 1), (0,) * 4, (0.2,) * 4)
    assert vf.action_policy_forward(policy_model(np.zeros(16)), context, np.zeros((0, 4)), free) == (0, 0, 0, 0)
    locked = cm.ContactState((1, 1, 1, 1), (0,) * 4, (0.2, 0.08, 0.2, 0.2))  # RF must stay in stance
    logits = np.zeros(16)
    logits[0] = 10.0  # all-swing is infeasible here
    logits[4] = 5.0
    assert vf.action_policy_forward(policy_model(logits), context, np.zeros((0, 4)), locked) == (0, 1, 0, 0)


def test_action_policy_imitates_trot_generator():
    # fixed trot: diagonal pairs swap every four nodes
    cycle = np.array([[0, 1, 1, 0]] * 4 + [[1, 0, 0, 1]] * 4, dtype=np.int8)
    rng = np.random.default_rng(0)

    def samples(n_roots):
        X, y = [], []
        for _ in range(n_roots):
            k = int(rng.integers(8))
            root = cm.replay(np.roll(cycle, -k, axis=0)[np.arange(16) % 8], 0.08, cm.ContactState.initial())
            steps = np.roll(cycle, -(k + 16), axis=0)
            context = np.concatenate([rng.normal(0, 0.1, 22), root.t_swing, root.t_stance])
            for d in range(8):
                X.append(vf.assemble_input(context, steps[:d]))
                y.append(cm.action_index(steps[d]))
        return np.array(X), np.array(y)

    X, y = samples(400)
    Xt, yt = samples(100)
    res = vf.train(X, y, epochs=20, batch_size=64, head="policy", hidden=(64, 64), seed=0, dropout=0.0)
    acc = np.mean(np.argmax(vf.predict(res.model, Xt), axis=1) == yt)
    assert acc >= 0.95


def test_node_value_fn_matches_predict():
    m = vf.init_model((78, 8, 1), 2)
    ctx = standing_ctx()
    fn = vf.node_value_fn(m, ctx, cm.ContactState.initial())
    prefixes = [np.ones((1, 4)), np.zeros((2, 4))]
    ref = vf.predict(m, vf.assemble_batch(vf.context_features(ctx, cm.ContactState.initial()), prefixes))
    assert np.array_equal(fn(prefixes), ref)
    with pytest.raises(ValidationError):
        vf.node_value_fn(policy_model(np.zeros(16)), ctx, cm.ContactState.initial())
