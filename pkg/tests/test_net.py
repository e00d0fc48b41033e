from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from inmateria.errors import Divergence, ShapeError
from inmateria.net import (GAP, AdamW, ArchSpec, BatchNorm, Conv1d, EvalResult, Linear, TrainConfig, act,
                           build, confusion_matrix, conv, count_macs, count_params, evaluate, head_arch, linear,
                           linear_arch, load_checkpoint, log_sigmoid, nll_loss, save_checkpoint, score,
                           swish, ti46_aimc_arch, gsc_arch, train, FLATTEN)


# ---------------------------------------------------------------- counts

@pytest.mark.parametrize("ch,expected", [(16, 4458), (32, 8554), (64, 16746)])
def test_head_param_counts(ch, expected):
    assert count_params(head_arch(ch)) == ch * 32 * 8 + 32 + 32 * 10 + 10 == expected


def test_linear_raw_params():
    assert count_params(linear_arch(1, 12500)) == 125_010


def test_macs_examples():
    a = ArchSpec((conv(1, 32, 8), GAP, linear(32, 10)), (1, 12500))
    assert count_macs(a) - 320 == 1 * 32 * 8 * 12493 == 3_198_208
    b = ArchSpec((FLATTEN, linear(36, 10)), (36, 1))
    assert count_macs(b) == 360 and count_params(b) == 370
    assert count_macs(ArchSpec((), (1, 10))) == 0


def test_canonical_archs():
    assert count_params(ti46_aimc_arch()) == 88_222
    g = gsc_arch()
    assert abs(count_params(g) - 470_000) < 5_000
    assert g.shapes()[-1] == (12,)


def test_shape_errors():
    with pytest.raises(ShapeError):
        build(ArchSpec((conv(4, 8, 3), linear(8, 2)), (4, 20)))
    with pytest.raises(ShapeError):
        build(ArchSpec((conv(4, 8, 3), GAP), (4, 20)))
    with pytest.raises(ShapeError):
        build(ArchSpec((conv(3, 8, 3), GAP, linear(8, 2)), (4, 20)))
    m = build(head_arch(4, 50))
    with pytest.raises(ShapeError):
        m.logits(np.zeros((1, 5, 50)))


# ---------------------------------------------------------------- forward oracles

def _direct_conv(x, w, b):
    n, c, length = x.shape
    o, _, k = w.shape
    out = np.zeros((n, o, length - k + 1))
    for i in range(n):
        for oc in range(o):
            for t in range(length - k + 1):
                s = b[oc]
                for ic in range(c):
                    for j in range(k):
                        s += x[i, ic, t + j] * w[oc, ic, j]
                out[i, oc, t] = s
    return out


def test_conv_identity():
    layer = Conv1d(1, 1, 1)
    layer.params["W"][:] = 1.0
    x = np.random.default_rng(0).normal(size=(2, 1, 17))
    np.testing.assert_array_equal(layer.forward(x), x)


def test_zero_input_gives_final_bias():
    m = build(ArchSpec((conv(3, 5, 4), act("tanh"), GAP, linear(5, 4)), (3, 30)), 1)
    for l in m.layers:
        if isinstance(l, Conv1d):
            l.params["b"][:] = 0.0
    out = m.logits(np.zeros((2, 3, 30)))
    np.testing.assert_array_equal(out, np.broadcast_to(m.layers[-1].params["b"], out.shape))


def test_three_layer_forward_matches_direct_sum():
    rng = np.random.default_rng(3)
    arch = ArchSpec((conv(2, 3, 4), act("tanh"), conv(3, 4, 3), act("swish"), conv(4, 2, 2), GAP, linear(2, 3)),
                    (2, 16))
    m = build(arch, 7)
    x = rng.normal(size=(4, 2, 16))
    h = x
    for layer in m.layers:
        if isinstance(layer, Conv1d):
            h = _direct_conv(h, layer.params["W"], layer.params["b"])
        elif isinstance(layer, Linear):
            h = np.array([[layer.params["b"][o] + sum(r[i] * layer.params["W"][o, i] for i in range(r.size))
                           for o in range(layer.out_features)] for r in h])
        elif layer.kind == "activation":
            h = np.tanh(h) if layer.fn == "tanh" else h / (1 + np.exp(-h))
        else:
            h = h.mean(axis=2)
    got = m.logits(x)
    np.testing.assert_allclose(got, h, rtol=1e-10, atol=1e-14)


def test_strided_conv_matches_direct():
    rng = np.random.default_rng(0)
    layer = Conv1d(2, 3, 4, stride=3)
    layer.params["W"] = rng.normal(size=layer.params["W"].shape)
    x = rng.normal(size=(2, 2, 20))
    full = _direct_conv(x, layer.params["W"], layer.params["b"])
    np.testing.assert_allclose(layer.forward(x), full[:, :, ::3], rtol=1e-12)


# ---------------------------------------------------------------- gradients

def _grad_check(layer, x, rng, eps=1e-5):
    """Relative error between analytic and central-difference gradients for a random projection loss."""
    y = layer.forward(x, train=True)
    proj = rng.normal(size=y.shape)
    dx = layer.backward(proj)
    grads = {k: v.copy() for k, v in layer.grads.items()}

    def loss():
        return float(np.sum(layer.forward(x, train=True) * proj))

    errs = []
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        lp = loss()
        x[idx] = old - eps
        lm = loss()
        x[idx] = old
        num[idx] = (lp - lm) / (2 * eps)
    errs.append(np.linalg.norm(num - dx) / max(np.linalg.norm(num) + np.linalg.norm(dx), 1e-12))
    for k, p in layer.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            lp = loss()
            p[idx] = old - eps
            lm = loss()
            p[idx] = old
            num[idx] = (lp - lm) / (2 * eps)
        errs.append(np.linalg.norm(num - grads[k]) / max(np.linalg.norm(num) + np.linalg.norm(grads[k]), 1e-12))
    return max(errs)


def _rand_layer(kind, rng):
    from inmateria.net import Activation, Flatten, GlobalAvgPool, MaxPool
    if kind == "conv":
        c, o, k, s = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 3)
        layer = Conv1d(c, o, k, s)
        layer.params["W"] = rng.normal(size=layer.params["W"].shape)
        layer.params["b"] = rng.normal(size=o)
        return layer, rng.normal(size=(2, c, int(k + rng.integers(2, 6))))
    if kind == "linear":
        i, o = rng.integers(1, 6), rng.integers(1, 5)
        layer = Linear(i, o)
        layer.params["W"] = rng.normal(size=(o, i))
        return layer, rng.normal(size=(3, i))
    if kind == "bn":
        c = int(rng.integers(1, 4))
        layer = BatchNorm(c)
        layer.params["gamma"] = rng.uniform(0.5, 2, c)
        layer.params["beta"] = rng.normal(size=c)
        return layer, rng.normal(size=(3, c, 5))
    if kind == "bn2d":
        layer = BatchNorm(3)
        return layer, rng.normal(size=(5, 3))
    if kind == "maxpool":
        return MaxPool(int(rng.integers(2, 4))), rng.normal(size=(2, 2, 9))
    if kind == "gap":
        return GlobalAvgPool(), rng.normal(size=(2, 3, 7))
    if kind == "flatten":
        return Flatten(), rng.normal(size=(2, 3, 4))
    return Activation(kind), rng.normal(size=(2, 3, 6))


@pytest.mark.parametrize("kind", ["conv", "linear", "bn", "bn2d", "maxpool", "gap", "flatten",
                                  "tanh", "swish", "log_sigmoid"])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    layer, x = _rand_layer(kind, rng)
    assert _grad_check(layer, x, rng) < 1e-4


def test_loss_gradients():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(4, 5))
    y = np.array([0, 3, 2, 4])
    for head in ("log_softmax", "log_sigmoid"):
        _, g = nll_loss(z, y, head)
        num = np.zeros_like(z)
        for idx in np.ndindex(z.shape):
            zp, zm = z.copy(), z.copy()
            zp[idx] += 1e-6
            zm[idx] -= 1e-6
            num[idx] = (nll_loss(zp, y, head)[0] - nll_loss(zm, y, head)[0]) / 2e-6
        np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)


# ---------------------------------------------------------------- pointwise identities and BN

@given(st.floats(-50, 50, allow_nan=False))
def test_activation_identities(x):
    a = np.array([x])
    assert log_sigmoid(a)[0] <= 0
    assert np.tanh(-a)[0] == -np.tanh(a)[0]
    assert swish(np.array([0.0]))[0] == 0.0


def test_batchnorm_training_stats():
    rng = np.random.default_rng(0)
    layer = BatchNorm(4)
    x = rng.normal(3.0, 5.0, (8, 4, 20))
    y = layer.forward(x, train=True)
    assert np.all(np.abs(y.mean(axis=(0, 2))) < 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2)) - 1) < 1e-4)


# ---------------------------------------------------------------- determinism

def test_build_deterministic_and_eval_batch_order():
    a, b = build(head_arch(4, 40), 5), build(head_arch(4, 40), 5)
    for k, v in a.state().items():
        np.testing.assert_array_equal(v, b.state()[k])
    x = np.random.default_rng(0).normal(size=(6, 4, 40))
    full = a.logits(x)
    perm = np.array([5, 2, 0, 1, 4, 3])
    np.testing.assert_allclose(a.logits(x[perm]), full[perm], rtol=1e-13, atol=1e-15)
    for i in range(6):
        np.testing.assert_allclose(a.logits(x[i:i + 1])[0], full[i], rtol=1e-13, atol=1e-15)


# ---------------------------------------------------------------- optimizer

def test_adamw_single_step_hand_formula():
    arch = ArchSpec((FLATTEN, linear(1, 1)), (1, 1))
    m = build(arch, 0)
    m.layers[1].params["W"] = np.array([[0.7]])
    m.layers[1].params["b"] = np.array([0.0])
    m.layers[1].grads = {"W": np.array([[0.3]]), "b": np.array([0.0])}
    lr, wd, b1, b2, eps = 1e-3, 1e-5, 0.9, 0.999, 1e-8
    AdamW(lr, wd).step(m)
    mh = (1 - b1) * 0.3 / (1 - b1)
    vh = (1 - b2) * 0.09 / (1 - b2)
    expected = 0.7 - lr * mh / (math.sqrt(vh) + eps) - lr * wd * 0.7
    assert abs(m.layers[1].params["W"][0, 0] - expected) < 1e-12


def _adam_oracle(w, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_adamw_zero_decay_is_adam():
    rng = np.random.default_rng(0)
    m = build(ArchSpec((FLATTEN, linear(3, 2), linear(2, 1)), (3, 1)), 0)
    assert m.n_params() == 11
    w0 = {k: v.copy() for k, v in m.state().items()}
    grads = {k: [rng.normal(size=v.shape) for _ in range(5)] for k, v in w0.items()}
    opt = AdamW(1e-3, 0.0)
    for s in range(5):
        for key, params, g, name in m.params_and_grads():
            g[name] = grads[key][s]
        opt.step(m)
    for k in w0:
        np.testing.assert_allclose(m.state()[k], _adam_oracle(w0[k], grads[k]), rtol=0, atol=1e-15)


# ---------------------------------------------------------------- training

def test_separable_toy_trains_to_100pct():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 2, 8))
    y = (x[:, 0].mean(axis=1) > 0).astype(int)
    x[:, 0] += np.where(y == 1, 1.0, -1.0)[:, None]
    m = build(ArchSpec((FLATTEN, linear(16, 2)), (2, 8)), 0)
    res = train(m, x, y, TrainConfig(lr=1e-2, epochs=50, batch_size=8, seed=0))
    assert evaluate(m, x, y).accuracy == 1.0
    assert len(res.train_loss) == 50 and res.train_loss[-1] < res.train_loss[0]


def test_train_deterministic_per_seed():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 3, 12))
    y = rng.integers(0, 3, 20)
    runs = []
    for _ in range(2):
        m = build(head_arch(3, 12, 3, 4, 3), 2)
        runs.append(train(m, x, y, TrainConfig(epochs=3, batch_size=6, seed=9)).train_loss)
    assert runs[0] == runs[1]


def test_divergence_reports_epoch():
    x = np.ones((4, 1, 4))
    x[0, 0, 0] = np.nan
    y = np.array([0, 1, 0, 1])
    with pytest.raises(Divergence) as e:
        train(build(ArchSpec((FLATTEN, linear(4, 2)), (1, 4))), x, y, TrainConfig(epochs=2))
    assert e.value.epoch == 0


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train(build(ArchSpec((FLATTEN, linear(4, 2)), (1, 4))), np.ones((3, 1, 4)), np.zeros(3, int),
              TrainConfig(epochs=1))


# ---------------------------------------------------------------- evaluation

def test_confusion_identity_for_perfect_predictor():
    y = np.repeat(np.arange(4), 3)
    r = score(np.eye(4)[y], y, 4)
    np.testing.assert_array_equal(r.confusion, 3 * np.eye(4, dtype=int))
    assert r.accuracy == 1.0


def test_constant_predictor_balanced():
    y = np.repeat(np.arange(10), 5)
    logits = np.zeros((50, 10))
    logits[:, 3] = 1
    r = score(logits, y, 10)
    assert r.accuracy == pytest.approx(0.1)


@given(st.lists(st.integers(0, 4), min_size=20, max_size=20))
def test_accuracy_is_mean_tpr_on_balanced(preds):
    y = np.repeat(np.arange(5), 4)
    r = EvalResult(0.0, confusion_matrix(y, np.array(preds), 5))
    acc = np.trace(r.confusion) / r.confusion.sum()
    assert acc == pytest.approx(r.per_class_tpr().mean())


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    m = build(ti46_aimc_arch(4, 200), 3)
    x = np.random.default_rng(0).normal(size=(3, 4, 200))
    m.logits(x, train=True)   # move BN running stats
    save_checkpoint(m, tmp_path / "ck", {"metrics": {"acc": 0.5}})
    m2, man = load_checkpoint(tmp_path / "ck")
    assert man["metrics"]["acc"] == 0.5
    for k, v in m.state().items():
        np.testing.assert_array_equal(v, m2.state()[k])
    np.testing.assert_array_equal(m.logits(x), m2.logits(x))


def test_skipping_input_grad_keeps_param_grads():
    rng = np.random.default_rng(4)
    m = build(head_arch(3, 30), 1)
    x = rng.normal(size=(4, 3, 30))
    g = rng.normal(size=(4, 10))
    m.logits(x, train=True)
    dx = m.backward(g)
    full = {k: grads[n].copy() for k, _, grads, n in m.params_and_grads()}
    m.logits(x, train=True)
    assert dx.shape == x.shape and m.backward(g, input_grad=False) is None
    for k, _, grads, n in m.params_and_grads():
        np.testing.assert_array_equal(grads[n], full[k])
