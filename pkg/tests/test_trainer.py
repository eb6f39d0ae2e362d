import math

import numpy as np
import pytest

from augbn.data import synthetic_dataset
from augbn.errors import ConfigError
from augbn.model import build_reference_model
from augbn.trainer import (
    TrainConfig,
    accuracy,
    avgpool_backward,
    bn_train_backward,
    bn_train_forward,
    conv_backward,
    conv_forward,
    cross_entropy,
    cross_entropy_with_grad,
    linear_backward,
    loss_and_grads,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    sgd_step,
    train_forward,
    train_source_model,
)
from oracles import central_difference

STEP = 1e-3
TOL = 1e-3


def rel_err(analytic, numeric):
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


def numeric_grad(f, arr):
    g = np.zeros_like(arr)
    for index in np.ndindex(arr.shape):
        g[index] = central_difference(f, arr, index, STEP)
    return g


def rng_array(rng, *shape):
    return rng.standard_normal(shape)


@pytest.mark.parametrize("stride,pad,size", [(1, 1, 5), (2, 1, 6), (2, 0, 5), (1, 1, 16)])
def test_conv_gradients(stride, pad, size):
    rng = np.random.default_rng(stride + pad + size)
    x = rng_array(rng, 2, 2, size, size)
    w = rng_array(rng, 3, 2, 3, 3)
    b = rng_array(rng, 3)
    y, cache = conv_forward(x, w, b, stride, pad)
    r = rng_array(rng, *y.shape)

    def loss():
        return float((conv_forward(x, w, b, stride, pad)[0] * r).sum())

    dx, dw, db = conv_backward(r, cache)
    assert rel_err(dw, numeric_grad(loss, w)) < TOL
    assert rel_err(db, numeric_grad(loss, b)) < TOL
    if size <= 6:
        assert rel_err(dx, numeric_grad(loss, x)) < TOL
    else:
        # Spot-check a handful of input entries on the larger map.
        for index in [(0, 0, 0, 0), (1, 1, 7, 9), (0, 1, 15, 15), (1, 0, 3, 12)]:
            assert dx[index] == pytest.approx(central_difference(loss, x, index, STEP), rel=TOL, abs=1e-6)


def test_conv_gradients_across_row_chunks():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((24, 8, 32, 32)).astype(np.float32)
    w = rng.standard_normal((4, 8, 3, 3)).astype(np.float32)
    b = np.zeros(4, np.float32)
    y, cache = conv_forward(x, w, b, 1, 1)
    assert len(cache) > 1
    r = rng.standard_normal(y.shape).astype(np.float32)
    dx, dw, db = conv_backward(r, cache)
    dx1, dw1, db1 = conv_backward(r[:5], conv_forward(x[:5], w, b, 1, 1)[1])
    np.testing.assert_allclose(dx[:5], dx1, rtol=1e-5, atol=1e-5)
    parts = [conv_backward(r[i : i + 1], conv_forward(x[i : i + 1], w, b, 1, 1)[1]) for i in range(24)]
    np.testing.assert_allclose(dw, sum(p[1] for p in parts), rtol=1e-3, atol=1e-2)
    np.testing.assert_allclose(db, sum(p[2] for p in parts), rtol=1e-4, atol=1e-3)


@pytest.mark.parametrize("ghost", [0, 2])
def test_bn_gradients(ghost):
    rng = np.random.default_rng(4 + ghost)
    x = rng_array(rng, 4, 3, 3, 3) * 2 + 1
    gamma = rng_array(rng, 3)
    beta = rng_array(rng, 3)
    y, cache, _ = bn_train_forward(x, gamma, beta, 1e-5, ghost)
    r = rng_array(rng, *y.shape)

    def loss():
        return float((bn_train_forward(x, gamma, beta, 1e-5, ghost)[0] * r).sum())

    dx, dgamma, dbeta = bn_train_backward(r, cache)
    assert rel_err(dx, numeric_grad(loss, x)) < TOL
    assert rel_err(dgamma, numeric_grad(loss, gamma)) < TOL
    assert rel_err(dbeta, numeric_grad(loss, beta)) < TOL


def test_bn_batch_stats_and_ghost_groups():
    rng = np.random.default_rng(5)
    x = rng_array(rng, 4, 2, 3, 3)
    _, _, (mean, var) = bn_train_forward(x, np.ones(2), np.zeros(2), 1e-5)
    np.testing.assert_allclose(mean, x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(var, x.var(axis=(0, 2, 3)))
    y, _, (gmean, gvar) = bn_train_forward(x, np.ones(2), np.zeros(2), 1e-5, ghost=2)
    halves = [x[:2], x[2:]]
    np.testing.assert_allclose(gmean, np.mean([h.mean(axis=(0, 2, 3)) for h in halves], axis=0))
    np.testing.assert_allclose(gvar, np.mean([h.var(axis=(0, 2, 3)) for h in halves], axis=0))
    np.testing.assert_allclose(y[:2].mean(axis=(0, 2, 3)), 0, atol=1e-12)


def test_relu_gradient():
    rng = np.random.default_rng(6)
    x = rng_array(rng, 2, 3, 4)
    x[np.abs(x) < 0.01] = 0.5  # keep clear of the kink
    r = rng_array(rng, *x.shape)
    assert rel_err(relu_backward(r, x), numeric_grad(lambda: float((np.maximum(x, 0) * r).sum()), x)) < TOL


@pytest.mark.parametrize("k,stride", [(2, 2), (3, 1)])
def test_pool_gradients(k, stride):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng_array(rng, 2, 2, 6, 6)
    y = maxpool_forward(x, k, stride)
    r = rng_array(rng, *y.shape)
    dmax = maxpool_backward(r, x, y, k, stride)
    assert rel_err(dmax, numeric_grad(lambda: float((maxpool_forward(x, k, stride) * r).sum()), x)) < TOL

    def avg():
        view = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        return view.mean(axis=(4, 5))

    r = rng_array(rng, *avg().shape)
    davg = avgpool_backward(r, x.shape, k, stride)
    assert rel_err(davg, numeric_grad(lambda: float((avg() * r).sum()), x)) < TOL


def test_maxpool_routes_ties_once():
    x = np.ones((1, 1, 2, 2))
    y = maxpool_forward(x, 2, 2)
    dx = maxpool_backward(np.ones_like(y), x, y, 2, 2)
    assert dx.sum() == 1 and dx[0, 0, 0, 0] == 1


def test_linear_and_cross_entropy_gradients():
    rng = np.random.default_rng(8)
    x, w, b = rng_array(rng, 3, 5), rng_array(rng, 4, 5), rng_array(rng, 4)
    labels = np.array([0, 3, 1])

    def loss():
        return cross_entropy(x @ w.T + b, labels)

    _, dlogits = cross_entropy_with_grad(x @ w.T + b, labels)
    dx, dw, db = linear_backward(dlogits, x, w)
    assert rel_err(dx, numeric_grad(loss, x)) < TOL
    assert rel_err(dw, numeric_grad(loss, w)) < TOL
    assert rel_err(db, numeric_grad(loss, b)) < TOL


@pytest.mark.parametrize("arch", ["tiny-cnn", "resnet-mini"])
def test_whole_network_gradients(arch):
    """End-to-end check, covering residual joins and strided projections.

    Stacked ReLU kinks and 3-row batch statistics make the loss curved enough that
    a 1e-3 step carries ~1% truncation error here, so this check uses 1e-5 in float64.
    """
    model = build_reference_model(arch, 3, seed=1)
    params = {k: v.astype(np.float64) for k, v in model.params.items()}
    rng = np.random.default_rng(9)
    x = rng.random((3, 3, 8, 8))
    labels = np.array([0, 2, 1])

    def loss():
        return cross_entropy(train_forward(model, params, x)[0], labels)

    _, _, grads, _ = loss_and_grads(model, params, x, labels)
    probe = np.random.default_rng(10)
    names = ("c1.conv.weight", "c2.bn.gamma", "fc.bias") if arch == "tiny-cnn" else ("stem.weight", "g2b0.add.weight", "head.bn.gamma")
    for name in names:
        arr = params[name]
        for _ in range(4):
            index = tuple(int(probe.integers(s)) for s in arr.shape)
            num = central_difference(loss, arr, index, 1e-5)
            assert grads[name][index] == pytest.approx(num, rel=TOL, abs=1e-6), (name, index)


def test_cross_entropy_examples():
    assert cross_entropy(np.zeros(7), 3) == pytest.approx(math.log(7))
    assert cross_entropy(np.array([50.0, 0, 0]), 0) == pytest.approx(0, abs=1e-12)
    with pytest.raises(ConfigError):
        cross_entropy(np.zeros(3), 3)


def test_sgd_step_rules():
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.01)
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.5])}
    velocity = {}
    p1 = sgd_step(p, g, cfg, velocity)
    np.testing.assert_allclose(p1["w"], p["w"] - 0.1 * (g["w"] + 0.01 * p["w"]))
    p2 = sgd_step(p1, g, cfg, velocity)
    np.testing.assert_allclose(p2["w"], p1["w"] - 0.1 * (1.9 * g["w"] + 0.01 * p1["w"]))
    frozen = sgd_step(p, g, TrainConfig(learning_rate=0.0))
    assert frozen["w"].tobytes() == p["w"].tobytes()


def test_config_validation():
    for bad in (dict(epochs=0), dict(bn_momentum=1.0), dict(lr_schedule="step"), dict(learning_rate=-1), dict(ghost_batch=-2)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    cfg = TrainConfig(learning_rate=1.0)
    assert cfg.lr_at(0, 10) == 1.0 and cfg.lr_at(5, 10) == pytest.approx(0.5)


def test_first_loss_near_log_class_count():
    data = synthetic_dataset(10, 8, image_size=16, seed=0)
    model = build_reference_model("tiny-cnn", 10, seed=0)
    x = np.concatenate([d.image for d in data])
    y = np.array([d.label for d in data])
    loss, *_ = loss_and_grads(model, dict(model.params), x, y)
    assert abs(loss - math.log(10)) <= 0.2


def test_lr_zero_keeps_parameters():
    data = synthetic_dataset(2, 4, image_size=8, seed=0)
    model = build_reference_model("tiny-cnn", 2, seed=0)
    out = train_source_model("tiny-cnn", data, TrainConfig(epochs=1, batch_size=4, learning_rate=0.0), model=model)
    for k, v in model.params.items():
        assert out.params[k].tobytes() == v.tobytes()


def test_running_stats_converge_on_constant_input():
    # A constant image makes the first BN layer see the same batch stats every step.
    x = np.full((4, 3, 8, 8), 0.3, dtype=np.float32)
    labels = np.array([0, 1, 0, 1])
    model = build_reference_model("tiny-cnn", 2, seed=0)
    cfg = TrainConfig(epochs=250, batch_size=4, learning_rate=0.0, bn_momentum=0.1)
    out = train_source_model("tiny-cnn", (x, labels), cfg, model=model)
    _, _, stats = train_forward(model, dict(model.params), x)
    mean, _ = stats["c1.bn"]
    np.testing.assert_allclose(out.bn_stats["c1.bn"].mean, mean, atol=1e-3)


def test_ema_error_shrinks_monotonically_in_expectation():
    rng = np.random.default_rng(0)
    m, true_mean, trials, steps = 0.1, 2.0, 400, 40
    running = np.zeros(trials)
    errors = []
    for _ in range(steps):
        batch_means = true_mean + rng.normal(0, 0.5, trials)
        running = (1 - m) * running + m * batch_means
        errors.append(np.abs(running - true_mean).mean())
    # The expected error decays geometrically until it hits the noise floor.
    assert all(b < a for a, b in zip(errors[:20], errors[1:21]))
    assert errors[-1] < 0.2


def test_training_is_deterministic():
    data = synthetic_dataset(3, 4, image_size=8, seed=2)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=5)
    a = train_source_model("tiny-cnn", data, cfg)
    b = train_source_model("tiny-cnn", data, cfg)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_train_rejects_bad_labels():
    data = synthetic_dataset(3, 2, image_size=8)
    with pytest.raises(ConfigError):
        train_source_model("tiny-cnn", data, TrainConfig(epochs=1), class_count=2)
    with pytest.raises(ConfigError):
        train_source_model("tiny-cnn", (np.zeros((0, 3, 8, 8)), np.zeros(0, int)), TrainConfig(epochs=1))


def test_overfit_ten_samples():
    data = synthetic_dataset(5, 2, image_size=16, seed=3)
    history = []
    cfg = TrainConfig(epochs=200, batch_size=10, learning_rate=0.05, weight_decay=0.0, lr_schedule="constant")
    model = train_source_model("tiny-cnn", data, cfg, history=history)
    x = np.concatenate([d.image for d in data])
    assert accuracy(model, x, [d.label for d in data]) == 1.0
    assert history[-1]["accuracy"] == 1.0
    losses = [h["loss"] for h in history]
    # Non-increasing within every 5-epoch window: each window ends no higher than it starts.
    assert all(losses[i + 4] <= losses[i] + 1e-9 for i in range(len(losses) - 4))


def test_tiny_cnn_learns_synthetic_classes():
    data = synthetic_dataset(4, 25, image_size=16, seed=4)
    history = []
    train_source_model("tiny-cnn", data, TrainConfig(epochs=50, batch_size=20, learning_rate=0.05), history=history)
    assert max(h["accuracy"] for h in history) >= 0.95


def test_flip_jitter_is_seeded_and_keeps_range():
    from augbn.trainer import flip_jitter

    batch = np.random.default_rng(0).random((6, 3, 8, 8)).astype(np.float32)
    a = flip_jitter(batch, np.random.default_rng(1))
    b = flip_jitter(batch, np.random.default_rng(1))
    assert a.tobytes() == b.tobytes() and a.shape == batch.shape and a.dtype == batch.dtype
    assert a.min() >= 0 and a.max() <= 1
    # Zero spread leaves only flips, which preserve every pixel value.
    c = flip_jitter(batch, np.random.default_rng(2), spread=0.0)
    np.testing.assert_allclose(np.sort(c.reshape(6, -1)), np.sort(batch.reshape(6, -1)), atol=1e-6)
