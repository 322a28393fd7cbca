import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from feddua.numcore import (
    ConfigError,
    ContractError,
    ModelSpec,
    backward,
    forward_loss,
    init_params,
    make_batches,
    make_rng,
    sgd_epoch,
)

LR4 = ModelSpec("logreg", 3, 4)
MLP = ModelSpec("mlp1", 3, 4, hidden_dim=5)


def naive_loss(spec, theta, x, y):
    """Scalar-by-scalar cross-entropy, independent of the vectorised path."""
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    total = 0.0
    for n in range(x.shape[0]):
        if spec.kind == "logreg":
            logits = []
            for k in range(c):
                z = theta[c * d + k]
                for j in range(d):
                    z += theta[k * d + j] * x[n, j]
                logits.append(z)
        else:
            hid = []
            for i in range(h):
                a = theta[h * d + i]
                for j in range(d):
                    a += theta[i * d + j] * x[n, j]
                hid.append(math.tanh(a))
            off = h * d + h
            logits = []
            for k in range(c):
                z = theta[off + c * h + k]
                for i in range(h):
                    z += theta[off + k * h + i] * hid[i]
                logits.append(z)
        m = max(logits)
        lse = m + math.log(sum(math.exp(z - m) for z in logits))
        total += lse - logits[y[n]]
    return total / x.shape[0]


def random_problem(spec, rng, n=8):
    theta = rng.normal(0, 0.7, spec.num_params)
    x = rng.normal(0, 1, (n, spec.input_dim))
    y = rng.integers(0, spec.num_classes, n)
    return theta, x, y


def central_diff(f, theta, h=1e-5):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def test_zero_weights_give_log_num_classes():
    x = make_rng(1).normal(size=(6, 3))
    y = np.array([0, 1, 2, 3, 0, 1])
    assert forward_loss(LR4, np.zeros(LR4.num_params), x, y) == pytest.approx(math.log(4), abs=1e-12)


def test_zero_margin_gives_log2():
    spec = ModelSpec("logreg", 2, 2)
    theta = np.array([1.0, -2.0, 1.0, -2.0, 0.5, 0.5])  # identical rows
    loss = forward_loss(spec, theta, np.array([[0.3, 0.7]]), np.array([1]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("spec", [LR4, MLP], ids=["logreg", "mlp1"])
def test_loss_matches_naive_oracle(spec):
    rng = make_rng(7)
    for _ in range(5):
        theta, x, y = random_problem(spec, rng)
        assert forward_loss(spec, theta, x, y) == pytest.approx(naive_loss(spec, theta, x, y), abs=1e-10)


def test_bias_gradient_vanishes_on_balanced_symmetric_batch():
    x = np.array([[1.0, 2.0, -1.0], [-1.0, -2.0, 1.0]] * 4)
    y = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    g = backward(LR4, np.zeros(LR4.num_params), x, y)
    np.testing.assert_allclose(g[-4:], 0.0, atol=1e-15)


@pytest.mark.parametrize("spec", [LR4, MLP], ids=["logreg", "mlp1"])
def test_gradient_matches_finite_differences(spec):
    rng = make_rng(11)
    worst = 0.0
    for _ in range(100):
        theta, x, y = random_problem(spec, rng)
        g = backward(spec, theta, x, y)
        fd = central_diff(lambda t: forward_loss(spec, t, x, y), theta)
        worst = max(worst, np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)))
    assert worst <= 1e-4


def test_batch_gradient_is_mean_of_sample_gradients():
    theta, x, y = random_problem(MLP, make_rng(3))
    per = [backward(MLP, theta, x[i : i + 1], y[i : i + 1]) for i in range(len(y))]
    np.testing.assert_allclose(backward(MLP, theta, x, y), np.mean(per, axis=0), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize(
    "x, y, theta",
    [
        (np.ones((2, 4)), np.zeros(2, int), None),
        (np.ones((2, 3)), np.array([0, 9]), None),
        (np.array([[np.nan, 0, 0]]), np.zeros(1, int), None),
        (np.ones((2, 3)), np.zeros(2, int), np.zeros(5)),
        (np.ones((0, 3)), np.zeros(0, int), None),
    ],
)
def test_contract_violations(x, y, theta):
    theta = np.zeros(LR4.num_params) if theta is None else theta
    with pytest.raises(ContractError):
        forward_loss(LR4, theta, x, y)
    with pytest.raises(ContractError):
        backward(LR4, theta, x, y)


def test_single_batch_epoch_delta_is_minus_eta_grad():
    theta, x, y = random_problem(LR4, make_rng(5))
    g = backward(LR4, theta, x, y)
    new, norms, delta = sgd_epoch(LR4, theta, 0.1, [(x, y)])
    np.testing.assert_array_equal(delta, (theta - 0.1 * g) - theta)
    assert norms == [pytest.approx(np.linalg.norm(g))]


def test_constant_gradient_epoch_scales_with_batches():
    # zero features: only biases move, and with eta tiny the gradient barely changes
    x = np.zeros((4, 3))
    y = np.array([0, 1, 1, 2])
    theta = np.zeros(LR4.num_params)
    g = backward(LR4, theta, x, y)
    eta, r = 1e-9, 6
    _, _, delta = sgd_epoch(LR4, theta, eta, [(x, y)] * r)
    assert np.linalg.norm(delta) == pytest.approx(eta * r * np.linalg.norm(g), rel=1e-6)


def test_epoch_matches_step_logging_oracle():
    rng = make_rng(9)
    theta = init_params(MLP, rng)
    batches = [random_problem(MLP, rng, n=4)[1:] for _ in range(5)]
    logged, cur = [], theta.copy()
    for xb, yb in batches:
        g = backward(MLP, cur, xb, yb)
        logged.append(g)
        cur = cur - 0.05 * g
    new, norms, delta = sgd_epoch(MLP, theta, 0.05, batches)
    np.testing.assert_allclose(delta, -0.05 * np.sum(logged, axis=0), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(norms, [np.linalg.norm(g) for g in logged], rtol=1e-12)


def test_epoch_identity_with_shuffled_batches():
    rng = make_rng(2)
    theta = init_params(MLP, rng)
    x = rng.normal(size=(37, 3))
    y = rng.integers(0, 4, 37)
    steps = []

    def spy(t, g):
        steps.append(g.copy())
        return g

    _, _, delta = sgd_epoch(MLP, theta, 0.1, make_batches(x, y, 8, rng), spy)
    resid = np.linalg.norm(delta + 0.1 * np.sum(steps, axis=0)) / np.linalg.norm(delta)
    assert resid <= 1e-12


@pytest.mark.parametrize("eta", [0.0, -0.1])
def test_nonpositive_eta_is_config_error(eta):
    theta, x, y = random_problem(LR4, make_rng(1))
    with pytest.raises(ConfigError):
        sgd_epoch(LR4, theta, eta, [(x, y)])


def test_same_seed_same_trajectory():
    def run(seed):
        rng = make_rng(seed, "demo")
        theta = init_params(MLP, rng)
        x = rng.normal(size=(20, 3))
        y = rng.integers(0, 4, 20)
        return sgd_epoch(MLP, theta, 0.1, make_batches(x, y, 4, rng))[0]

    assert run(4).tobytes() == run(4).tobytes()
    assert run(4).tobytes() != run(5).tobytes()


def test_named_streams_are_independent_of_call_order():
    a = make_rng(3, "x", 1).random(4)
    make_rng(3, "y").random(100)
    np.testing.assert_array_equal(a, make_rng(3, "x", 1).random(4))


def test_init_scale_and_zero_biases():
    theta = init_params(MLP, make_rng(0))
    w1, b1, w2, b2 = MLP.unpack(theta)
    assert np.all(np.abs(w1) <= 1 / np.sqrt(3)) and np.all(np.abs(w2) <= 1 / np.sqrt(5))
    assert not b1.any() and not b2.any()


def test_param_count_from_model_spec():
    assert ModelSpec("logreg", 16, 10).num_params == 170
    assert ModelSpec("mlp1", 16, 10, 64).num_params == 16 * 64 + 64 + 64 * 10 + 10


@settings(max_examples=30, deadline=None)
@given(seed=hst.integers(0, 2**32 - 1), eta=hst.floats(1e-3, 0.5))
def test_epoch_stays_finite(seed, eta):
    rng = make_rng(seed)
    theta = init_params(MLP, rng)
    x = rng.normal(size=(12, 3))
    y = rng.integers(0, 4, 12)
    new, norms, delta = sgd_epoch(MLP, theta, eta, make_batches(x, y, 5, rng))
    assert np.isfinite(new).all() and np.isfinite(delta).all()
    assert np.linalg.norm(delta) <= eta * sum(norms) * (1 + 1e-12)
