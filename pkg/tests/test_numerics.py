import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from covrep.numerics import (
    Adam,
    DomainError,
    GradientBundle,
    MlpParams,
    Rng,
    ShapeError,
    backward,
    chi2_cdf,
    chi2_inv,
    chi2_pdf,
    forward,
    gammainc_lower,
    init_mlp,
    linear_map,
    sgd_step,
    stream_id,
)
from covrep.numerics.mlp import backprop, compose_identity, forward_cache

ACTIVATIONS = ("relu", "tanh", "identity", "sigmoid")


def test_identity_network_passes_input_through():
    net = compose_identity([2, 2, 2])
    assert np.array_equal(forward(net, np.array([1.0, 2.0])), [1.0, 2.0])


def test_zero_relu_network_outputs_zero():
    net = MlpParams((3, 4, 1), [np.zeros((3, 4)), np.zeros((4, 1))], [np.zeros(4), np.zeros(1)], "relu")
    assert forward(net, np.array([5.0, -2.0, 7.0]))[0] == 0.0


def test_hand_evaluated_tanh_net():
    W1 = np.array([[0.1, -0.2], [0.3, 0.4]])
    b1 = np.array([0.05, -0.1])
    W2 = np.array([[0.5], [-0.6]])
    b2 = np.array([0.2])
    net = MlpParams((2, 2, 1), [W1, W2], [b1, b2], "tanh")
    x = np.array([1.0, 2.0])
    h0 = math.tanh(0.1 * 1 + 0.3 * 2 + 0.05)
    h1 = math.tanh(-0.2 * 1 + 0.4 * 2 - 0.1)
    expected = 0.5 * h0 - 0.6 * h1 + 0.2
    assert forward(net, x)[0] == pytest.approx(expected, abs=1e-15)


def test_input_dimension_mismatch_raises():
    net = init_mlp((3, 2, 1), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(net, np.ones(4))


def test_inconsistent_weight_shapes_rejected():
    with pytest.raises(ShapeError):
        MlpParams((2, 3, 1), [np.zeros((2, 3)), np.zeros((2, 1))], [np.zeros(3), np.zeros(1)])


def test_nonfinite_weights_rejected():
    with pytest.raises(ValueError):
        MlpParams((1, 1), [np.array([[np.nan]])], [np.zeros(1)])


def test_backward_linear_scalar():
    net = MlpParams((1, 1), [np.array([[3.0]])], [np.zeros(1)], "identity")
    loss, g = backward(net, np.array([1.0]), np.array([0.0]))
    assert loss == 9.0
    assert g.weights[0][0, 0] == 6.0


def test_backward_perfect_fit_has_zero_gradient():
    net = init_mlp((3, 5, 1), np.random.default_rng(1), activation="tanh")
    x = np.array([0.2, -0.4, 0.9])
    loss, g = backward(net, x, forward(net, x))
    assert loss == 0.0
    assert np.all(g.flat() == 0.0)


def _fd_check(net, X, T, step=1e-5):
    _, g = backward(net, X, T)
    theta = net.flat()
    fd = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = step
        lp, _ = backward(net.with_flat(theta + e), X, T)
        lm, _ = backward(net.with_flat(theta - e), X, T)
        fd[j] = (lp - lm) / (2 * step)
    an = g.flat()
    return np.max(np.abs(an - fd) / np.maximum(1.0, np.abs(fd)))


def test_gradient_matches_finite_differences_on_100_random_nets():
    gen = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        act = ACTIVATIONS[trial % 4]
        out_act = "sigmoid" if trial % 5 == 0 else "identity"
        depth = gen.integers(1, 4)
        dims = [int(gen.integers(1, 5)) for _ in range(depth + 1)] + [int(gen.integers(1, 3))]
        net = init_mlp(dims, gen, activation=act, output_activation=out_act)
        net = net.replace(net.weights, [gen.normal(0, 0.3, b.shape) for b in net.biases])
        X = gen.normal(size=(3, dims[0]))
        T = gen.normal(size=(3, dims[-1]))
        worst = max(worst, _fd_check(net, X, T))
    assert worst <= 1e-4


def test_logit_gradient_matches_log_loss_finite_differences():
    gen = np.random.default_rng(7)
    net = init_mlp((3, 4, 1), gen, activation="tanh", output_activation="sigmoid")
    X = gen.normal(size=(6, 3))
    y = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 0.0])

    def log_loss(theta):
        p = forward(net.with_flat(theta), X)[:, 0]
        return -np.sum(y * np.log(p) + (1 - y) * np.log1p(-p))

    out, cache = forward_cache(net, X)
    g, _ = backprop(net, cache, out - y[:, None], grad_at_logit=True)
    theta = net.flat()
    fd = np.array([(log_loss(theta + e) - log_loss(theta - e)) / 2e-6 for e in np.eye(theta.size) * 1e-6])
    assert np.allclose(g.flat(), fd, rtol=1e-5, atol=1e-7)


def test_identity_net_equals_composed_affine_map():
    gen = np.random.default_rng(3)
    net = init_mlp((4, 6, 5, 2), gen, activation="identity")
    net = net.replace(net.weights, [gen.normal(size=b.shape) for b in net.biases])
    W = np.eye(4)
    b = np.zeros(4)
    for Wi, bi in zip(net.weights, net.biases):
        b = b @ Wi + bi
        W = W @ Wi
    X = gen.normal(size=(7, 4))
    assert np.allclose(forward(net, X), X @ W + b, atol=1e-12)
    assert np.allclose(forward(linear_map(W, b), X), X @ W + b, atol=1e-12)


def test_sgd_zero_rate_and_arithmetic():
    net = MlpParams((1, 1), [np.array([[1.0]])], [np.zeros(1)], "identity")
    g = GradientBundle([np.array([[2.0]])], [np.zeros(1)])
    assert sgd_step(net, g, 0.0).equals(net)
    stepped = sgd_step(net, g, 0.5)
    assert stepped.weights[0][0, 0] == 0.0
    assert net.weights[0][0, 0] == 1.0  # caller's params untouched


def test_sgd_two_steps_equal_one_doubled():
    gen = np.random.default_rng(4)
    net = init_mlp((3, 4, 1), gen)
    g = GradientBundle([gen.normal(size=w.shape) for w in net.weights], [gen.normal(size=b.shape) for b in net.biases])
    a = sgd_step(sgd_step(net, g, 0.125), g, 0.125)
    b = sgd_step(net, g, 0.25)
    assert np.allclose(a.flat(), b.flat(), rtol=0, atol=1e-15)


def test_sgd_negative_rate_rejected():
    net = init_mlp((2, 1), np.random.default_rng(0))
    with pytest.raises(ValueError):
        sgd_step(net, GradientBundle.zeros_like(net), -0.1)


def test_adam_reduces_quadratic_loss():
    gen = np.random.default_rng(5)
    net = init_mlp((3, 1), gen, activation="identity")
    X = gen.normal(size=(50, 3))
    y = X @ np.array([[1.0], [-2.0], [0.5]])
    opt = Adam(0.05)
    first, _ = backward(net, X, y)
    for _ in range(300):
        _, g = backward(net, X, y)
        net = opt.step(net, g)
    last, _ = backward(net, X, y)
    assert last < 1e-3 * first


def test_rng_same_stream_reproduces_and_streams_differ():
    a = Rng(7).child("gen/1").generator().random(5)
    b = Rng(7).child("gen/1").generator().random(5)
    c = Rng(7).child("gen/2").generator().random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert stream_id("x") == stream_id("x") and stream_id("x") != stream_id("y")


def test_init_is_deterministic_per_stream():
    a = init_mlp((5, 4, 2), Rng(1).child("init").generator())
    b = init_mlp((5, 4, 2), Rng(1).child("init").generator())
    assert a.equals(b)


def test_glorot_bounds():
    net = init_mlp((30, 20, 10), np.random.default_rng(0))
    for W in net.weights:
        lim = math.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        assert np.all(np.abs(W) <= lim)
    assert all(np.all(b == 0) for b in net.biases)


# --- chi-squared --------------------------------------------------------------


def test_chi2_cdf_zero_and_closed_form():
    for d in (1, 2, 20, 500):
        assert chi2_cdf(0.0, d) == 0.0
    assert chi2_cdf(2.0, 2) == pytest.approx(1 - math.exp(-1), abs=1e-14)
    assert chi2_inv(1 - math.exp(-1), 2) == pytest.approx(2.0, abs=1e-9)
    assert chi2_inv(0.5, 1) == pytest.approx(0.454936, abs=1e-6)


@pytest.mark.parametrize("d", [1, 20, 500])
@pytest.mark.parametrize("p", [0.001, 0.01, 0.5])
def test_chi2_roundtrip_examples(p, d):
    assert abs(chi2_cdf(chi2_inv(p, d), d) - p) <= 1e-10


@pytest.mark.parametrize("df", [1, 2, 10, 20, 50, 300, 500])
def test_chi2_roundtrip_grid(df):
    for p in np.linspace(0.001, 0.999, 41):
        x = chi2_inv(p, df)
        assert abs(chi2_cdf(x, df) - p) <= 1e-8
    for x in np.linspace(0.1, 3 * df + 10, 25):
        p = chi2_cdf(x, df)
        if 1e-8 < p < 1 - 1e-8:
            assert abs(chi2_inv(p, df) - x) <= 1e-8 * max(1.0, x)


@pytest.mark.parametrize("df", [1, 3, 50, 300])
def test_chi2_matches_scipy(df):
    for x in np.linspace(0.01, 2 * df + 20, 30):
        assert chi2_cdf(x, df) == pytest.approx(stats.chi2.cdf(x, df), abs=1e-12)
        assert chi2_pdf(x, df) == pytest.approx(stats.chi2.pdf(x, df), rel=1e-9, abs=1e-300)
    for p in (1e-6, 0.001, 0.3, 0.999):
        assert chi2_inv(p, df) == pytest.approx(stats.chi2.ppf(p, df), rel=1e-8)


def test_chi2_inverse_strictly_increasing():
    xs = [chi2_inv(p, 7) for p in np.linspace(0.01, 0.99, 50)]
    assert all(b > a for a, b in zip(xs, xs[1:]))


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 400.0), st.floats(0.0, 400.0), st.integers(1, 300))
def test_chi2_cdf_monotone_and_bounded(x1, x2, df):
    lo, hi = sorted((x1, x2))
    a, b = chi2_cdf(lo, df), chi2_cdf(hi, df)
    assert 0.0 <= a <= b <= 1.0


def test_chi2_domain_errors():
    with pytest.raises(DomainError):
        chi2_cdf(-1.0, 2)
    with pytest.raises(DomainError):
        chi2_cdf(1.0, 0)
    for p in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(DomainError):
            chi2_inv(p, 3)


def test_gammainc_matches_exponential_case():
    # P(1, x) = 1 - exp(-x)
    for x in (0.1, 1.0, 5.0, 40.0):
        assert gammainc_lower(1.0, x) == pytest.approx(1 - math.exp(-x), abs=1e-14)
