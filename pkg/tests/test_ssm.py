import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssm_peft import num
from ssm_peft.num import RngStream
from ssm_peft.ssm import (
    DeepS4Layer,
    S4ChannelParams,
    S6Block,
    StackedModel,
    deep_s4_layer_forward,
    discretize,
    frozen_values,
    init_model,
    init_s6_block,
    kernel_discrete,
    model_forward,
    model_graph,
    s4_conv_forward,
    s4_kernel,
    s4_scan,
    s6_forward,
    s6_parameters,
)
from ssm_peft.theory import random_channel


def _channel(abar, bbar, c, h0=None):
    """Continuous params whose ZOH discretization at dt=1 is (abar, bbar)."""
    a = np.log(np.atleast_1d(abar))
    b = np.atleast_1d(bbar) * a / np.expm1(a)
    return S4ChannelParams(a, b, c, 0.0, h0)


def test_zoh_example():
    abar, bbar = discretize(-1.0, 1.0, math.log(2))
    assert abar == pytest.approx(0.5, abs=1e-15)
    assert bbar == pytest.approx(0.5, abs=1e-15)


def test_bilinear_example():
    abar, bbar = discretize(-2.0, 1.0, 1.0, "bilinear")
    assert abar == 0.0
    assert bbar == 0.5


def test_zoh_zero_a_limit():
    assert discretize(0.0, 3.0, 0.25) == (1.0, 0.75)


def test_bilinear_singular():
    with pytest.raises(ZeroDivisionError):
        discretize(2.0, 1.0, 1.0, "bilinear")


def test_nonpositive_step_rejected():
    with pytest.raises(ValueError):
        discretize(-1.0, 1.0, 0.0)


@pytest.mark.parametrize("method", ["zoh", "bilinear"])
def test_small_step_limit(method):
    abar, bbar = discretize(-3.0, 2.0, 1e-12, method)
    assert abar == pytest.approx(1.0, abs=1e-10)
    assert bbar == pytest.approx(0.0, abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-50, -1e-3), dt=st.floats(1e-4, 10.0))
def test_stability(a, dt):
    z, _ = discretize(a, 1.0, dt, "zoh")
    bl, _ = discretize(a, 1.0, dt, "bilinear")
    assert 0.0 <= z < 1.0
    assert abs(bl) < 1.0


def test_scan_zero_input():
    y, h = s4_scan(_channel([0.5, 0.3], [1.0, 2.0], [1.0, 1.0]), np.zeros(5))
    assert np.all(y == 0) and np.all(h == 0)


def test_scan_impulse_example():
    y, _ = s4_scan(_channel(0.5, 1.0, 1.0), np.array([1.0, 0.0, 0.0]))
    assert np.allclose(y, [1.0, 0.5, 0.25], atol=1e-15)


def test_scan_state_decay_example():
    y, _ = s4_scan(_channel(0.5, 1.0, 1.0, h0=[1.0]), np.zeros(3))
    assert np.allclose(y, [0.5, 0.25, 0.125], atol=1e-15)


def test_scan_rejects_empty():
    with pytest.raises(ValueError):
        s4_scan(_channel(0.5, 1.0, 1.0), np.zeros(0))


def test_kernel_example():
    assert np.allclose(s4_kernel(_channel(0.5, 1.0, 1.0), 3), [1.0, 0.5, 0.25], atol=1e-15)


def test_kernel_zero_c():
    assert np.all(s4_kernel(_channel([0.5, 0.2], [1.0, 1.0], [0.0, 0.0]), 6) == 0)


def test_kernel_matches_iterated_powers(rng):
    abar, bbar, c = random_channel(rng, 5)
    K = kernel_discrete(abar, bbar, c, 40)
    direct = np.array([np.sum(c * abar**t * bbar) for t in range(40)])
    assert np.allclose(K, direct, rtol=1e-13, atol=1e-15)


def test_conv_identity_kernel(rng):
    x = rng.normal((9,))
    k = np.zeros(9)
    k[0] = 1.0
    assert np.array_equal(s4_conv_forward(k, x), x)


def test_conv_impulse_returns_kernel(rng):
    k = rng.normal((9,))
    x = np.zeros(9)
    x[0] = 1.0
    assert np.array_equal(s4_conv_forward(k, x), k)


def test_conv_length_mismatch():
    with pytest.raises(ValueError):
        s4_conv_forward(np.ones(3), np.ones(4))


def test_conv_matches_scan_100_instances():
    r = RngStream(5)
    for t in range(100):
        s = r.spawn(t)
        H, N = int(s.integers((), 1, 17)), int(s.integers((), 1, 129))
        params = S4ChannelParams(-s.uniform((H,), 0.1, 5), s.normal((H,)), s.normal((H,)), s.uniform((), -5, 0))
        x = s.normal((N,))
        y_scan, _ = s4_scan(params, x)
        y_conv = s4_conv_forward(s4_kernel(params, N), x)
        assert np.max(np.abs(y_scan - y_conv)) <= 1e-9 * max(1.0, np.max(np.abs(y_scan)))


def _layer(rng, D, H, W=None, beta=None, u=None, c=None):
    a = -rng.uniform((D, H), 0.5, 3.0)
    return DeepS4Layer(
        a,
        rng.normal((D, H)),
        rng.normal((D, H)) if c is None else c,
        rng.uniform((D,), -3, -1),
        rng.normal((D, D)) if W is None else W,
        rng.normal((D,)) if beta is None else beta,
        rng.normal((D,)) if u is None else u,
    )


def test_layer_reduces_to_scan(rng):
    layer = _layer(rng, 1, 3, W=np.eye(1), beta=np.zeros(1), u=np.zeros(1))
    x = rng.normal((1, 20))
    y = deep_s4_layer_forward(layer, x, "linear")
    assert np.allclose(y[0], s4_scan(layer.channel(0), x[0])[0], atol=1e-15)


def test_layer_pass_through(rng):
    D, H = 4, 3
    layer = _layer(rng, D, H, W=np.zeros((D, D)), beta=np.zeros(D), u=np.ones(D), c=np.zeros((D, H)))
    X = rng.normal((D, 11))
    assert np.array_equal(deep_s4_layer_forward(layer, X, "linear"), X)


def test_channel_independence(rng):
    layer = _layer(rng, 3, 4)
    X = rng.normal((3, 16))
    X2 = X.copy()
    X2[2] += rng.normal((16,))
    a = deep_s4_layer_forward(layer, X, pre_mix=True)
    b = deep_s4_layer_forward(layer, X2, pre_mix=True)
    assert np.array_equal(a[:2], b[:2])
    assert not np.array_equal(a[2], b[2])


def test_layer_shape_validation(rng):
    with pytest.raises(ValueError):
        DeepS4Layer(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 2)), np.zeros(2), np.eye(2), np.zeros(2), np.zeros(2))


def test_s6_masked_a_forgets_history(rng):
    block = init_s6_block(rng, 4, 3, 1)
    block = S6Block(np.full((4, 3), -1e4), block.w_b, block.w_c, block.w_dt_down, block.w_dt_up, block.beta_dt, block.w_in)
    X = rng.normal((4, 10))
    abar, _, _ = s6_parameters(block, X)
    from ssm_peft.ssm import s6_step_sizes

    delta = s6_step_sizes(block, block.w_in @ X).T[:, :, None]
    # exp(-1e4 * delta): <= exp(-10) at delta = 1e-3, exactly 0 once delta >= 0.075
    assert np.all(abar <= np.exp(-1e4 * delta) * (1 + 1e-12))
    assert np.max(abar) <= math.exp(-10)
    assert np.all(abar[np.broadcast_to(delta, abar.shape) >= 0.075] == 0.0)
    X2 = X.copy()
    X2[:, :5] = rng.normal((4, 5))
    Y, Y2 = s6_forward(block, X), s6_forward(block, X2)
    assert np.allclose(Y[:, 5:], Y2[:, 5:], rtol=1e-4, atol=1e-6)


def test_s6_masked_a_underflows_for_large_steps(rng):
    block = init_s6_block(rng, 4, 3, 1)
    block = S6Block(np.full((4, 3), -1e4), block.w_b, block.w_c, block.w_dt_down, block.w_dt_up, np.full(4, 1.0), block.w_in)
    X = rng.normal((4, 10)) * 0.01
    abar, _, _ = s6_parameters(block, X)
    assert np.all(abar == 0.0)
    X2 = X.copy()
    X2[:, :5] = 0.0
    assert np.array_equal(s6_forward(block, X)[:, 5:], s6_forward(block, X2)[:, 5:])


def test_s6_zero_wc(rng):
    b = init_s6_block(rng, 4, 3, 2)
    b = S6Block(b.a, b.w_b, np.zeros_like(b.w_c), b.w_dt_down, b.w_dt_up, b.beta_dt, b.w_in)
    assert np.all(s6_forward(b, rng.normal((4, 7))) == 0)


def test_s6_rank_zero_rejected(rng):
    b = init_s6_block(rng, 4, 3, 1)
    with pytest.raises(ValueError):
        S6Block(b.a, b.w_b, b.w_c, np.zeros((0, 4)), np.zeros((4, 0)), b.beta_dt, b.w_in)


def test_s6_step_sizes_positive(rng):
    b = init_s6_block(rng, 5, 2, 2)
    Z = b.w_in @ rng.normal((5, 30)) * 50
    from ssm_peft.ssm import s6_step_sizes

    assert np.all(s6_step_sizes(b, Z) > 0)


def test_s6_with_constant_parameters_is_s4(rng):
    """Constant Delta and input-independent B, C: S6 equals per-channel S4 with ZOH abar and Euler bbar."""
    D, H = 3, 4
    a = -rng.uniform((D, H), 0.5, 2.0)
    Bc, Cc = rng.normal((H,)), rng.normal((H,))
    dt = 0.3
    X = rng.normal((D, 25))
    # constant Delta: zero input weights, bias softplus^-1(dt)
    block = S6Block(a, np.zeros((H, D)), np.zeros((H, D)), np.zeros((1, D)), np.zeros((D, 1)), np.full(D, math.log(math.expm1(dt))), np.eye(D))
    abar, _, _ = s6_parameters(block, X)
    assert np.allclose(abar, np.exp(dt * a)[None], atol=1e-15)
    # run the S6 recurrence by hand with the constant B, C substituted
    h = np.zeros((D, H))
    Y = np.empty_like(X)
    for t in range(X.shape[1]):
        h = abar[t] * h + dt * Bc[None, :] * X[:, t][:, None]
        Y[:, t] = h @ Cc
    for d in range(D):
        y, _ = s4_scan(S4ChannelParams(a[d], Bc, Cc, math.log(dt)), X[d])
        # S4 uses ZOH bbar; rescale to the Euler form used by S6
        ratio = (np.exp(dt * a[d]) - 1) / (a[d] * dt)
        y_euler, _ = s4_scan(S4ChannelParams(a[d], Bc / ratio, Cc, math.log(dt)), X[d])
        assert np.allclose(Y[d], y_euler, atol=1e-12)
        assert not np.allclose(Y[d], y)


def test_model_forward_experiment_shape_finite():
    model = init_model(RngStream(0), 4, 64, 8)
    X = RngStream(1).integers((64, 200), 0, 10)
    Y, logits = model_forward(model, X)
    assert Y.shape == (64, 200) and logits is None
    assert np.all(np.isfinite(Y))


def test_single_layer_model_matches_layer(rng):
    model = init_model(rng, 1, 5, 3, activation="linear", classes=5)
    model = StackedModel(model.layers, model.activations, np.eye(5), np.zeros(5))
    X = rng.normal((5, 12))
    Y, logits = model_forward(model, X)
    assert np.array_equal(Y, deep_s4_layer_forward(model.layers[0], X, "linear"))
    assert np.allclose(logits, Y[:, -1])


@pytest.mark.parametrize("kind", ["s4", "s6"])
def test_graph_matches_reference(kind, rng):
    model = init_model(rng, 2, 6, 3, activation="relu", kind=kind, r=2, classes=3)
    h0 = {i: rng.normal((6, 3)) for i in range(2)}
    model = model.replace({f"layers.{i}.h0": v for i, v in h0.items()})
    X = rng.normal((2, 6, 15))
    Z, logits = model_graph(model, frozen_values(model), X, h0s=h0)
    for s in range(2):
        Y, lg = model_forward(model, X[s])
        assert np.allclose(Z.value[s], Y, atol=1e-12)
        assert np.allclose(logits.value[s], lg, atol=1e-12)


def test_four_layer_mse_grad_check():
    model = init_model(RngStream(3), 4, 3, 2, activation="linear")
    X = RngStream(4).normal((1, 3, 10))
    Y = RngStream(5).normal((1, 3, 10)) * 0.01 + model_forward(model, X[0])[0]
    params = model.named_parameters()

    def loss(nodes):
        out, _ = model_graph(model, {**frozen_values(model), **nodes}, X)
        d = out - num.constant(Y)
        return num.mean(d * d)

    assert num.grad_check(loss, dict(params), eps=1e-5) <= 1e-4


def test_parameter_count_of_frozen_model():
    model = init_model(RngStream(0), 4, 64, 8)
    assert model.num_parameters() == 4 * (64 * (3 * 8 + 1) + 64 * 64 + 2 * 64) == 23296


def test_models_are_immutable(rng):
    model = init_model(rng, 1, 3, 2)
    with pytest.raises(ValueError):
        model.layers[0].W[0, 0] = 1.0
