import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tomrl.approximator import (AdamState, Mlp, MlpSpec, adam_step, finite_diff_check, init_params,
                                mlp_forward, mlp_gradient, unpack)
from tomrl.errors import DimensionError, NumericalFault


def naive_forward(spec, params, x):
    """Loop-based forward pass used as an independent oracle."""
    acts = {"relu": lambda z: max(z, 0.0), "tanh": np.tanh, "sigmoid": lambda z: 1 / (1 + np.exp(-z)),
            "identity": lambda z: z}
    h = list(x)
    layers = unpack(spec, params)
    for i, (w, b) in enumerate(layers):
        name = spec.output_activation if i == len(layers) - 1 else spec.hidden_activation
        h = [acts[name](sum(h[k] * w[k, j] for k in range(len(h))) + b[j]) for j in range(w.shape[1])]
    return np.array(h)


def test_identity_linear_layer():
    """A 2->2 identity layer with zero bias returns its input."""
    spec = MlpSpec(2, (), 2)
    params = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    assert np.allclose(mlp_forward(spec, params, [0.3, -1.2]), [0.3, -1.2])


def test_zero_weights_sigmoid_is_half():
    """All-zero parameters with a sigmoid head give 0.5."""
    spec = MlpSpec(3, (4,), 1, "tanh", "sigmoid")
    out = mlp_forward(spec, np.zeros(spec.n_params), np.ones(3))
    assert out.shape == (1,) and out[0] == 0.5


@pytest.mark.parametrize("act", ["relu", "tanh", "sigmoid"])
def test_forward_matches_naive_oracle(act):
    """2-16-1 forward pass agrees with a scalar loop implementation to 1e-12."""
    rng = np.random.default_rng(1)
    spec = MlpSpec(2, (16,), 1, act, "identity")
    p = init_params(spec, rng)
    for x in rng.normal(size=(20, 2)):
        assert abs(mlp_forward(spec, p, x)[0] - naive_forward(spec, p, x)[0]) < 1e-12


def test_batched_matches_rows():
    """A batch evaluates each row independently."""
    rng = np.random.default_rng(2)
    spec = MlpSpec(3, (8, 8), 2, "tanh")
    p = init_params(spec, rng)
    x = rng.normal(size=(5, 3))
    out = mlp_forward(spec, p, x)
    assert np.allclose(out, np.stack([mlp_forward(spec, p, r) for r in x]), atol=1e-14)


def test_dimension_errors():
    """Wrong input width, parameter length or upstream shape raise DimensionError."""
    spec = MlpSpec(2, (4,), 1)
    p = np.zeros(spec.n_params)
    with pytest.raises(DimensionError):
        mlp_forward(spec, p, np.zeros(3))
    with pytest.raises(DimensionError):
        mlp_forward(spec, p[:-1], np.zeros(2))
    with pytest.raises(DimensionError):
        mlp_gradient(spec, p, np.zeros(2), np.ones(2))
    with pytest.raises(DimensionError):
        MlpSpec(0, (4,), 1)


@pytest.mark.parametrize("act,out_act", [("relu", "identity"), ("tanh", "sigmoid"), ("sigmoid", "tanh")])
def test_gradient_matches_finite_differences(act, out_act):
    """Parameter and input gradients agree with central differences (h=1e-5) below 1e-4."""
    rng = np.random.default_rng(3)
    spec = MlpSpec(2, (16,), 1, act, out_act)
    p = init_params(spec, rng)
    x = rng.normal(size=2)

    def loss(q):
        out = mlp_forward(spec, q, x)
        g, _ = mlp_gradient(spec, q, x, np.ones(1))
        return float(out[0]), g

    assert finite_diff_check(loss, p, h=1e-5) < 1e-4
    _, gx = mlp_gradient(spec, p, x, np.ones(1))
    h = 1e-5
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (mlp_forward(spec, p, x + e)[0] - mlp_forward(spec, p, x - e)[0]) / (2 * h)
        assert abs(fd - gx[i]) < 1e-4 * max(1.0, abs(fd))


def test_adam_zero_gradient_leaves_params():
    """A zero gradient moves nothing."""
    p = np.array([1.0, -2.0, 3.0])
    new, state = adam_step(p, np.zeros(3), AdamState.zeros(3, 0.1))
    assert np.array_equal(new, p) and state.step_count == 1


def test_adam_first_step_is_signed_learning_rate():
    """With bias correction the first step is about -lr * sign(g)."""
    p = np.zeros(3)
    g = np.array([0.5, -3.0, 1e-3])
    new, _ = adam_step(p, g, AdamState.zeros(3, 0.01))
    assert np.allclose(new, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_two_steps_match_scalar_oracle():
    """Two updates reproduce a hand-rolled scalar Adam to 1e-10."""
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    grads = [0.7, -0.2]
    x, m, v = 1.5, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    p, state = np.array([1.5]), AdamState.zeros(1, lr)
    for g in grads:
        p, state = adam_step(p, np.array([g]), state)
    assert abs(p[0] - x) < 1e-10


def test_adam_rejects_non_finite_gradient():
    """NaN gradients are a numerical fault, not a silent update."""
    with pytest.raises(NumericalFault):
        adam_step(np.zeros(2), np.array([np.nan, 0.0]), AdamState.zeros(2))


def test_adam_does_not_mutate_inputs():
    """adam_step returns fresh arrays."""
    p = np.ones(2)
    state = AdamState.zeros(2)
    adam_step(p, np.ones(2), state)
    assert np.array_equal(p, np.ones(2)) and state.step_count == 0 and not state.first_moment.any()


def test_finite_diff_check_on_quadratic():
    """The gradient checker reports ~0 error for ||p||^2 and flags a wrong gradient."""
    p = np.random.default_rng(4).normal(size=7)
    assert finite_diff_check(lambda q: (float(q @ q), 2 * q), p) < 1e-8
    assert finite_diff_check(lambda q: (float(q @ q), 3 * q), p) > 0.1


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.lists(st.integers(1, 6), max_size=2), st.integers(1, 3), st.integers(0, 10_000))
def test_gradient_property_random_shapes(din, hidden, dout, seed):
    """Random architectures: backprop matches finite differences."""
    rng = np.random.default_rng(seed)
    spec = MlpSpec(din, tuple(hidden), dout, "tanh", "identity")
    p = init_params(spec, rng)
    x = rng.normal(size=(3, din))
    up = rng.normal(size=(3, dout))

    def loss(q):
        g, _ = mlp_gradient(spec, q, x, up)
        return float(np.sum(up * mlp_forward(spec, q, x))), g

    assert finite_diff_check(loss, p) < 1e-4


def test_mlp_wrapper_trains_toward_target():
    """Repeated Adam steps on a squared error reduce it."""
    rng = np.random.default_rng(5)
    net = Mlp.create(MlpSpec(1, (8,), 1, "tanh"), rng, learning_rate=0.01)
    x = np.linspace(-1, 1, 16)[:, None]
    y = np.sin(2 * x)

    def err():
        return float(np.mean((net(x) - y) ** 2))

    before = err()
    for _ in range(300):
        g, _ = mlp_gradient(net.spec, net.params, x, 2 * (net(x) - y) / len(x))
        net.apply_gradient(g)
    assert err() < 0.5 * before
