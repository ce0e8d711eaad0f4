"""Small numpy MLPs with hand-written reverse-mode gradients and Adam.

Parameters live in one flat vector per network. Layer ``l`` occupies a
contiguous slice holding its weight matrix (``fan_in x fan_out``, row-major)
followed by its bias. Every function here is pure: inputs are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericalFault

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(name: str, z):
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return _sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


def _activation_slope(name: str, y):
    """Derivative of the activation expressed through its output ``y``."""
    if name == "identity":
        return None
    if name == "relu":
        return (y > 0.0).astype(y.dtype)
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_layers: tuple[int, ...]
    output_dim: int
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        dims = (self.input_dim, *self.hidden_layers, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise DimensionError(f"all layer sizes must be >= 1, got {dims}")
        if self.hidden_activation not in ("relu", "tanh", "sigmoid"):
            raise ValueError(f"bad hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("identity", "sigmoid", "tanh"):
            raise ValueError(f"bad output activation {self.output_activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_layers, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "output_dim": self.output_dim,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            int(d["input_dim"]),
            tuple(d["hidden_layers"]),
            int(d["output_dim"]),
            d["hidden_activation"],
            d["output_activation"],
        )


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    chunks = []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks)


def unpack(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer ``(W, b)`` views into ``params``."""
    params = np.asarray(params)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise DimensionError(
            f"parameter vector has shape {params.shape}, spec needs ({spec.n_params},)"
        )
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_dims:
        w = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def _as_batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"input has shape {x.shape}, spec expects (*, {spec.input_dim})")
    return x, single


def forward_cache(spec: MlpSpec, params: np.ndarray, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched forward pass; returns output and the per-layer activations.

    ``acts[0]`` is the input and ``acts[-1]`` the output, both 2-D.
    """
    x, _ = _as_batch(spec, x)
    layers = unpack(spec, params)
    acts = [x]
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = _activate(spec.output_activation if i == last else spec.hidden_activation, z)
        acts.append(h)
    return h, acts


def backward(
    spec: MlpSpec,
    params: np.ndarray,
    acts: list[np.ndarray],
    upstream,
    through_output_activation: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass for the scalar ``sum(upstream * output)``.

    With ``through_output_activation=False`` the upstream gradient is taken
    to be with respect to the output layer's pre-activation, which is how
    cross-entropy through a sigmoid stays numerically stable.
    """
    layers = unpack(spec, params)
    g = np.asarray(upstream, dtype=float).reshape(acts[-1].shape)
    grad = np.zeros(spec.n_params)
    views = unpack(spec, grad)
    last = len(layers) - 1
    for i in range(last, -1, -1):
        name = spec.output_activation if i == last else spec.hidden_activation
        if i < last or through_output_activation:
            slope = _activation_slope(name, acts[i + 1])
            if slope is not None:
                g = g * slope
        gw, gb = views[i]
        gw[...] = acts[i].T @ g
        gb[...] = g.sum(axis=0)
        g = g @ layers[i][0].T
    return grad, g


def mlp_forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    _, single = _as_batch(spec, x)
    out, _ = forward_cache(spec, params, x)
    return out[0] if single else out


def mlp_gradient(spec: MlpSpec, params: np.ndarray, x, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``<upstream, mlp_forward(x)>`` w.r.t. parameters and input.

    For a batch the parameter gradient is summed over rows and the input
    gradient is returned per row.
    """
    _, single = _as_batch(spec, x)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape[-1] != spec.output_dim:
        raise DimensionError(
            f"upstream gradient has shape {upstream.shape}, output_dim is {spec.output_dim}"
        )
    out, acts = forward_cache(spec, params, x)
    if upstream.size != out.size:
        raise DimensionError(f"upstream gradient has shape {upstream.shape}, output is {out.shape}")
    pgrad, xgrad = backward(spec, params, acts, upstream)
    return pgrad, (xgrad[0] if single else xgrad)


@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    step_count: int = 0

    @classmethod
    def zeros(cls, n: int, learning_rate: float = 3e-4, **kw) -> "AdamState":
        return cls(learning_rate=learning_rate, first_moment=np.zeros(n),
                   second_moment=np.zeros(n), **kw)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are untouched."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise NumericalFault("non-finite gradient passed to adam_step")
    if grad.shape != params.shape:
        raise DimensionError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    m = state.first_moment if state.first_moment is not None else np.zeros_like(params)
    v = state.second_moment if state.second_moment is not None else np.zeros_like(params)
    t = state.step_count + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grad
    v = state.beta2 * v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def finite_diff_check(
    loss: LossFn,
    params: np.ndarray,
    h: float = 1e-5,
    n_coords: int = 100,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss(p)`` returns ``(value, gradient)``. At most ``n_coords`` randomly
    chosen coordinates are probed (all of them when there are fewer). The
    relative error of a coordinate is ``|g - g_fd| / max(|g|, |g_fd|, floor)``.
    """
    params = np.array(params, dtype=float)
    rng = rng if rng is not None else np.random.default_rng(0)
    _, grad = loss(params.copy())
    grad = np.asarray(grad, dtype=float)
    n = params.shape[0]
    idx = np.arange(n) if n <= n_coords else rng.choice(n, size=n_coords, replace=False)
    worst = 0.0
    for i in idx:
        p = params.copy()
        p[i] += h
        up, _ = loss(p)
        p[i] -= 2.0 * h
        down, _ = loss(p)
        fd = (up - down) / (2.0 * h)
        err = abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), floor)
        worst = max(worst, err)
    return float(worst)


@dataclass
class Mlp:
    """A network spec paired with its parameters and optimizer state."""

    spec: MlpSpec
    params: np.ndarray
    adam: AdamState = field(default_factory=AdamState)

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator, learning_rate: float = 3e-4) -> "Mlp":
        params = init_params(spec, rng)
        return cls(spec, params, AdamState.zeros(spec.n_params, learning_rate))

    def __call__(self, x) -> np.ndarray:
        return mlp_forward(self.spec, self.params, x)

    def apply_gradient(self, grad: np.ndarray) -> None:
        self.params, self.adam = adam_step(self.params, grad, self.adam)

    def copy(self) -> "Mlp":
        adam = replace(
            self.adam,
            first_moment=None if self.adam.first_moment is None else self.adam.first_moment.copy(),
            second_moment=None if self.adam.second_moment is None else self.adam.second_moment.copy(),
        )
        return Mlp(self.spec, self.params.copy(), adam)


def stack_inputs(*parts: Sequence) -> np.ndarray:
    """Concatenate per-row feature blocks, promoting 1-D blocks to columns."""
    cols = []
    for p in parts:
        p = np.asarray(p, dtype=float)
        cols.append(p[:, None] if p.ndim == 1 else p)
    return np.concatenate(cols, axis=1)
