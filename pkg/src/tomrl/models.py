"""Next-state density models and the replay weighting schemes used to fit them."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .approximator import AdamState, MlpSpec, adam_step, backward, forward_cache, init_params, stack_inputs
from .buffers import ReplayBuffer, Transition
from .errors import DegenerateDistribution, DimensionError, NumericalFault

LOG_2PI = np.log(2.0 * np.pi)
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
CHECKPOINT_VERSION = 1


def gaussian_log_density(x, mean, std) -> np.ndarray:
    """Diagonal Gaussian log-density, summed over the last axis."""
    z = (x - mean) / std
    return -0.5 * np.sum(z * z + 2.0 * np.log(std) + LOG_2PI, axis=-1)


@dataclass
class LinearGaussianModel:
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    noise_std: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    def mean_std(self, states, actions):
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        mean = states @ self.A.T + actions @ self.B.T + self.c
        return mean, np.broadcast_to(self.noise_std, mean.shape)


@dataclass
class GaussianMlpModel:
    """Mean from an MLP (predicting ``s' - s`` by default), state-independent log-std."""

    spec: MlpSpec
    params: np.ndarray  # mean-net parameters followed by ``state_dim`` raw log-stds
    predicts_delta: bool = True
    adam: AdamState | None = None

    @classmethod
    def create(cls, state_dim: int, action_dim: int, rng: np.random.Generator,
               hidden=(200, 200, 200, 200), learning_rate: float = 3e-4,
               init_log_std: float = -1.0) -> "GaussianMlpModel":
        spec = MlpSpec(state_dim + action_dim, tuple(hidden), state_dim, "sigmoid", "identity")
        params = np.concatenate([init_params(spec, rng), np.full(state_dim, init_log_std)])
        return cls(spec, params, True, AdamState.zeros(len(params), learning_rate))

    @property
    def state_dim(self) -> int:
        return self.spec.output_dim

    @property
    def log_std(self) -> np.ndarray:
        return np.clip(self.params[self.spec.n_params:], LOG_STD_MIN, LOG_STD_MAX)

    def mean_std(self, states, actions):
        states = np.atleast_2d(np.asarray(states, float))
        out, _ = forward_cache(self.spec, self.params[:self.spec.n_params],
                               stack_inputs(states, np.atleast_2d(actions)))
        mean = states + out if self.predicts_delta else out
        return mean, np.broadcast_to(np.exp(self.log_std), mean.shape)


def model_log_likelihood(model, s, a, s_next) -> np.ndarray | float:
    single = np.ndim(s) == 1
    mean, std = model.mean_std(s, a)
    ll = gaussian_log_density(np.atleast_2d(s_next), mean, std)
    return float(ll[0]) if single else ll


def weighted_nll(model: GaussianMlpModel, params: np.ndarray, states, actions, next_states,
                 weights) -> tuple[float, np.ndarray]:
    """``mean_i w_i * -log p(s'_i | s_i, a_i)`` and its gradient w.r.t. all model parameters."""
    spec = model.spec
    npar = spec.n_params
    states = np.asarray(states, float)
    x = stack_inputs(states, actions)
    out, acts = forward_cache(spec, params[:npar], x)
    mean = states + out if model.predicts_delta else out
    raw = params[npar:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    inv_var = np.exp(-2.0 * log_std)
    diff = np.asarray(next_states, float) - mean
    n = len(states)
    w = np.asarray(weights, float)
    nll = 0.5 * np.sum(diff * diff * inv_var + 2.0 * log_std + LOG_2PI, axis=1)
    loss = float(np.dot(w, nll) / n)
    d_mean = -(w[:, None] / n) * diff * inv_var
    g_net, _ = backward(spec, params[:npar], acts, d_mean)
    g_log_std = np.sum((w[:, None] / n) * (1.0 - diff * diff * inv_var), axis=0)
    g_log_std = np.where((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX), g_log_std, 0.0)
    return loss, np.concatenate([g_net, g_log_std])


def normalize_batch_weights(weights) -> np.ndarray:
    w = np.asarray(weights, float)
    if np.any(w < 0):
        raise ValueError("batch weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise DegenerateDistribution("all batch weights are zero")
    if np.all(w == w[0]):  # constant weights are exactly the unweighted loss
        return np.ones_like(w)
    return w * (len(w) / total)


def weighted_mle_step(model: GaussianMlpModel, batch: dict, batch_weights=None) -> GaussianMlpModel:
    """One Adam step on the batch NLL with weights rescaled to mean 1."""
    n = len(batch["states"])
    w = normalize_batch_weights(np.ones(n) if batch_weights is None else batch_weights)
    loss, grad = weighted_nll(model, model.params, batch["states"], batch["actions"],
                              batch["next_states"], w)
    if not np.isfinite(loss):
        raise NumericalFault(f"model NLL is {loss}")
    adam = model.adam if model.adam is not None else AdamState.zeros(len(model.params))
    params, adam = adam_step(model.params, grad, adam)
    return GaussianMlpModel(model.spec, params, model.predicts_delta, adam)


def fit_model(model: GaussianMlpModel, buffer: ReplayBuffer, weights, steps: int, batch: int,
              rng: np.random.Generator, mode: str = "sample") -> GaussianMlpModel:
    """``steps`` weighted-MLE updates on minibatches from ``buffer``.

    ``mode="sample"`` draws minibatches in proportion to ``weights``;
    ``mode="loss"`` draws uniformly and multiplies the per-sample loss.
    """
    for _ in range(steps):
        if mode == "sample":
            cols = buffer.sample(batch, rng, weights)
            model = weighted_mle_step(model, cols)
        elif mode == "loss":
            pos = buffer.sample_indices(batch, rng)
            w = np.ones(batch) if weights is None else np.asarray(weights)[pos]
            if w.sum() <= 0:
                continue
            model = weighted_mle_step(model, buffer.arrays(pos), w)
        else:
            raise ValueError(f"unknown weight mode {mode!r}")
    return model


def fit_linear_gaussian_closed_form(states, actions, next_states, weights=None,
                                    ridge: float = 1e-6, std_floor: float = 1e-3) -> LinearGaussianModel:
    """Weighted ridge least squares for ``s' = A s + B a + c`` plus residual std.

    Weights are rescaled to mean 1 over the rows with positive weight before
    the ridge term is added, so the ridge acts like it would on an unweighted
    sum of squared errors and zero-weight rows have no effect at all.
    """
    states = np.asarray(states, float)
    actions = np.asarray(actions, float)
    y = np.asarray(next_states, float)
    n, sd = states.shape
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    if w.shape != (n,):
        raise DimensionError(f"weights have shape {w.shape}, expected ({n},)")
    total = w.sum()
    if total <= 0:
        raise DegenerateDistribution("all regression weights are zero")
    n_eff = np.count_nonzero(w)
    w = w * (n_eff / total)
    x = np.concatenate([states, actions, np.ones((n, 1))], axis=1)
    xtw = x.T * w
    gram = xtw @ x + ridge * np.eye(x.shape[1])
    if np.linalg.cond(gram) > 1e14:
        raise np.linalg.LinAlgError("weighted design matrix is rank deficient beyond ridge rescue")
    theta = np.linalg.solve(gram, xtw @ y)  # [sd+ad+1, sd]
    resid = y - x @ theta
    std = np.sqrt(np.maximum(w @ (resid * resid) / n_eff, 0.0))
    ad = actions.shape[1]
    return LinearGaussianModel(theta[:sd].T.copy(), theta[sd:sd + ad].T.copy(), theta[-1].copy(),
                               np.maximum(std, std_floor))


@dataclass
class WeightScheme:
    kind: str = "uniform"
    decay_rate: float = 0.996

    def __post_init__(self):
        if self.kind not in ("uniform", "tom", "pmac"):
            raise ValueError(f"unknown weighting scheme {self.kind!r}")


def pmac_round_masses(n_rounds: int, decay_rate: float) -> np.ndarray:
    """Mass per collection round, oldest first.

    The first round starts with all the mass. Every later round enters with
    ``1 - decay_rate`` while all earlier masses are multiplied by
    ``decay_rate``, so the total stays 1, the newest round holds
    ``1 - decay_rate`` and adjacent rounds after the first differ by a factor
    ``decay_rate``.
    """
    if n_rounds < 1:
        return np.zeros(0)
    masses = np.ones(1)
    for _ in range(n_rounds - 1):
        masses = np.append(masses * decay_rate, 1.0 - decay_rate)
    return masses / masses.sum()


def pmac_weights(round_ids, decay_rate: float = 0.996) -> np.ndarray:
    """Per-transition PMAC weights summing to 1; a round's mass is shared evenly by its transitions.

    The oldest round present plays the part of the first round.
    """
    round_ids = np.asarray(round_ids, dtype=np.int64)
    rounds, inverse, counts = np.unique(round_ids, return_inverse=True, return_counts=True)
    # rounds with no transitions in the buffer still age the others
    span = rounds.max() - rounds.min() + 1
    masses = pmac_round_masses(int(span), decay_rate)
    per_round = masses[rounds - rounds.min()] / counts
    w = per_round[inverse]
    return w / w.sum()


def compute_weights(scheme: WeightScheme, buffer: ReplayBuffer, tom_weights=None,
                    round_ids=None) -> np.ndarray:
    n = len(buffer)
    if scheme.kind == "uniform":
        return np.ones(n)
    if scheme.kind == "tom":
        if tom_weights is None:
            raise ValueError("tom scheme needs importance weights")
        w = np.asarray(tom_weights, float)
        if w.shape != (n,):
            raise DimensionError(f"importance weights have shape {w.shape}, buffer size is {n}")
        return w
    if round_ids is None:
        raise ValueError("pmac scheme needs per-transition round ids")
    round_ids = np.asarray(round_ids)
    if round_ids.shape != (n,):
        raise DimensionError(f"round ids have shape {round_ids.shape}, buffer size is {n}")
    return pmac_weights(round_ids, scheme.decay_rate)


@dataclass
class SyntheticBatch:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.states)

    def transitions(self) -> list[Transition]:
        return [Transition(self.states[i], self.actions[i], self.next_states[i],
                           float(self.rewards[i])) for i in range(len(self))]


RewardFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def model_rollout(model, policy, start_states, k: int, rng: np.random.Generator,
                  reward_fn: RewardFn, clip_state: Callable | None = None) -> SyntheticBatch:
    """``k``-step rollouts in the model; rewards come from the known ``reward_fn(s, a, s')``.

    A step that produces any non-finite state ends the rollout for all
    branches and sets ``truncated``.
    """
    s = np.atleast_2d(np.asarray(start_states, float))
    sd = s.shape[1]
    chunks: list[tuple] = []
    truncated = False
    for _ in range(k):
        a = policy.act(s, rng, deterministic=False)
        with np.errstate(over="ignore", invalid="ignore"):  # non-finite states are truncated below
            mean, std = model.mean_std(s, a)
            ns = mean + std * rng.standard_normal(mean.shape)
        if clip_state is not None:
            ns = clip_state(ns)
        if not np.all(np.isfinite(ns)):
            truncated = True
            break
        chunks.append((s, a, ns, reward_fn(s, a, ns)))
        s = ns
    if not chunks:
        empty = np.zeros((0, sd))
        return SyntheticBatch(empty, np.zeros((0, 0)), empty.copy(), np.zeros(0), truncated)
    return SyntheticBatch(*(np.concatenate(c) for c in zip(*chunks)), truncated=truncated)


def save_model(model, path) -> None:
    """Versioned JSON checkpoint: spec header plus the flat parameter vector."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, GaussianMlpModel):
        doc = {"version": CHECKPOINT_VERSION, "kind": "gaussian_mlp", "spec": model.spec.to_dict(),
               "predicts_delta": model.predicts_delta, "params": model.params.tolist()}
    else:
        doc = {"version": CHECKPOINT_VERSION, "kind": "linear_gaussian",
               "A": model.A.tolist(), "B": model.B.tolist(), "c": model.c.tolist(),
               "noise_std": model.noise_std.tolist()}
    path.write_text(json.dumps(doc))


def load_model(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    if doc["kind"] == "gaussian_mlp":
        return GaussianMlpModel(MlpSpec.from_dict(doc["spec"]), np.array(doc["params"]),
                                doc["predicts_delta"])
    return LinearGaussianModel(np.array(doc["A"]), np.array(doc["B"]), np.array(doc["c"]),
                               np.array(doc["noise_std"]))
