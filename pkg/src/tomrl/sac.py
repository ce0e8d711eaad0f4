"""A compact soft actor-critic: tanh-squashed Gaussian actor, twin critics, fixed entropy weight."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .approximator import AdamState, Mlp, MlpSpec, adam_step, backward, forward_cache, stack_inputs
from .errors import NumericalFault

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
EDGE = 1e-6  # squashed actions stay this far inside the unit box


def _log_one_minus_tanh_sq(u):
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class StochasticPolicy:
    """Actor network emitting per-dimension mean and log-std of a pre-squash Gaussian."""

    def __init__(self, spec: MlpSpec, params: np.ndarray, action_low, action_high,
                 adam: AdamState | None = None):
        self.spec = spec
        self.params = params
        self.action_low = np.asarray(action_low, float)
        self.action_high = np.asarray(action_high, float)
        self.adam = adam if adam is not None else AdamState.zeros(spec.n_params)

    @classmethod
    def create(cls, state_dim: int, action_low, action_high, rng: np.random.Generator,
               hidden=(64, 64), learning_rate: float = 3e-4) -> "StochasticPolicy":
        ad = len(np.atleast_1d(action_low))
        spec = MlpSpec(state_dim, tuple(hidden), 2 * ad, "relu", "identity")
        return cls(spec, Mlp.create(spec, rng).params, action_low, action_high,
                   AdamState.zeros(spec.n_params, learning_rate))

    @property
    def action_dim(self) -> int:
        return self.spec.output_dim // 2

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.action_high + self.action_low)

    @property
    def scale(self) -> np.ndarray:
        return 0.5 * (self.action_high - self.action_low)

    def copy(self) -> "StochasticPolicy":
        return StochasticPolicy(self.spec, self.params.copy(), self.action_low, self.action_high,
                                AdamState(**{**self.adam.__dict__}))

    def distribution(self, states, params=None):
        """Pre-squash mean, clamped log-std, raw log-std and the forward cache."""
        params = self.params if params is None else params
        out, acts = forward_cache(self.spec, params, states)
        ad = self.action_dim
        mean, raw = out[:, :ad], out[:, ad:]
        return mean, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw, acts

    def squash(self, u) -> np.ndarray:
        y = np.clip(np.tanh(u), -1.0 + EDGE, 1.0 - EDGE)
        return self.center + self.scale * y

    def act(self, states, rng: np.random.Generator | None = None, deterministic: bool = False) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, float))
        mean, log_std, _, _ = self.distribution(states)
        if deterministic:
            return self.squash(mean)
        rng = rng if rng is not None else np.random.default_rng()
        return self.squash(mean + np.exp(log_std) * rng.standard_normal(mean.shape))

    def log_prob(self, states, actions) -> np.ndarray:
        """Squashed-Gaussian log-density including the tanh Jacobian; actions must be strictly inside bounds."""
        states = np.atleast_2d(np.asarray(states, float))
        actions = np.atleast_2d(np.asarray(actions, float))
        y = (actions - self.center) / self.scale
        if np.any(np.abs(y) >= 1.0):
            raise ValueError("log_prob needs actions strictly inside the action bounds")
        u = np.arctanh(y)
        mean, log_std, _, _ = self.distribution(states)
        z = (u - mean) / np.exp(log_std)
        log_n = -0.5 * z * z - log_std - HALF_LOG_2PI
        return np.sum(log_n - _log_one_minus_tanh_sq(u) - np.log(self.scale), axis=1)

    def sample_with_log_prob(self, states, noise):
        """Reparameterized sample for fixed standard-normal ``noise``."""
        mean, log_std, raw, acts = self.distribution(states)
        std = np.exp(log_std)
        u = mean + std * noise
        a = self.squash(u)
        logp = np.sum(-0.5 * noise * noise - log_std - HALF_LOG_2PI
                      - _log_one_minus_tanh_sq(u) - np.log(self.scale), axis=1)
        return a, logp, (mean, log_std, raw, std, u, acts)


@dataclass
class CriticPair:
    q1: Mlp
    q2: Mlp
    target1: np.ndarray
    target2: np.ndarray
    polyak_factor: float = 0.995
    alpha: float = 0.2
    gamma: float = 0.99

    @classmethod
    def create(cls, state_dim: int, action_dim: int, rng: np.random.Generator, hidden=(64, 64),
               learning_rate: float = 3e-4, **kw) -> "CriticPair":
        spec = MlpSpec(state_dim + action_dim, tuple(hidden), 1, "relu", "identity")
        q1 = Mlp.create(spec, rng, learning_rate)
        q2 = Mlp.create(spec, rng, learning_rate)
        return cls(q1, q2, q1.params.copy(), q2.params.copy(), **kw)

    @property
    def spec(self) -> MlpSpec:
        return self.q1.spec

    def values(self, states, actions, which: str = "online"):
        x = stack_inputs(states, actions)
        p1, p2 = (self.q1.params, self.q2.params) if which == "online" else (self.target1, self.target2)
        v1, _ = forward_cache(self.spec, p1, x)
        v2, _ = forward_cache(self.spec, p2, x)
        return v1[:, 0], v2[:, 0]


def critic_targets(policy: StochasticPolicy, critics: CriticPair, rewards, next_states, noise) -> np.ndarray:
    a2, logp2, _ = policy.sample_with_log_prob(next_states, noise)
    t1, t2 = critics.values(next_states, a2, which="target")
    return rewards + critics.gamma * (np.minimum(t1, t2) - critics.alpha * logp2)


def critic_loss(spec: MlpSpec, params: np.ndarray, states, actions, targets) -> tuple[float, np.ndarray]:
    out, acts = forward_cache(spec, params, stack_inputs(states, actions))
    diff = out[:, 0] - targets
    n = len(diff)
    grad, _ = backward(spec, params, acts, (2.0 * diff / n)[:, None])
    return float(np.mean(diff * diff)), grad


def actor_loss(policy: StochasticPolicy, params: np.ndarray, critics: CriticPair, states,
               noise) -> tuple[float, np.ndarray]:
    """``mean(alpha log pi(a|s) - min_i Q_i(s, a))`` with ``a`` reparameterized by ``noise``."""
    saved = policy.params
    policy.params = params
    try:
        a, logp, (mean, log_std, raw, std, u, acts) = policy.sample_with_log_prob(states, noise)
    finally:
        policy.params = saved
    n = len(states)
    x = stack_inputs(states, a)
    o1, c1 = forward_cache(critics.spec, critics.q1.params, x)
    o2, c2 = forward_cache(critics.spec, critics.q2.params, x)
    q1, q2 = o1[:, 0], o2[:, 0]
    use1 = (q1 <= q2).astype(float)
    loss = float(np.mean(critics.alpha * logp - np.minimum(q1, q2)))

    _, gx1 = backward(critics.spec, critics.q1.params, c1, (-use1 / n)[:, None])
    _, gx2 = backward(critics.spec, critics.q2.params, c2, (-(1.0 - use1) / n)[:, None])
    d_a = (gx1 + gx2)[:, states.shape[1]:]

    t = np.tanh(u)
    du = d_a * policy.scale * (1.0 - t * t) + (critics.alpha / n) * 2.0 * t
    d_mean = du
    d_log_std = du * std * noise - critics.alpha / n
    d_log_std = np.where((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX), d_log_std, 0.0)
    grad, _ = backward(policy.spec, params, acts, np.concatenate([d_mean, d_log_std], axis=1))
    return loss, grad


def policy_update(policy: StochasticPolicy, critics: CriticPair, batch: dict,
                  rng: np.random.Generator) -> tuple[StochasticPolicy, CriticPair]:
    """One critic step, one actor step and a Polyak update of the target critics (in place)."""
    s, a, r, s2 = batch["states"], batch["actions"], batch["rewards"], batch["next_states"]
    ad = policy.action_dim
    y = critic_targets(policy, critics, r, s2, rng.standard_normal((len(s2), ad)))
    l1, g1 = critic_loss(critics.spec, critics.q1.params, s, a, y)
    l2, g2 = critic_loss(critics.spec, critics.q2.params, s, a, y)
    la, ga = actor_loss(policy, policy.params, critics, s, rng.standard_normal((len(s), ad)))
    if not (np.isfinite(l1) and np.isfinite(l2) and np.isfinite(la)):
        raise NumericalFault(f"SAC losses non-finite: critic=({l1}, {l2}) actor={la}")
    critics.q1.apply_gradient(g1)
    critics.q2.apply_gradient(g2)
    policy.params, policy.adam = adam_step(policy.params, ga, policy.adam)
    rho = critics.polyak_factor
    critics.target1 = rho * critics.target1 + (1.0 - rho) * critics.q1.params
    critics.target2 = rho * critics.target2 + (1.0 - rho) * critics.q2.params
    return policy, critics


def save_policy(policy: StochasticPolicy, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "version": 1, "kind": "squashed_gaussian_policy", "spec": policy.spec.to_dict(),
        "action_low": policy.action_low.tolist(), "action_high": policy.action_high.tolist(),
        "params": policy.params.tolist(),
    }))


def load_policy(path) -> StochasticPolicy:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1 or doc.get("kind") != "squashed_gaussian_policy":
        raise ValueError(f"{path}: not a policy checkpoint")
    return StochasticPolicy(MlpSpec.from_dict(doc["spec"]), np.array(doc["params"]),
                            doc["action_low"], doc["action_high"])
