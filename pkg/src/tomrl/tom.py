"""Discriminator, dual Q-function and importance weights for transition occupancy matching.

The pipeline per outer iteration:

1. a discriminator separates current-policy transitions from replay transitions;
   its logit is the relevance reward ``r(s,a,s')``;
2. a Q-function minimizes the dual objective
   ``(1-g) E_{mu0,pi}[Q] + E_D[f*(r + g E_pi Q(s',.) - Q(s,a))]``;
3. each replay transition gets weight ``f*'(r + g V(s') - Q(s,a))``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .approximator import AdamState, MlpSpec, adam_step, backward, forward_cache, init_params, stack_inputs
from .buffers import ReplayBuffer, initial_state_batch
from .errors import EmptySupport, NumericalFault
from .fdiv import FDivergence, conjugate, conjugate_prime, get_divergence


def _softplus(z):
    return np.logaddexp(0.0, z)


@dataclass
class Discriminator:
    spec: MlpSpec
    params: np.ndarray
    clamp_epsilon: float = 1e-6
    clip_bound: float = 10.0
    adam: AdamState | None = None
    loss_history: list = field(default_factory=list)

    @classmethod
    def create(cls, input_dim: int, rng: np.random.Generator, hidden=(256, 256),
               learning_rate: float = 3e-4, **kw) -> "Discriminator":
        spec = MlpSpec(input_dim, tuple(hidden), 1, "tanh", "sigmoid")
        return cls(spec, init_params(spec, rng), adam=AdamState.zeros(spec.n_params, learning_rate), **kw)

    @property
    def logit_spec(self) -> MlpSpec:
        return replace(self.spec, output_activation="identity")

    def logits(self, x) -> np.ndarray:
        out, _ = forward_cache(self.logit_spec, self.params, x)
        return out[:, 0]

    def prob(self, x) -> np.ndarray:
        """Clamped discriminator output ``c(x)``."""
        out, _ = forward_cache(self.spec, self.params, x)
        return np.clip(out[:, 0], self.clamp_epsilon, 1.0 - self.clamp_epsilon)

    def reward(self, x) -> np.ndarray:
        return reward_from_prob(self.prob(x), self.clamp_epsilon, self.clip_bound)


def reward_from_prob(c, clamp_epsilon: float = 1e-6, clip_bound: float = 10.0):
    """``r = -log(1/c - 1)`` with ``c`` clamped to ``[eps, 1-eps]`` and ``r`` clipped."""
    c = np.clip(np.asarray(c, dtype=float), clamp_epsilon, 1.0 - clamp_epsilon)
    r = -np.log(1.0 / c - 1.0)
    r = np.clip(r, -clip_bound, clip_bound)
    return r if r.ndim else float(r)


def transition_features(states, actions, next_states) -> np.ndarray:
    return stack_inputs(states, actions, next_states)


def discriminator_loss(spec: MlpSpec, params: np.ndarray, pos_x, neg_x) -> tuple[float, np.ndarray]:
    """Binary cross-entropy with current-policy samples labelled 1 and replay samples 0."""
    logit_spec = replace(spec, output_activation="identity")
    x = np.concatenate([pos_x, neg_x])
    n_pos, n_neg = len(pos_x), len(neg_x)
    z, acts = forward_cache(logit_spec, params, x)
    z = z[:, 0]
    loss = _softplus(-z[:n_pos]).mean() + _softplus(z[n_pos:]).mean()
    c = 1.0 / (1.0 + np.exp(-z))
    up = np.concatenate([(c[:n_pos] - 1.0) / n_pos, c[n_pos:] / n_neg])
    grad, _ = backward(logit_spec, params, acts, up[:, None])
    return float(loss), grad


def fit_discriminator(disc: Discriminator, pos_x, neg_x, steps: int, batch: int,
                      rng: np.random.Generator) -> Discriminator:
    """Adam on balanced minibatches (``batch`` from each class per step)."""
    pos_x = np.asarray(pos_x, dtype=float)
    neg_x = np.asarray(neg_x, dtype=float)
    if len(pos_x) == 0 or len(neg_x) == 0:
        raise EmptySupport("discriminator needs samples from both classes")
    adam = disc.adam if disc.adam is not None else AdamState.zeros(disc.spec.n_params)
    params = disc.params
    history = list(disc.loss_history)
    for _ in range(steps):
        p = pos_x[rng.integers(0, len(pos_x), size=batch)]
        n = neg_x[rng.integers(0, len(neg_x), size=batch)]
        loss, grad = discriminator_loss(disc.spec, params, p, n)
        if not np.isfinite(loss):
            raise NumericalFault(f"discriminator loss became {loss} after {adam.step_count} steps")
        params, adam = adam_step(params, grad, adam)
        history.append(loss)
    return replace(disc, params=params, adam=adam, loss_history=history)


def train_discriminator(policy_buffer: ReplayBuffer, replay_buffer: ReplayBuffer,
                        disc: Discriminator, rng: np.random.Generator,
                        steps: int = 100, batch: int = 256) -> Discriminator:
    if len(policy_buffer) == 0 or len(replay_buffer) == 0:
        raise EmptySupport("discriminator training needs non-empty policy and replay buffers")
    pos = transition_features(policy_buffer.states, policy_buffer.actions, policy_buffer.next_states)
    neg = transition_features(replay_buffer.states, replay_buffer.actions, replay_buffer.next_states)
    return fit_discriminator(disc, pos, neg, steps, batch, rng)


def relevance_reward(disc: Discriminator, s, a, s_next) -> np.ndarray:
    return disc.reward(transition_features(s, a, s_next))


class DualQ:
    """Q(s, a) as a ReLU network over the concatenated state and action."""

    def __init__(self, spec: MlpSpec, params: np.ndarray, gamma: float = 0.99,
                 value_action_samples: int = 4, adam: AdamState | None = None):
        self.spec = spec
        self.params = params
        self.gamma = gamma
        self.value_action_samples = value_action_samples
        self.adam = adam if adam is not None else AdamState.zeros(spec.n_params)
        self.loss_history: list[float] = []

    @classmethod
    def create(cls, state_dim: int, action_dim: int, rng: np.random.Generator, gamma: float = 0.99,
               hidden=(256, 256), learning_rate: float = 3e-4, value_action_samples: int = 4) -> "DualQ":
        spec = MlpSpec(state_dim + action_dim, tuple(hidden), 1, "relu", "identity")
        return cls(spec, init_params(spec, rng), gamma, value_action_samples,
                   AdamState.zeros(spec.n_params, learning_rate))

    def with_params(self, params: np.ndarray) -> "DualQ":
        return DualQ(self.spec, params, self.gamma, self.value_action_samples, self.adam)

    def values(self, states, actions) -> np.ndarray:
        out, _ = forward_cache(self.spec, self.params, stack_inputs(states, actions))
        return out[:, 0]

    def values_and_grad_fn(self, states, actions):
        out, acts = forward_cache(self.spec, self.params, stack_inputs(states, actions))

        def pullback(upstream):
            g, _ = backward(self.spec, self.params, acts, np.asarray(upstream)[:, None])
            return g

        return out[:, 0], pullback


class TabularQ:
    """Q as an explicit ``[s, a]`` table; states and actions are integer-valued columns."""

    def __init__(self, n_states: int, n_actions: int, gamma: float, params: np.ndarray | None = None):
        self.n_states = n_states
        self.n_actions = n_actions
        self.gamma = gamma
        self.params = np.zeros(n_states * n_actions) if params is None else np.asarray(params, float)
        self.value_action_samples = n_actions

    @property
    def table(self) -> np.ndarray:
        return self.params.reshape(self.n_states, self.n_actions)

    def with_params(self, params: np.ndarray) -> "TabularQ":
        return TabularQ(self.n_states, self.n_actions, self.gamma, params)

    def _flat(self, states, actions):
        s = np.asarray(states).reshape(len(states), -1)[:, 0].astype(np.int64)
        a = np.asarray(actions).reshape(len(actions), -1)[:, 0].astype(np.int64)
        return s * self.n_actions + a

    def values(self, states, actions) -> np.ndarray:
        return self.params[self._flat(states, actions)]

    def values_and_grad_fn(self, states, actions):
        idx = self._flat(states, actions)

        def pullback(upstream):
            g = np.zeros_like(self.params)
            np.add.at(g, idx, upstream)
            return g

        return self.params[idx], pullback


def sample_value_actions(policy, states, n_samples: int, rng: np.random.Generator):
    """``n_samples`` policy actions per state with uniform weights ``1/n_samples``.

    Returns actions ``[n, P, action_dim]`` and weights ``[n, P]``.
    """
    states = np.asarray(states, dtype=float)
    n = len(states)
    rep = np.repeat(states, n_samples, axis=0)
    acts = np.asarray(policy.act(rep, rng, deterministic=False), dtype=float)
    acts = acts.reshape(n, n_samples, -1)
    return acts, np.full((n, n_samples), 1.0 / n_samples)


def state_value(q, policy, next_states, rng: np.random.Generator, n_samples: int | None = None,
                action_sets=None) -> np.ndarray:
    """``V(s') = sum_p w_p Q(s', a_p)``; Monte-Carlo over policy actions unless sets are given."""
    next_states = np.asarray(next_states, dtype=float)
    if action_sets is None:
        action_sets = sample_value_actions(policy, next_states, n_samples or q.value_action_samples, rng)
    acts, w = action_sets
    n, p = w.shape
    vals = q.values(np.repeat(next_states, p, axis=0), acts.reshape(n * p, -1)).reshape(n, p)
    return (vals * w).sum(1)


@dataclass
class DualBatch:
    """Everything one evaluation of the dual objective needs.

    ``next_actions``/``init_actions`` are ``[n, P, action_dim]`` with matching
    ``[n, P]`` weights. ``sample_weights`` and ``init_sample_weights`` default
    to uniform means over the batch rows.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    next_weights: np.ndarray
    init_states: np.ndarray
    init_actions: np.ndarray
    init_weights: np.ndarray
    sample_weights: np.ndarray | None = None
    init_sample_weights: np.ndarray | None = None


def dual_q_loss(q, batch: DualBatch, divergence: FDivergence | str, gamma: float) -> tuple[float, np.ndarray]:
    """Stochastic estimate of the dual objective and its parameter gradient."""
    div = get_divergence(divergence)
    n, p = batch.next_weights.shape
    m, p0 = batch.init_weights.shape
    v = batch.sample_weights if batch.sample_weights is not None else np.full(n, 1.0 / n)
    u = batch.init_sample_weights if batch.init_sample_weights is not None else np.full(m, 1.0 / m)

    ad = batch.actions.reshape(n, -1).shape[1]
    all_states = np.concatenate([
        np.asarray(batch.states, float).reshape(n, -1),
        np.repeat(np.asarray(batch.next_states, float).reshape(n, -1), p, axis=0),
        np.repeat(np.asarray(batch.init_states, float).reshape(m, -1), p0, axis=0),
    ])
    all_actions = np.concatenate([
        np.asarray(batch.actions, float).reshape(n, ad),
        batch.next_actions.reshape(n * p, ad),
        batch.init_actions.reshape(m * p0, ad),
    ])
    qv, pullback = q.values_and_grad_fn(all_states, all_actions)
    q_sa = qv[:n]
    v_next = (qv[n:n + n * p].reshape(n, p) * batch.next_weights).sum(1)
    v_init = (qv[n + n * p:].reshape(m, p0) * batch.init_weights).sum(1)

    adv = batch.rewards + gamma * v_next - q_sa
    loss = (1.0 - gamma) * np.dot(u, v_init) + np.dot(v, conjugate(div, adv))

    g = v * conjugate_prime(div, adv)
    upstream = np.concatenate([
        -g,
        (gamma * g[:, None] * batch.next_weights).ravel(),
        ((1.0 - gamma) * u[:, None] * batch.init_weights).ravel(),
    ])
    return float(loss), pullback(upstream)


def make_dual_batch(q, policy, buffer: ReplayBuffer, rewards_all: np.ndarray, batch: int,
                    init_batch: int, rng: np.random.Generator, n_value_samples: int) -> DualBatch:
    pos = buffer.sample_indices(batch, rng)
    cols = buffer.arrays(pos)
    s0 = initial_state_batch(buffer, init_batch, rng)
    na, nw = sample_value_actions(policy, cols["next_states"], n_value_samples, rng)
    ia, iw = sample_value_actions(policy, s0, n_value_samples, rng)
    return DualBatch(cols["states"], cols["actions"], rewards_all[pos], cols["next_states"],
                     na, nw, s0, ia, iw)


def train_dual_q(q: DualQ, policy, divergence: FDivergence | str, replay_buffer: ReplayBuffer,
                 disc: Discriminator | None, rng: np.random.Generator, steps: int = 1000,
                 batch: int = 256, init_batch: int | None = None,
                 rewards: np.ndarray | None = None) -> DualQ:
    """Adam on the dual objective over replay minibatches and episode-start states.

    Relevance rewards are computed once for the whole buffer from ``disc``
    unless ``rewards`` (aligned with the buffer) is supplied.
    """
    if rewards is None:
        rewards = relevance_reward(disc, replay_buffer.states, replay_buffer.actions,
                                   replay_buffer.next_states)
    init_batch = init_batch or batch
    params, adam = q.params, q.adam
    history = []
    for step in range(steps):
        db = make_dual_batch(q.with_params(params), policy, replay_buffer, rewards, batch,
                             init_batch, rng, q.value_action_samples)
        loss, grad = dual_q_loss(q.with_params(params), db, divergence, q.gamma)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalFault(
                f"dual-Q loss diverged at step {step}: loss={loss}, "
                f"|grad|={np.linalg.norm(grad)}, max|r|={np.max(np.abs(rewards))}")
        params, adam = adam_step(params, grad, adam)
        history.append(loss)
    out = DualQ(q.spec, params, q.gamma, q.value_action_samples, adam)
    out.loss_history = q.loss_history + history
    return out


def importance_weights(q, policy, disc: Discriminator | None, states, actions, next_states,
                       divergence: FDivergence | str, gamma: float, rng: np.random.Generator,
                       n_value_samples: int = 16, rewards: np.ndarray | None = None,
                       chunk: int = 8192) -> np.ndarray:
    """``f*'(r + gamma V(s') - Q(s,a))`` per transition; unnormalized."""
    div = get_divergence(divergence)
    states = np.asarray(states, float)
    n = len(states)
    if rewards is None:
        rewards = relevance_reward(disc, states, actions, next_states)
    out = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        v = state_value(q, policy, next_states[lo:hi], rng, n_value_samples)
        adv = rewards[lo:hi] + gamma * v - q.values(states[lo:hi], actions[lo:hi])
        out[lo:hi] = conjugate_prime(div, adv)
    return out


def tabular_dual_batch(mdp, policy: np.ndarray, replay_dtod: np.ndarray, reward: np.ndarray) -> DualBatch:
    """Full-enumeration batch: every ``(s,a,s')`` weighted by ``replay_dtod`` and exact policy expectations."""
    ns, na = mdp.n_states, mdp.n_actions
    s, a, s2 = np.meshgrid(np.arange(ns), np.arange(na), np.arange(ns), indexing="ij")
    s, a, s2 = s.ravel(), a.ravel(), s2.ravel()
    all_a = np.tile(np.arange(na, dtype=float), (len(s), 1))[:, :, None]
    init_s = np.arange(ns, dtype=float)[:, None]
    return DualBatch(
        s[:, None].astype(float), a[:, None].astype(float), np.asarray(reward, float).ravel(),
        s2[:, None].astype(float), all_a, policy[s2],
        init_s, np.tile(np.arange(na, dtype=float), (ns, 1))[:, :, None], policy,
        sample_weights=np.asarray(replay_dtod, float).ravel(),
        init_sample_weights=mdp.initial_dist,
    )


def solve_tabular_dual(mdp, policy: np.ndarray, replay_dtod: np.ndarray, reward: np.ndarray,
                       divergence: FDivergence | str = "chi_squared") -> TabularQ:
    """Minimize the exact (full-enumeration) dual objective over a Q table with L-BFGS."""
    q = TabularQ(mdp.n_states, mdp.n_actions, mdp.gamma)
    batch = tabular_dual_batch(mdp, policy, replay_dtod, reward)

    def fun(p):
        return dual_q_loss(q.with_params(p), batch, divergence, mdp.gamma)

    res = minimize(fun, q.params, jac=True, method="L-BFGS-B",
                   options={"maxiter": 10000, "ftol": 1e-15, "gtol": 1e-11})
    return q.with_params(res.x)


def save_discriminator(disc: Discriminator, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "version": 1, "kind": "discriminator", "spec": disc.spec.to_dict(),
        "clamp_epsilon": disc.clamp_epsilon, "clip_bound": disc.clip_bound,
        "params": disc.params.tolist(),
    }))


def load_discriminator(path) -> Discriminator:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1 or doc.get("kind") != "discriminator":
        raise ValueError(f"{path}: not a discriminator checkpoint")
    return Discriminator(MlpSpec.from_dict(doc["spec"]), np.array(doc["params"]),
                         doc["clamp_epsilon"], doc["clip_bound"])


def save_dual_q(q: DualQ, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "version": 1, "kind": "dual_q", "spec": q.spec.to_dict(), "gamma": q.gamma,
        "value_action_samples": q.value_action_samples, "params": q.params.tolist(),
    }))


def load_dual_q(path) -> DualQ:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1 or doc.get("kind") != "dual_q":
        raise ValueError(f"{path}: not a dual-Q checkpoint")
    return DualQ(MlpSpec.from_dict(doc["spec"]), np.array(doc["params"]), doc["gamma"],
                 doc["value_action_samples"])
