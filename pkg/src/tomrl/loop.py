"""Model-based training loops: online (with interaction), offline (fixed dataset), and the
curated-buffer weight-progression analysis.

Every run draws from named child generators spawned off the caller's
generator, so the discriminator/Q machinery never perturbs the random
streams used for interaction, model fitting or policy updates.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .buffers import CurrentPolicyBuffer, ReplayBuffer, Transition, collect_rollout
from .envs import RandomPolicy
from .errors import ConfigError, EmptySupport, NumericalFault
from .models import (GaussianMlpModel, WeightScheme, compute_weights, fit_linear_gaussian_closed_form,
                     fit_model, model_log_likelihood, model_rollout)
from .sac import CriticPair, StochasticPolicy, policy_update
from .tom import Discriminator, DualQ, importance_weights, train_discriminator, train_dual_q

SCHEMES = ("uniform", "tom", "pmac")
STREAMS = ("init", "env", "model", "rollout", "sac", "tom", "eval")


@dataclass
class LoopConfig:
    epochs: int = 10
    env_steps_per_epoch: int = 1000
    rollout_batch: int = 4000
    rollout_length: int = 1
    rollout_every: int = 250
    policy_updates: int = 20
    discriminator_steps: int = 100
    dual_q_steps: int = 1000
    model_steps: int = 30
    batch_size: int = 256
    scheme: str = "uniform"
    divergence: str = "chi_squared"
    seed: int = 0
    eval_episodes: int = 10
    initial_steps: int = 1000
    policy_buffer_size: int = 1000
    hidden: int = 64
    model_hidden: int = 64
    learning_rate: float = 3e-4
    model_learning_rate: float = 1e-3
    alpha: float = 0.2
    real_ratio: float = 0.05
    model_buffer_rollouts: int = 4
    pmac_decay: float = 0.996
    value_action_samples: int = 4
    weight_value_samples: int = 16
    force_unit_weights: bool = False
    weighted_rollout_starts: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and not isinstance(v, bool) and int(v) != v:
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
        positive = ("epochs", "env_steps_per_epoch", "rollout_batch", "rollout_length", "rollout_every",
                    "policy_updates", "discriminator_steps", "dual_q_steps", "model_steps", "batch_size",
                    "eval_episodes", "policy_buffer_size", "hidden", "model_hidden",
                    "model_buffer_rollouts", "value_action_samples", "weight_value_samples")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.initial_steps < 0:
            raise ConfigError("initial_steps must be nonnegative")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0.0 <= self.real_ratio <= 1.0:
            raise ConfigError("real_ratio must lie in [0, 1]")
        if not 0.0 < self.pmac_decay < 1.0:
            raise ConfigError("pmac_decay must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


METRICS_COLUMNS = (
    "epoch", "env_steps", "eval_return_mean", "eval_return_max_so_far", "model_nll",
    "weight_mean", "weight_max", *(f"weight_decile_{i}" for i in range(10)),
    "weight_on_road_mean", "weight_off_road_mean", "road_prediction_error", "phase_order", "status",
)


@dataclass
class MetricsRow:
    epoch: int
    env_steps: int
    eval_return_mean: float
    eval_return_max_so_far: float
    model_nll: float
    weight_mean: float
    weight_max: float
    weight_deciles: list
    phase_order: str
    status: str = "ok"
    weight_on_road_mean: float | None = None
    weight_off_road_mean: float | None = None
    road_prediction_error: float | None = None
    phase_seconds: dict = field(default_factory=dict, compare=False)

    def as_record(self) -> dict:
        rec = {
            "epoch": self.epoch, "env_steps": self.env_steps, "eval_return_mean": self.eval_return_mean,
            "eval_return_max_so_far": self.eval_return_max_so_far, "model_nll": self.model_nll,
            "weight_mean": self.weight_mean, "weight_max": self.weight_max,
            "weight_on_road_mean": self.weight_on_road_mean,
            "weight_off_road_mean": self.weight_off_road_mean,
            "road_prediction_error": self.road_prediction_error,
            "phase_order": self.phase_order, "status": self.status,
        }
        for i, v in enumerate(self.weight_deciles):
            rec[f"weight_decile_{i}"] = v
        return rec


class RunResult(list):
    """The per-epoch metrics rows, plus the final learners as attributes."""

    def __init__(self, rows=(), **artifacts):
        super().__init__(rows)
        self.artifacts = artifacts
        self.failed = False

    def __getattr__(self, name):
        try:
            return self.__dict__["artifacts"][name]
        except KeyError:
            raise AttributeError(name) from None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows) -> str:
    out = io.StringIO()
    out.write("# tomrl-metrics v1\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for row in rows:
        rec = row.as_record()
        w.writerow([_fmt(rec[c]) for c in METRICS_COLUMNS])
    return out.getvalue()


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(metrics_csv(rows))


def read_metrics_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def decile_means(values) -> list[float]:
    """Means over 10 contiguous, nearly equal chunks (oldest first)."""
    values = np.asarray(values, float)
    if len(values) < 10:
        raise ValueError("need at least 10 values for decile statistics")
    return [float(c.mean()) for c in np.array_split(values, 10)]


def spawn_streams(rng: np.random.Generator) -> dict[str, np.random.Generator]:
    return dict(zip(STREAMS, rng.spawn(len(STREAMS))))


def _tom_weights(config, policy, buffer, disc, q, policy_buffer, gamma, rng, seconds, phases):
    t0 = time.perf_counter()
    disc = train_discriminator(policy_buffer, buffer, disc, rng, config.discriminator_steps,
                               config.batch_size)
    t1 = time.perf_counter()
    rewards = disc.reward(np.concatenate([buffer.states, buffer.actions, buffer.next_states], axis=1))
    q = train_dual_q(q, policy, config.divergence, buffer, disc, rng, config.dual_q_steps,
                     config.batch_size, rewards=rewards)
    t2 = time.perf_counter()
    w = importance_weights(q, policy, disc, buffer.states, buffer.actions, buffer.next_states,
                           config.divergence, gamma, rng, config.weight_value_samples, rewards=rewards)
    t3 = time.perf_counter()
    seconds.update(discriminator=t1 - t0, q=t2 - t1, weights=t3 - t2)
    phases += ["discriminator", "q", "weights"]
    return disc, q, w


def _sac_batch(real: ReplayBuffer, synthetic: ReplayBuffer, batch: int, real_ratio: float,
               rng: np.random.Generator) -> dict:
    n_real = batch if len(synthetic) == 0 else int(round(batch * real_ratio))
    parts = []
    if n_real:
        parts.append(real.sample(n_real, rng))
    if batch - n_real:
        parts.append(synthetic.sample(batch - n_real, rng))
    return {k: np.concatenate([p[k] for p in parts]) for k in ("states", "actions", "rewards", "next_states")}


def _rollout_into(model, policy, source: ReplayBuffer, target: ReplayBuffer, config, env, rng,
                  weights=None) -> None:
    if not config.weighted_rollout_starts:
        weights = None
    starts = source.sample(config.rollout_batch, rng, weights)["states"]
    syn = model_rollout(model, policy, starts, config.rollout_length, rng, env.reward,
                        getattr(env, "clip_state", None))
    if len(syn):
        target.extend_arrays(syn.states, syn.actions, syn.next_states, syn.rewards)


def _padded(weights, n: int) -> np.ndarray:
    """Weights for a buffer that has grown since they were computed: new rows get the mean weight."""
    w = np.asarray(weights, float)
    if len(w) >= n:
        return w[:n]
    fill = w.mean() if len(w) else 1.0
    return np.concatenate([w, np.full(n - len(w), fill)])


def _eval_and_nll(env, policy, model, config, rng) -> tuple[float, float]:
    """Deterministic evaluation return, plus model NLL on the (held-out) evaluation transitions."""
    total, lls = 0.0, []
    for _ in range(config.eval_episodes):
        ep = collect_rollout(env, policy, env.horizon, rng, deterministic=True)
        total += sum(t.reward for t in ep)
        s = np.array([t.state for t in ep])
        a = np.array([t.action for t in ep])
        s2 = np.array([t.next_state for t in ep])
        lls.append(model_log_likelihood(model, s, a, s2))
    return total / config.eval_episodes, float(-np.mean(np.concatenate(lls)))


def _weight_stats(w):
    w = np.asarray(w, float)
    return float(w.mean()), float(w.max()), decile_means(w) if len(w) >= 10 else [float("nan")] * 10


def run_online(config: LoopConfig, env, rng: np.random.Generator) -> RunResult:
    """Interleave weighted model fitting, environment interaction and model-based policy updates.

    Per epoch: (tom only) discriminator -> dual Q -> weights; then weighted model
    fitting; then ``env_steps_per_epoch`` interaction steps, each followed by
    ``policy_updates`` actor-critic updates on mostly model-generated data (the
    model is rolled out from replay states every ``rollout_every`` steps);
    finally the current-policy buffer is refreshed from the newest transitions.
    """
    config.validate()
    st = spawn_streams(rng)
    spec = env.spec
    sd, ad = spec.state_dim, spec.action_dim
    hid = (config.hidden, config.hidden)
    policy = StochasticPolicy.create(sd, spec.action_low, spec.action_high, st["init"], hid, config.learning_rate)
    critics = CriticPair.create(sd, ad, st["init"], hid, config.learning_rate, alpha=config.alpha,
                                gamma=spec.gamma)
    model = GaussianMlpModel.create(sd, ad, st["init"], (config.model_hidden, config.model_hidden),
                                    config.model_learning_rate)
    disc = q = None
    if config.scheme == "tom":
        disc = Discriminator.create(2 * sd + ad, st["tom"], hid, config.learning_rate)
        q = DualQ.create(sd, ad, st["tom"], spec.gamma, hid, config.learning_rate, config.value_action_samples)

    total_steps = config.initial_steps + config.epochs * config.env_steps_per_epoch
    buffer = ReplayBuffer(sd, ad, capacity=max(1, total_steps))
    synthetic = ReplayBuffer(sd, ad, capacity=config.rollout_batch * config.rollout_length
                             * config.model_buffer_rollouts)
    scheme = WeightScheme(config.scheme, config.pmac_decay)

    state = env.reset(st["env"])
    t_in_episode = 0

    def interact(actor, stochastic_rng, round_id):
        nonlocal state, t_in_episode
        a = actor.act(state[None], stochastic_rng)[0]
        ns, r = env.step(state, a, st["env"])
        buffer.push(Transition(state, a, ns, r, t_in_episode == 0, tag=round_id))
        t_in_episode += 1
        state = ns
        if t_in_episode >= env.horizon:
            state, t_in_episode = env.reset(st["env"]), 0

    for _ in range(config.initial_steps):
        interact(policy, st["sac"], 0)

    def newest_transitions() -> CurrentPolicyBuffer:
        out = CurrentPolicyBuffer(sd, ad, config.policy_buffer_size)
        n = min(len(buffer), config.policy_buffer_size)
        cols = buffer.arrays(np.arange(len(buffer) - n, len(buffer)))
        return out.extend_arrays(cols["states"], cols["actions"], cols["next_states"], cols["rewards"],
                                 cols["episode_starts"], cols["tags"])

    policy_buffer = newest_transitions()
    result = RunResult()
    best = -np.inf
    for epoch in range(config.epochs):
        phases: list[str] = []
        seconds: dict[str, float] = {}
        try:
            if len(buffer) == 0:
                raise EmptySupport("no environment data before the first epoch; set initial_steps > 0")
            if config.scheme == "tom":
                disc, q, tom_w = _tom_weights(config, policy, buffer, disc, q, policy_buffer, spec.gamma,
                                              st["tom"], seconds, phases)
                if config.force_unit_weights:
                    tom_w = np.ones(len(buffer))
                weights = compute_weights(scheme, buffer, tom_weights=tom_w)
            else:
                weights = compute_weights(scheme, buffer, round_ids=buffer.tags)
            t0 = time.perf_counter()
            model = fit_model(model, buffer, weights, config.model_steps, config.batch_size, st["model"])
            seconds["model"] = time.perf_counter() - t0
            phases.append("model")

            t0 = time.perf_counter()
            for step in range(config.env_steps_per_epoch):
                if step % config.rollout_every == 0:
                    _rollout_into(model, policy, buffer, synthetic, config, env, st["rollout"],
                                  _padded(weights, len(buffer)))
                interact(policy, st["sac"], epoch + 1)
                for _ in range(config.policy_updates):
                    batch = _sac_batch(buffer, synthetic, config.batch_size, config.real_ratio, st["sac"])
                    policy, critics = policy_update(policy, critics, batch, st["sac"])
            seconds["interaction"] = time.perf_counter() - t0
            phases.append("interaction")
            policy_buffer = newest_transitions()
            phases.append("policy_refresh")

            ret, nll = _eval_and_nll(env, policy, model, config, st["eval"])
            status = "ok"
        except NumericalFault:
            ret, nll, status = float("nan"), float("nan"), "failed"
            result.failed = True
        if status == "ok":
            best = max(best, ret)
        w_mean, w_max, w_dec = _weight_stats(weights) if "model" in phases else (np.nan, np.nan, [np.nan] * 10)
        result.append(MetricsRow(epoch, config.initial_steps + (epoch + 1) * config.env_steps_per_epoch,
                                 ret, best, nll, w_mean, w_max, w_dec, ">".join(phases), status,
                                 phase_seconds=seconds))
        if status == "failed":
            break
    result.artifacts.update(policy=policy, critics=critics, model=model, discriminator=disc, dual_q=q,
                            buffer=buffer)
    return result


def run_offline(config: LoopConfig, dataset: ReplayBuffer, current_policy_data: ReplayBuffer,
                env_for_eval, rng: np.random.Generator) -> RunResult:
    """Same epoch structure as ``run_online`` without collecting any environment data.

    The dynamics model is the closed-form weighted linear-Gaussian fit; the
    evaluation environment is only used for reporting.
    """
    config.validate()
    if len(dataset) == 0:
        raise EmptySupport("offline training needs a non-empty dataset")
    if config.scheme == "tom" and len(current_policy_data) == 0:
        raise EmptySupport("tom scheme needs current-policy transitions")
    st = spawn_streams(rng)
    spec = env_for_eval.spec
    sd, ad = spec.state_dim, spec.action_dim
    hid = (config.hidden, config.hidden)
    policy = StochasticPolicy.create(sd, spec.action_low, spec.action_high, st["init"], hid, config.learning_rate)
    critics = CriticPair.create(sd, ad, st["init"], hid, config.learning_rate, alpha=config.alpha,
                                gamma=spec.gamma)
    disc = q = None
    if config.scheme == "tom":
        disc = Discriminator.create(2 * sd + ad, st["tom"], hid, config.learning_rate)
        q = DualQ.create(sd, ad, st["tom"], spec.gamma, hid, config.learning_rate, config.value_action_samples)
    synthetic = ReplayBuffer(sd, ad, capacity=config.rollout_batch * config.rollout_length
                             * config.model_buffer_rollouts)
    scheme = WeightScheme(config.scheme, config.pmac_decay)
    size_before = len(dataset)
    on_road = env_for_eval.is_on_road(dataset.states) if hasattr(env_for_eval, "is_on_road") else None

    result = RunResult()
    best = -np.inf
    model = None
    for epoch in range(config.epochs):
        phases: list[str] = []
        seconds: dict[str, float] = {}
        try:
            if config.scheme == "tom":
                disc, q, tom_w = _tom_weights(config, policy, dataset, disc, q, current_policy_data,
                                              spec.gamma, st["tom"], seconds, phases)
                if config.force_unit_weights:
                    tom_w = np.ones(len(dataset))
                weights = compute_weights(scheme, dataset, tom_weights=tom_w)
            else:
                weights = compute_weights(scheme, dataset, round_ids=dataset.tags)
            t0 = time.perf_counter()
            model = fit_linear_gaussian_closed_form(dataset.states, dataset.actions, dataset.next_states, weights)
            seconds["model"] = time.perf_counter() - t0
            phases.append("model")

            t0 = time.perf_counter()
            for step in range(config.env_steps_per_epoch):
                if step % config.rollout_every == 0:
                    _rollout_into(model, policy, dataset, synthetic, config, env_for_eval, st["rollout"],
                                  weights)
                for _ in range(config.policy_updates):
                    batch = _sac_batch(dataset, synthetic, config.batch_size, config.real_ratio, st["sac"])
                    policy, critics = policy_update(policy, critics, batch, st["sac"])
            seconds["interaction"] = time.perf_counter() - t0
            phases.append("interaction")
            ret, nll = _eval_and_nll(env_for_eval, policy, model, config, st["eval"])
            status = "ok"
        except NumericalFault:
            ret, nll, status = float("nan"), float("nan"), "failed"
            result.failed = True
        if len(dataset) != size_before:
            raise RuntimeError("offline dataset changed size during training")
        if status == "ok":
            best = max(best, ret)
        if "model" in phases:
            w_mean, w_max, w_dec = _weight_stats(weights)
        else:
            w_mean, w_max, w_dec = np.nan, np.nan, [np.nan] * 10
        row = MetricsRow(epoch, 0, ret, best, nll, w_mean, w_max, w_dec, ">".join(phases), status,
                         phase_seconds=seconds)
        if on_road is not None and "model" in phases:
            w = np.asarray(weights, float)
            row.weight_on_road_mean = float(w[on_road].mean()) if on_road.any() else float("nan")
            row.weight_off_road_mean = float(w[~on_road].mean()) if (~on_road).any() else float("nan")
            mean, _ = model.mean_std(dataset.states[on_road], dataset.actions[on_road])
            row.road_prediction_error = float(np.mean(np.linalg.norm(mean - dataset.next_states[on_road], axis=1)))
        result.append(row)
        if status == "failed":
            break
    result.artifacts.update(policy=policy, critics=critics, model=model, discriminator=disc, dual_q=q,
                            buffer=dataset, weights=weights if model is not None else None)
    return result


def train_sac_checkpoints(env, rng: np.random.Generator, n_checkpoints: int = 5, steps_per_checkpoint: int = 4000,
                          updates_per_step: int = 1, batch_size: int = 128, hidden: int = 64,
                          warmup: int = 1000) -> list[StochasticPolicy]:
    """Model-free actor-critic training on ``env``; returns policy snapshots of increasing age."""
    spec = env.spec
    st = spawn_streams(rng)
    policy = StochasticPolicy.create(spec.state_dim, spec.action_low, spec.action_high, st["init"], (hidden, hidden))
    critics = CriticPair.create(spec.state_dim, spec.action_dim, st["init"], (hidden, hidden), gamma=spec.gamma)
    buf = ReplayBuffer(spec.state_dim, spec.action_dim, n_checkpoints * steps_per_checkpoint + warmup)
    explorer = RandomPolicy(spec.action_low, spec.action_high)
    state, t = env.reset(st["env"]), 0
    checkpoints = []
    for step in range(warmup + n_checkpoints * steps_per_checkpoint):
        actor = explorer if step < warmup else policy
        a = actor.act(state[None], st["sac"])[0]
        ns, r = env.step(state, a, st["env"])
        buf.push(Transition(state, a, ns, r, t == 0))
        state, t = ns, t + 1
        if t >= env.horizon:
            state, t = env.reset(st["env"]), 0
        if step >= warmup:
            for _ in range(updates_per_step):
                policy, critics = policy_update(policy, critics, buf.sample(batch_size, st["sac"]), st["sac"])
            if (step - warmup + 1) % steps_per_checkpoint == 0:
                checkpoints.append(policy.copy())
    return checkpoints


def collect_transitions(env, policy, n: int, rng: np.random.Generator, tag: int = 0,
                        buffer: ReplayBuffer | None = None) -> ReplayBuffer:
    """``n`` transitions from full-horizon episodes of ``policy`` (stochastic actions)."""
    spec = env.spec
    buffer = buffer if buffer is not None else ReplayBuffer(spec.state_dim, spec.action_dim, max(1, n))
    state, t = env.reset(rng), 0
    for _ in range(n):
        a = policy.act(state[None], rng)[0]
        ns, r = env.step(state, a, rng)
        buffer.push(Transition(state, a, ns, r, t == 0, tag=tag))
        state, t = ns, t + 1
        if t >= env.horizon:
            state, t = env.reset(rng), 0
    return buffer


def build_curated_buffer(env, checkpoints, n_total: int, rng: np.random.Generator) -> ReplayBuffer:
    """First half random-policy data, second half equal shares from each checkpoint in order.

    Tags: 0 for random data, ``i + 1`` for checkpoint ``i``.
    """
    half = n_total // 2
    spec = env.spec
    buf = ReplayBuffer(spec.state_dim, spec.action_dim, n_total)
    collect_transitions(env, RandomPolicy(spec.action_low, spec.action_high), half, rng, 0, buf)
    shares = np.diff(np.linspace(0, n_total - half, len(checkpoints) + 1).round().astype(int))
    for i, (pol, n) in enumerate(zip(checkpoints, shares)):
        collect_transitions(env, pol, int(n), rng, i + 1, buf)
    return buf


@dataclass
class WeightProgression:
    weights: np.ndarray
    decile_means: list
    first_half_mean: float
    second_half_mean: float
    spearman: float


def run_weight_progression(config: LoopConfig, curated_buffer: ReplayBuffer, expert_policy,
                           rng: np.random.Generator, env=None, policy_data: ReplayBuffer | None = None
                           ) -> WeightProgression:
    """Train discriminator and dual Q offline against a fixed policy of interest; report weights by decile.

    The policy of interest's footprint is ``policy_data`` if given, otherwise
    ``config.policy_buffer_size`` fresh transitions collected in ``env``.
    """
    if policy_data is None:
        if env is None:
            raise ValueError("need either policy_data or an environment to collect it")
        policy_data = collect_transitions(env, expert_policy, config.policy_buffer_size, rng)
    st = spawn_streams(rng)
    sd, ad = curated_buffer.state_dim, curated_buffer.action_dim
    gamma = env.spec.gamma if env is not None else 0.99
    hid = (config.hidden, config.hidden)
    disc = Discriminator.create(2 * sd + ad, st["tom"], hid, config.learning_rate)
    q = DualQ.create(sd, ad, st["tom"], gamma, hid, config.learning_rate, config.value_action_samples)
    disc, q, w = _tom_weights(config, expert_policy, curated_buffer, disc, q, policy_data, gamma,
                              st["tom"], {}, [])
    dec = decile_means(w)
    half = len(w) // 2
    rho = spearmanr(np.arange(5), dec[5:]).statistic
    return WeightProgression(w, dec, float(w[:half].mean()), float(w[half:].mean()), float(rho))
