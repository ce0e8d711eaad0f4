"""Property suites over the exact tabular machinery, runnable from tests and the command line.

Each suite returns a :class:`SuiteReport` with the worst-case quantity it
checked against its threshold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .fdiv import CHI_SQUARED, KL, conjugate, conjugate_prime, divergence, f_value
from .occupancy import (TabularMDP, bellman_flow_residual, bellman_transition_flow_residual, exact_occupancy,
                        primal_tom_solve, random_mdp, random_policy, random_simplex, recover_transition,
                        rescale_rewards, tabular_dual_weights, total_variation, transition_occupancy,
                        verify_lower_bound)
from .tom import TabularQ, dual_q_loss, tabular_dual_batch
from .approximator import AdamState, adam_step


@dataclass
class SuiteReport:
    name: str
    passed: bool
    worst: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    seconds: float = 0.0

    def summary(self) -> str:
        parts = ", ".join(f"{k}={v:.3e} (limit {self.thresholds[k]:.0e})" for k, v in self.worst.items())
        return f"{self.name}: {'PASS' if self.passed else 'FAIL'} [{parts}] in {self.seconds:.2f}s"


def _finish(name, worst, thresholds, t0, ge: tuple = ()) -> SuiteReport:
    ok = all((worst[k] >= thresholds[k]) if k in ge else (worst[k] <= thresholds[k]) for k in worst)
    return SuiteReport(name, bool(ok), worst, thresholds, time.perf_counter() - t0)


def _random_instance(seed: int, max_states: int = 8, max_actions: int = 4):
    rng = np.random.default_rng(seed)
    ns = int(rng.integers(2, max_states + 1))
    na = int(rng.integers(1, max_actions + 1))
    gamma = float(rng.uniform(0.5, 0.99))
    return rng, random_mdp(ns, na, rng, gamma)


def bellman_flow_suite(n_seeds: int = 100, seed0: int = 0) -> SuiteReport:
    """Occupancy flow and normalization, plus the transition-occupancy identities."""
    t0 = time.perf_counter()
    worst = dict(flow_residual=0.0, sum_error=0.0, marginal_error=0.0, recovery_error=0.0,
                 transition_flow_residual=0.0)
    for k in range(n_seeds):
        rng, mdp = _random_instance(seed0 + k)
        pi = random_policy(mdp.n_states, mdp.n_actions, rng)
        d = exact_occupancy(mdp, pi)
        dtod = transition_occupancy(d, mdp)
        rec = recover_transition(dtod)
        worst["flow_residual"] = max(worst["flow_residual"], bellman_flow_residual(d, mdp, pi))
        worst["sum_error"] = max(worst["sum_error"], abs(d.sum() - 1.0))
        worst["marginal_error"] = max(worst["marginal_error"], float(np.max(np.abs(dtod.sum(-1) - d))))
        if rec.defined.any():
            err = np.max(np.abs(rec.transitions[rec.defined] - mdp.transitions[rec.defined]))
            worst["recovery_error"] = max(worst["recovery_error"], float(err))
        worst["transition_flow_residual"] = max(worst["transition_flow_residual"],
                                                bellman_transition_flow_residual(dtod, mdp, pi))
    limits = dict(flow_residual=1e-8, sum_error=1e-9, marginal_error=1e-12, recovery_error=1e-12,
                  transition_flow_residual=1e-8)
    return _finish("bellman-flow", worst, limits, t0)


def perturbed_model(mdp: TabularMDP, rng: np.random.Generator, strength: float | None = None) -> np.ndarray:
    """Mixture of the true dynamics with random dynamics (keeps the support of ``T``)."""
    eps = float(rng.uniform(0.05, 0.9)) if strength is None else strength
    noise = random_simplex(rng, mdp.transitions.shape)
    return (1.0 - eps) * mdp.transitions + eps * noise


def lower_bound_suite(n_seeds: int = 100, seed0: int = 0) -> SuiteReport:
    """The log-return lower bound under a perturbed model, for KL and chi-squared."""
    t0 = time.perf_counter()
    worst_violation = 0.0
    for k in range(n_seeds):
        rng, mdp = _random_instance(10_000 + seed0 + k)
        mdp = TabularMDP(mdp.transitions, rescale_rewards(mdp.rewards, 0.1, 1.0), mdp.initial_dist, mdp.gamma)
        pi = random_policy(mdp.n_states, mdp.n_actions, rng)
        model = perturbed_model(mdp, rng)
        for div in (KL, CHI_SQUARED):
            lhs, rhs = verify_lower_bound(mdp, pi, model, div)
            worst_violation = max(worst_violation, rhs - lhs)
    return _finish("lower-bound", {"max_violation": worst_violation}, {"max_violation": 1e-9}, t0)


def fenchel_suite(n_pairs: int = 10_000, seed: int = 0, fd_step: float = 1e-6) -> SuiteReport:
    """Fenchel-Young, conjugate-derivative consistency, and chi-squared >= KL."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    x = rng.exponential(2.0, size=n_pairs)
    y = rng.uniform(-6.0, 6.0, size=n_pairs)
    fy_gap = 0.0
    fd_err = 0.0
    for div in (CHI_SQUARED, KL):
        # f(x) + f*(y) - x y >= 0
        fy_gap = min(fy_gap, float(np.min(f_value(div, x) + conjugate(div, y) - x * y)))
        yy = y if div.kind == "kl" else y[np.abs(y + 2.0) > 1e-3]
        fd = (conjugate(div, yy + fd_step) - conjugate(div, yy - fd_step)) / (2.0 * fd_step)
        scale = np.maximum(1.0, np.abs(conjugate_prime(div, yy)))
        fd_err = max(fd_err, float(np.max(np.abs(fd - conjugate_prime(div, yy)) / scale)))
    dom = np.inf
    for _ in range(n_pairs):
        n = int(rng.integers(2, 9))
        p = rng.dirichlet(np.ones(n))
        q = rng.dirichlet(np.ones(n))
        dom = min(dom, divergence(CHI_SQUARED, p, q) - divergence(KL, p, q))
    worst = {"fenchel_young_gap": fy_gap, "derivative_error": fd_err, "chi2_minus_kl": float(dom)}
    limits = {"fenchel_young_gap": -1e-12, "derivative_error": 1e-6, "chi2_minus_kl": -1e-12}
    return _finish("fenchel", worst, limits, t0, ge=("fenchel_young_gap", "chi2_minus_kl"))


def reference_mdp() -> tuple[TabularMDP, np.ndarray, np.ndarray]:
    """A fixed 3-state, 2-action problem: (MDP, policy of interest, behaviour policy)."""
    t = np.array([
        [[0.7, 0.2, 0.1], [0.1, 0.6, 0.3]],
        [[0.3, 0.5, 0.2], [0.05, 0.15, 0.8]],
        [[0.4, 0.4, 0.2], [0.25, 0.25, 0.5]],
    ])
    r = np.array([[0.2, 0.5], [0.4, 0.9], [0.1, 1.0]])
    mdp = TabularMDP(t, r, np.array([0.6, 0.3, 0.1]), gamma=0.9)
    pi = np.array([[0.2, 0.8], [0.3, 0.7], [0.1, 0.9]])
    behaviour = np.array([[0.7, 0.3], [0.6, 0.4], [0.5, 0.5]])
    return mdp, pi, behaviour


@dataclass
class DualPrimalResult:
    tv: float
    dual_weights: np.ndarray
    primal_dtod: np.ndarray
    replay_dtod: np.ndarray
    q_table: np.ndarray


def dual_primal_comparison(divergence_name: str = "chi_squared", steps: int = 20_000,
                           learning_rate: float = 0.02) -> DualPrimalResult:
    """Adam-trained tabular dual against the brute-force primal optimum on :func:`reference_mdp`."""
    mdp, pi, behaviour = reference_mdp()
    d_replay = transition_occupancy(exact_occupancy(mdp, behaviour), mdp)
    d_pi = transition_occupancy(exact_occupancy(mdp, pi), mdp)
    reward = np.log(d_pi / d_replay)
    primal = primal_tom_solve(mdp, pi, d_replay, divergence_name)

    q = TabularQ(mdp.n_states, mdp.n_actions, mdp.gamma)
    batch = tabular_dual_batch(mdp, pi, d_replay, reward)
    params, adam = q.params, AdamState.zeros(len(q.params), learning_rate)
    for _ in range(steps):
        _, g = dual_q_loss(q.with_params(params), batch, divergence_name, mdp.gamma)
        params, adam = adam_step(params, g, adam)
    table = params.reshape(mdp.n_states, mdp.n_actions)
    w = tabular_dual_weights(mdp, pi, table, reward, divergence_name)
    tv = total_variation(w * d_replay, primal.dtod)
    return DualPrimalResult(tv, w, primal.dtod, d_replay, table)


def dual_primal_suite(divergence_name: str = "chi_squared") -> SuiteReport:
    t0 = time.perf_counter()
    res = dual_primal_comparison(divergence_name)
    return _finish("dual-primal", {"total_variation": res.tv}, {"total_variation": 0.05}, t0)


SUITES = {
    "bellman-flow": lambda seeds: bellman_flow_suite(seeds),
    "lower-bound": lambda seeds: lower_bound_suite(seeds),
    "dual-primal": lambda seeds: dual_primal_suite(),
    "fenchel": lambda seeds: fenchel_suite(),
}


def run_suite(name: str, seeds: int = 100) -> SuiteReport:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name](seeds)
