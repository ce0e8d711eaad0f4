"""Exact tabular occupancy machinery.

Arrays follow one layout throughout: transition tensors and transition
occupancies are ``[s, a, s']``, state-action tables are ``[s, a]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import InfeasibleProblem
from .fdiv import FDivergence, conjugate_prime, f_value, get_divergence


@dataclass
class TabularMDP:
    transitions: np.ndarray  # [s, a, s']
    rewards: np.ndarray  # [s, a]
    initial_dist: np.ndarray  # [s]
    gamma: float = 0.95

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        ns, na, ns2 = self.transitions.shape
        if ns != ns2 or self.rewards.shape != (ns, na) or self.initial_dist.shape != (ns,):
            raise ValueError("inconsistent tabular MDP shapes")
        if np.any(self.transitions < 0) or np.max(np.abs(self.transitions.sum(-1) - 1)) > 1e-12:
            raise ValueError("transition rows must be distributions")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1) > 1e-12:
            raise ValueError("initial distribution must sum to 1")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


def check_policy(policy: np.ndarray, n_states: int, n_actions: int) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (n_states, n_actions):
        raise ValueError(f"policy shape {policy.shape} != {(n_states, n_actions)}")
    if np.any(policy < 0) or np.max(np.abs(policy.sum(1) - 1)) > 1e-12:
        raise ValueError("policy rows must be distributions")
    return policy


def random_simplex(rng: np.random.Generator, shape, concentration: float = 1.0) -> np.ndarray:
    """Dirichlet draws along the last axis, renormalized so rows sum to 1 to machine precision."""
    x = rng.gamma(concentration, size=shape) + 1e-12
    x /= x.sum(-1, keepdims=True)
    return x


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator, gamma: float = 0.9,
               concentration: float = 1.0) -> TabularMDP:
    return TabularMDP(
        random_simplex(rng, (n_states, n_actions, n_states), concentration),
        rng.uniform(0.0, 1.0, size=(n_states, n_actions)),
        random_simplex(rng, (n_states,), concentration),
        gamma,
    )


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator,
                  concentration: float = 1.0) -> np.ndarray:
    return random_simplex(rng, (n_states, n_actions), concentration)


def exact_occupancy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """Discounted state-action occupancy by solving ``(I - gamma P_pi^T) d = (1-gamma) mu0*pi``."""
    if not 0.0 < mdp.gamma < 1.0:
        raise ValueError("occupancy is undefined for gamma outside (0, 1)")
    ns, na = mdp.n_states, mdp.n_actions
    pi = check_policy(policy, ns, na)
    # flow[(s,a), (s~,a~)] = pi(a|s) T(s|s~,a~)
    into_s = mdp.transitions.reshape(ns * na, ns).T  # [s, (s~,a~)]
    flow = (pi[:, :, None] * into_s[:, None, :]).reshape(ns * na, ns * na)
    rhs = ((1.0 - mdp.gamma) * mdp.initial_dist[:, None] * pi).ravel()
    d = np.linalg.solve(np.eye(ns * na) - mdp.gamma * flow, rhs)
    return d.reshape(ns, na)


def bellman_flow_residual(d: np.ndarray, mdp: TabularMDP, policy: np.ndarray) -> float:
    """Max-norm residual of the single-step transpose Bellman equation for ``d[s,a]``."""
    inflow = np.einsum("xys,xy->s", mdp.transitions, d)
    rhs = policy * ((1.0 - mdp.gamma) * mdp.initial_dist + mdp.gamma * inflow)[:, None]
    return float(np.max(np.abs(d - rhs)))


def state_flow_residual(d: np.ndarray, mdp: TabularMDP) -> float:
    """Residual of the state-marginal flow constraint (no policy needed)."""
    inflow = np.einsum("xys,xy->s", mdp.transitions, d)
    rhs = (1.0 - mdp.gamma) * mdp.initial_dist + mdp.gamma * inflow
    return float(np.max(np.abs(d.sum(1) - rhs)))


def transition_occupancy(d: np.ndarray, mdp: TabularMDP) -> np.ndarray:
    return mdp.transitions * np.asarray(d)[:, :, None]


@dataclass
class RecoveredTransition:
    transitions: np.ndarray  # NaN on undefined rows
    defined: np.ndarray  # [s, a] mask of rows with positive mass


def recover_transition(dtod: np.ndarray) -> RecoveredTransition:
    mass = dtod.sum(-1)
    defined = mass > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(defined[:, :, None], dtod / np.where(defined, mass, 1.0)[:, :, None], np.nan)
    return RecoveredTransition(t, defined)


def bellman_transition_flow_residual(dtod: np.ndarray, mdp: TabularMDP, policy: np.ndarray) -> float:
    inflow = dtod.sum(axis=(0, 1))  # sum_{s~,a~} d((s~,a~), s)
    coef = (1.0 - mdp.gamma) * mdp.initial_dist + mdp.gamma * inflow  # [s]
    rhs = mdp.transitions * policy[:, :, None] * coef[:, None, None]
    return float(np.max(np.abs(dtod - rhs)))


def return_from_occupancy(d: np.ndarray, mdp: TabularMDP) -> float:
    return float(np.sum(d * mdp.rewards) / (1.0 - mdp.gamma))


def rescale_rewards(rewards: np.ndarray, low: float = 0.1, high: float = 1.0) -> np.ndarray:
    """Affine map of a reward table onto ``[low, high]`` so ``log R`` is finite."""
    lo, hi = rewards.min(), rewards.max()
    if hi - lo < 1e-15:
        return np.full_like(rewards, high)
    return low + (high - low) * (rewards - lo) / (hi - lo)


def verify_lower_bound(mdp: TabularMDP, policy: np.ndarray, model_transitions: np.ndarray,
                       divergence: FDivergence | str) -> tuple[float, float]:
    """Both sides of ``log E_{d_T}[R] >= -D_f(d_That || d_T) + E_{d_That}[log R]``.

    The additive constant shared by both sides is omitted.
    """
    div = get_divergence(divergence)
    if np.any(mdp.rewards <= 0):
        raise ValueError("rewards must be strictly positive for the log-reward bound")
    model = TabularMDP(model_transitions, mdp.rewards, mdp.initial_dist, mdp.gamma)
    d_true = transition_occupancy(exact_occupancy(mdp, policy), mdp)
    d_model = transition_occupancy(exact_occupancy(model, policy), model)
    r = mdp.rewards[:, :, None]
    lhs = float(np.log(np.sum(d_true * r)))
    support = d_true > 0
    if np.any(d_model[~support] > 0):
        return lhs, float("-inf")
    ratio = d_model[support] / d_true[support]
    dist = float(np.sum(d_true[support] * f_value(div, ratio)))
    rhs = -dist + float(np.sum(d_model * np.log(np.broadcast_to(r, d_model.shape))))
    return lhs, rhs


def flow_constraint_matrix(mdp: TabularMDP, policy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(A, b)`` with ``A @ d.ravel() - b`` the per-(s,a) transition-flow violation.

    Row ``(s,a)`` encodes ``sum_s' d(s,a,s') - gamma pi(a|s) sum_{s~,a~} d(s~,a~,s)
    = (1-gamma) mu0(s) pi(a|s)``.
    """
    ns, na = mdp.n_states, mdp.n_actions
    n = ns * na * ns
    a_mat = np.zeros((ns * na, n))
    idx = np.arange(n).reshape(ns, na, ns)
    for s in range(ns):
        for a in range(na):
            row = s * na + a
            a_mat[row, idx[s, a, :]] += 1.0
            a_mat[row, idx[:, :, s].ravel()] -= mdp.gamma * policy[s, a]
    b = ((1.0 - mdp.gamma) * mdp.initial_dist[:, None] * policy).ravel()
    return a_mat, b


@dataclass
class PrimalSolution:
    dtod: np.ndarray
    multipliers: np.ndarray  # [s, a]; the Lagrange multipliers of the flow constraints
    objective: float
    residual: float
    history: list = field(default_factory=list)


def tom_primal_objective(d, replay_dtod, policy_dtod, divergence: FDivergence,
                         form: str = "regularized") -> tuple[float, np.ndarray]:
    """Primal objective value and gradient over the support of ``replay_dtod``.

    ``form="regularized"``: ``E_d[log(d_pi/d_D)] - D_f(d || d_D)``, the problem
    whose Lagrangian dual is the Q-problem.
    ``form="two_divergence"``: ``-D_f(d || d_pi) - D_f(d || d_D)``.
    """
    x = d / replay_dtod
    if form == "regularized":
        reward = np.log(policy_dtod / replay_dtod)
        val = np.sum(d * reward) - np.sum(replay_dtod * f_value(divergence, x))
        grad = reward - _f_prime(divergence, x)
    elif form == "two_divergence":
        y = d / policy_dtod
        val = -np.sum(policy_dtod * f_value(divergence, y)) - np.sum(replay_dtod * f_value(divergence, x))
        grad = -_f_prime(divergence, y) - _f_prime(divergence, x)
    else:
        raise ValueError(f"unknown primal form {form!r}")
    return float(val), grad


def _f_prime(div: FDivergence, x):
    if div.kind == "chi_squared":
        return 2.0 * (x - 1.0)
    return np.log(np.maximum(x, 1e-300)) + 1.0


def primal_tom_solve(mdp_true: TabularMDP, policy: np.ndarray, replay_dtod: np.ndarray,
                     divergence: FDivergence | str = "chi_squared", form: str = "regularized",
                     tol_residual: float = 1e-5, tol_objective: float = 1e-8,
                     max_rounds: int = 50) -> PrimalSolution:
    """Brute-force solve of the regularized transition-occupancy primal.

    Maximizes :func:`tom_primal_objective` over ``d >= 0`` subject to the
    Bellman transition-flow constraints, with an augmented quadratic penalty
    ``rho = 10**k`` (k = 0..6) and bound-constrained L-BFGS as the inner
    projected solver. Multiplier updates continue at the final penalty until
    the residual and objective change fall below tolerance.
    """
    div = get_divergence(divergence)
    ns, na = mdp_true.n_states, mdp_true.n_actions
    policy = check_policy(policy, ns, na)
    replay_dtod = np.asarray(replay_dtod, dtype=float)
    policy_dtod = transition_occupancy(exact_occupancy(mdp_true, policy), mdp_true)
    support = replay_dtod > 0
    if form == "regularized" or form == "two_divergence":
        support &= policy_dtod > 0
    if not np.any(support):
        raise InfeasibleProblem("replay occupancy has empty support")
    a_full, b = flow_constraint_matrix(mdp_true, policy)
    sup = support.ravel()
    a_mat = a_full[:, sup]
    dd = replay_dtod.ravel()[sup]
    dp = policy_dtod.ravel()[sup]
    lower = 1e-14 if div.kind == "kl" else 0.0

    lam = np.zeros(len(b))
    x = np.maximum(dd.copy(), max(lower, 1e-12))
    history = []
    prev_obj = None

    def solve_inner(x0, rho, lam):
        def neg_aug(z):
            val, g = tom_primal_objective(z, dd, dp, div, form)
            c = b - a_mat @ z  # constraint value: rhs minus outflow
            aug = val + lam @ c - 0.5 * rho * c @ c
            grad = g - a_mat.T @ lam + rho * a_mat.T @ c
            return -aug, -grad

        res = minimize(neg_aug, x0, jac=True, method="L-BFGS-B",
                       bounds=[(lower, None)] * len(x0),
                       options={"maxiter": 20000, "ftol": 1e-16, "gtol": 1e-12, "maxcor": 30})
        return res.x

    rounds = 0
    for k in range(7):
        rho = 10.0 ** k
        x = solve_inner(x, rho, lam)
        lam = lam + rho * (a_mat @ x - b)
        history.append((rho, float(np.max(np.abs(a_mat @ x - b)))))
    obj, _ = tom_primal_objective(x, dd, dp, div, form)
    while rounds < max_rounds:
        rounds += 1
        x = solve_inner(x, 1e6, lam)
        lam = lam + 1e6 * (a_mat @ x - b)
        prev_obj, (obj, _) = obj, tom_primal_objective(x, dd, dp, div, form)
        resid = float(np.max(np.abs(a_mat @ x - b)))
        history.append((1e6, resid))
        if resid < tol_residual and abs(obj - prev_obj) < tol_objective:
            break
    resid = float(np.max(np.abs(a_mat @ x - b)))
    if resid >= tol_residual:
        raise InfeasibleProblem(f"flow residual {resid:.3e} above tolerance {tol_residual:.1e}")
    out = np.zeros(ns * na * ns)
    out[sup] = x
    return PrimalSolution(out.reshape(ns, na, ns), lam.reshape(ns, na), obj, resid, history)


def implied_weights(dtod: np.ndarray, replay_dtod: np.ndarray) -> np.ndarray:
    """``d / d_D`` on the replay support (0 elsewhere)."""
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(replay_dtod > 0, dtod / np.where(replay_dtod > 0, replay_dtod, 1.0), 0.0)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())


def tabular_dual_weights(mdp: TabularMDP, policy: np.ndarray, q_table: np.ndarray,
                         reward: np.ndarray, divergence: FDivergence | str) -> np.ndarray:
    """``f*'(r + gamma E_pi Q(s',.) - Q(s,a))`` for every ``(s,a,s')``."""
    div = get_divergence(divergence)
    v = (policy * q_table).sum(1)
    adv = reward + mdp.gamma * v[None, None, :] - q_table[:, :, None]
    return conjugate_prime(div, adv)
