"""Desk-scale environments: a tabular chain, road-and-rocks, and a 2-D point mass.

Environments are value-like: ``step`` maps ``(state, action)`` to a new
state without mutating the environment object.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .buffers import EnvSpec, ReplayBuffer, Transition, collect_rollout
from .occupancy import TabularMDP


class RandomPolicy:
    """Uniform actions inside box bounds."""

    def __init__(self, action_low, action_high):
        self.action_low = np.asarray(action_low, float)
        self.action_high = np.asarray(action_high, float)

    def act(self, states, rng=None, deterministic: bool = False) -> np.ndarray:
        n = len(np.atleast_2d(states))
        if deterministic:
            return np.tile(0.5 * (self.action_low + self.action_high), (n, 1))
        rng = rng if rng is not None else np.random.default_rng()
        return rng.uniform(self.action_low, self.action_high, size=(n, len(self.action_low)))


class TabularPolicy:
    """Categorical policy over integer actions; states and actions are 1-column float arrays."""

    def __init__(self, probs: np.ndarray):
        self.probs = np.asarray(probs, float)

    def act(self, states, rng=None, deterministic: bool = False) -> np.ndarray:
        s = np.asarray(states).reshape(-1).astype(np.int64)
        p = self.probs[s]
        if deterministic:
            return np.argmax(p, axis=1).astype(float)[:, None]
        rng = rng if rng is not None else np.random.default_rng()
        u = rng.random(len(s))[:, None]
        a = (np.cumsum(p, axis=1) < u).sum(axis=1)
        return np.minimum(a, p.shape[1] - 1).astype(float)[:, None]


class GridChain:
    """A chain of states; action 1 moves right, action 0 moves left, each slipping with some probability."""

    horizon = 200

    def __init__(self, n_states: int = 5, n_actions: int = 2, slip: float = 0.2, gamma: float = 0.95,
                 initial_dist=None):
        if n_actions < 2:
            raise ValueError("GridChain needs at least a left and a right action")
        t = np.zeros((n_states, n_actions, n_states))
        for s in range(n_states):
            left, right = max(s - 1, 0), min(s + 1, n_states - 1)
            for a in range(n_actions):
                target = right if a % 2 == 1 else left
                other = left if a % 2 == 1 else right
                # extra actions (a >= 2) stay put with the slip mass
                if a >= 2:
                    t[s, a, s] += 1.0 - slip
                else:
                    t[s, a, target] += 1.0 - slip
                t[s, a, other] += slip
        rewards = np.full((n_states, n_actions), 0.1)
        rewards[n_states - 1, :] = 1.0
        if initial_dist is None:
            initial_dist = 0.5 ** np.arange(n_states)
            initial_dist = initial_dist / initial_dist.sum()
        self.mdp = TabularMDP(t, rewards, np.asarray(initial_dist, float), gamma)
        self.spec = EnvSpec(1, 1, np.zeros(1), np.array([n_actions - 1.0]), gamma, (0.1, 1.0))

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([float(rng.choice(self.mdp.n_states, p=self.mdp.initial_dist))])

    def step(self, state, action, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        s, a = int(state[0]), int(np.asarray(action).ravel()[0])
        ns = rng.choice(self.mdp.n_states, p=self.mdp.transitions[s, a])
        return np.array([float(ns)]), float(self.mdp.rewards[s, a])


@dataclass
class RoadAndRocks:
    """Drive from a start segment to a goal along a straight road through rocky terrain.

    On the road an action moves the car by exactly that displacement (plus
    small noise). Every rock cell of a 20x20 grid applies its own fixed
    rotation-and-scale distortion to the action. Rock rotations are drawn
    from ``[pi/2, 3pi/2]``, so on average rocks push the car sideways or
    backwards relative to the command.
    """

    map_seed: int = 0
    grid: int = 20
    road_y: tuple[float, float] = (0.4, 0.6)
    road_x: tuple[float, float] = (0.05, 0.95)
    start_x: tuple[float, float] = (0.05, 0.15)
    start_y: tuple[float, float] = (0.45, 0.55)
    goal: tuple[float, float] = (0.9, 0.5)
    goal_tolerance: float = 0.05
    max_step: float = 0.05
    noise_std: float = 0.002
    scale_range: tuple[float, float] = (0.2, 1.8)
    angle_range: tuple[float, float] = (0.5 * np.pi, 1.5 * np.pi)
    reward_floor: float = 0.01
    gamma: float = 0.95
    horizon: int = 200
    clipped_actions: int = field(default=0, compare=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.map_seed)
        n = self.grid * self.grid
        theta = rng.uniform(*self.angle_range, size=n)
        scale = rng.uniform(*self.scale_range, size=n)
        c, s = np.cos(theta), np.sin(theta)
        self.distortions = (scale[:, None, None]
                            * np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], 1))
        self.distortions = self.distortions.reshape(self.grid, self.grid, 2, 2)
        self.spec = EnvSpec(2, 2, np.full(2, -self.max_step), np.full(2, self.max_step),
                            self.gamma, (self.reward_floor, 1.0))

    def is_on_road(self, state) -> np.ndarray | bool:
        p = np.atleast_2d(state)
        on = ((p[:, 0] >= self.road_x[0]) & (p[:, 0] <= self.road_x[1])
              & (p[:, 1] >= self.road_y[0]) & (p[:, 1] <= self.road_y[1]))
        return bool(on[0]) if np.ndim(state) == 1 else on

    def cell(self, state) -> tuple[np.ndarray, np.ndarray]:
        p = np.atleast_2d(state)
        idx = np.clip((p * self.grid).astype(np.int64), 0, self.grid - 1)
        return idx[:, 0], idx[:, 1]

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(*self.start_x), rng.uniform(*self.start_y)])

    def reward(self, states, actions, next_states) -> np.ndarray:
        d = np.linalg.norm(np.atleast_2d(next_states) - np.asarray(self.goal), axis=1)
        return np.maximum(self.reward_floor, 1.0 - d)

    def clip_state(self, states) -> np.ndarray:
        return np.clip(states, 0.0, 1.0)

    def step_batch(self, states, actions, rng: np.random.Generator | None, noise_std=None) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, float))
        actions = np.atleast_2d(np.asarray(actions, float))
        clipped = np.clip(actions, -self.max_step, self.max_step)
        self.clipped_actions += int(np.any(clipped != actions, axis=1).sum())
        ix, iy = self.cell(states)
        moved = np.einsum("nij,nj->ni", self.distortions[ix, iy], clipped)
        on = self.is_on_road(states)
        moved[on] = clipped[on]
        sigma = self.noise_std if noise_std is None else noise_std
        noise = rng.standard_normal(states.shape) * sigma if (sigma > 0 and rng is not None) else 0.0
        return self.clip_state(states + moved + noise)

    def step(self, state, action, rng: np.random.Generator, noise_std=None) -> tuple[np.ndarray, float]:
        ns = self.step_batch(state, action, rng, noise_std)[0]
        return ns, float(self.reward(state, action, ns)[0])

    def is_terminal(self, state) -> bool:
        return False

    def at_goal(self, state) -> bool:
        return bool(np.linalg.norm(np.asarray(state) - np.asarray(self.goal)) <= self.goal_tolerance)


class RoadExpert:
    """Scripted controller: head for the goal at full speed, with optional action noise."""

    def __init__(self, env: RoadAndRocks, noise_std: float = 0.03):
        self.env = env
        self.noise_std = noise_std

    def act(self, states, rng=None, deterministic: bool = False) -> np.ndarray:
        p = np.atleast_2d(states)
        a = np.clip(np.asarray(self.env.goal) - p, -self.env.max_step, self.env.max_step)
        if not deterministic and self.noise_std > 0:
            rng = rng if rng is not None else np.random.default_rng()
            a = a + self.noise_std * rng.standard_normal(a.shape)
        return np.clip(a, -self.env.max_step, self.env.max_step)


def expert_trajectory(env: RoadAndRocks, expert, rng: np.random.Generator,
                      deterministic: bool = False) -> list[Transition]:
    """Run the expert from a reset until it is within goal tolerance (or the horizon ends)."""
    s = env.reset(rng)
    out = []
    for t in range(env.horizon):
        a = expert.act(s[None], rng, deterministic)[0]
        ns, r = env.step(s, a, rng)
        out.append(Transition(s, a, ns, r, t == 0, tag=1))
        s = ns
        if env.at_goal(s):
            break
    return out


def make_offline_dataset(env: RoadAndRocks, n_random: int = 20000, n_expert_traj: int = 5,
                         rng: np.random.Generator | None = None, random_episode_len: int = 20,
                         expert_noise: float = 0.03) -> ReplayBuffer:
    """Uniform-random exploration over the map plus scripted expert runs (tagged 1).

    Only expert runs begin at a genuine reset, so only their first
    transitions carry the episode-start flag.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    buf = ReplayBuffer(2, 2, capacity=max(1, n_random + n_expert_traj * env.horizon))
    explorer = RandomPolicy(env.spec.action_low, env.spec.action_high)
    made = 0
    while made < n_random:
        length = min(random_episode_len, n_random - made)
        s = rng.uniform(0.0, 1.0, size=2)
        for t in range(length):
            a = explorer.act(s[None], rng)[0]
            ns, r = env.step(s, a, rng)
            # exploratory segments start anywhere on the map, not from the reset distribution
            buf.push(Transition(s, a, ns, r, False, tag=0))
            s = ns
        made += length
    expert = RoadExpert(env, expert_noise)
    for _ in range(n_expert_traj):
        buf.extend(expert_trajectory(env, expert, rng))
    return buf


@dataclass
class PointMassReach:
    """Planar double integrator with linear drag; reward grows as the mass nears a fixed goal."""

    dt: float = 0.05
    drag: float = 0.05
    pos_bound: float = 1.0
    vel_bound: float = 2.0
    goal: tuple[float, float] = (0.5, 0.5)
    start_low: tuple[float, float] = (-0.7, -0.7)
    start_high: tuple[float, float] = (-0.3, -0.3)
    noise_std: float = 0.005
    reward_floor: float = 0.01
    gamma: float = 0.99
    horizon: int = 200
    clipped_actions: int = field(default=0, compare=False)

    def __post_init__(self):
        self.spec = EnvSpec(4, 2, -np.ones(2), np.ones(2), self.gamma, (self.reward_floor, 1.0))
        self.distance_scale = 2.0 * np.sqrt(2.0) * self.pos_bound

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([rng.uniform(self.start_low, self.start_high), np.zeros(2)])

    def reward(self, states, actions, next_states) -> np.ndarray:
        d = np.linalg.norm(np.atleast_2d(next_states)[:, :2] - np.asarray(self.goal), axis=1)
        return np.maximum(self.reward_floor, 1.0 - np.minimum(1.0, d / self.distance_scale))

    def clip_state(self, states) -> np.ndarray:
        s = np.array(states, float)
        s[:, :2] = np.clip(s[:, :2], -self.pos_bound, self.pos_bound)
        s[:, 2:] = np.clip(s[:, 2:], -self.vel_bound, self.vel_bound)
        return s

    def step_batch(self, states, actions, rng: np.random.Generator | None, noise_std=None) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, float))
        actions = np.atleast_2d(np.asarray(actions, float))
        a = np.clip(actions, -1.0, 1.0)
        self.clipped_actions += int(np.any(a != actions, axis=1).sum())
        pos, vel = states[:, :2], states[:, 2:]
        vel = vel + self.dt * a - self.drag * vel
        sigma = self.noise_std if noise_std is None else noise_std
        if sigma > 0 and rng is not None:
            vel = vel + sigma * rng.standard_normal(vel.shape)
        pos = pos + self.dt * vel
        return self.clip_state(np.concatenate([pos, vel], axis=1))

    def step(self, state, action, rng: np.random.Generator, noise_std=None) -> tuple[np.ndarray, float]:
        ns = self.step_batch(state, action, rng, noise_std)[0]
        return ns, float(self.reward(state, action, ns)[0])


def evaluate(env, policy, rng: np.random.Generator, episodes: int = 10, deterministic: bool = True) -> float:
    """Mean undiscounted return over full-horizon episodes."""
    total = 0.0
    for _ in range(episodes):
        total += sum(t.reward for t in collect_rollout(env, policy, env.horizon, rng, deterministic))
    return total / episodes
