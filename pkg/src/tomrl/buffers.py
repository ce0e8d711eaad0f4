"""Transition records, FIFO replay buffers, rollouts and buffer serialization."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .errors import AbsentState, DegenerateDistribution, DimensionError, EmptySupport

CSV_VERSION = "tomrl-buffer v1"


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    gamma: float = 0.99
    reward_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        lo = np.asarray(self.action_low, dtype=float)
        hi = np.asarray(self.action_high, dtype=float)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("action bounds must be finite")
        object.__setattr__(self, "action_low", lo)
        object.__setattr__(self, "action_high", hi)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    episode_start: bool = False
    insertion_index: int = -1  # -1 until stored in a buffer
    tag: int = 0


class Policy(Protocol):
    def act(self, states: np.ndarray, rng: np.random.Generator | None = None,
            deterministic: bool = False) -> np.ndarray: ...


class Environment(Protocol):
    spec: EnvSpec
    horizon: int

    def reset(self, rng: np.random.Generator) -> np.ndarray: ...

    def step(self, state: np.ndarray, action: np.ndarray,
             rng: np.random.Generator) -> tuple[np.ndarray, float]: ...


class ReplayBuffer:
    """Bounded FIFO store of transitions, kept as parallel numpy arrays.

    Storage is a ring; every accessor returns data oldest-first.
    """

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.capacity = int(capacity)
        self._alloc = 0
        self._head = 0  # slot of the oldest entry once the ring is full
        self._size = 0
        self._next_index = 0
        self._s = np.zeros((0, self.state_dim))
        self._a = np.zeros((0, self.action_dim))
        self._ns = np.zeros((0, self.state_dim))
        self._r = np.zeros(0)
        self._start = np.zeros(0, dtype=bool)
        self._idx = np.zeros(0, dtype=np.int64)
        self._tag = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return self._size

    @property
    def next_index(self) -> int:
        return self._next_index

    def _grow(self, needed: int) -> None:
        new = min(self.capacity, max(needed, 2 * self._alloc, 1024))
        pad = new - self._alloc

        def ext(arr, shape_tail=()):
            return np.concatenate([arr, np.zeros((pad, *shape_tail), dtype=arr.dtype)])

        self._s = ext(self._s, (self.state_dim,))
        self._a = ext(self._a, (self.action_dim,))
        self._ns = ext(self._ns, (self.state_dim,))
        self._r = ext(self._r)
        self._start = ext(self._start)
        self._idx = ext(self._idx)
        self._tag = ext(self._tag)
        self._alloc = new

    def push(self, t: Transition) -> "ReplayBuffer":
        s = np.asarray(t.state, dtype=float).ravel()
        a = np.asarray(t.action, dtype=float).ravel()
        ns = np.asarray(t.next_state, dtype=float).ravel()
        if s.shape[0] != self.state_dim or ns.shape[0] != self.state_dim:
            raise DimensionError(f"state dims {s.shape}/{ns.shape} != {self.state_dim}")
        if a.shape[0] != self.action_dim:
            raise DimensionError(f"action dim {a.shape[0]} != {self.action_dim}")
        if self._size < self.capacity:
            if self._size == self._alloc:
                self._grow(self._size + 1)
            slot = self._size
            self._size += 1
        else:
            slot = self._head
            self._head = (self._head + 1) % self.capacity
        self._s[slot] = s
        self._a[slot] = a
        self._ns[slot] = ns
        self._r[slot] = float(t.reward)
        self._start[slot] = bool(t.episode_start)
        self._idx[slot] = self._next_index
        self._tag[slot] = int(t.tag)
        self._next_index += 1
        return self

    def extend(self, transitions: Iterable[Transition]) -> "ReplayBuffer":
        for t in transitions:
            self.push(t)
        return self

    def extend_arrays(self, states, actions, next_states, rewards, episode_starts=None,
                      tags=None) -> "ReplayBuffer":
        """Vectorized ``extend``; rows are appended in order, oldest dropped first when full."""
        s = np.asarray(states, dtype=float).reshape(-1, self.state_dim)
        a = np.asarray(actions, dtype=float).reshape(len(s), self.action_dim)
        ns = np.asarray(next_states, dtype=float).reshape(len(s), self.state_dim)
        r = np.asarray(rewards, dtype=float).reshape(len(s))
        st = np.zeros(len(s), bool) if episode_starts is None else np.asarray(episode_starts, bool)
        tg = np.zeros(len(s), np.int64) if tags is None else np.broadcast_to(np.asarray(tags, np.int64), (len(s),))
        n = len(s)
        if n > self.capacity:  # only the newest rows survive
            drop = n - self.capacity
            self._next_index += drop
            s, a, ns, r, st, tg = s[drop:], a[drop:], ns[drop:], r[drop:], st[drop:], tg[drop:]
            n = self.capacity
        fill = min(n, self.capacity - self._size)
        if fill:
            if self._size + fill > self._alloc:
                self._grow(self._size + fill)
            sl = slice(self._size, self._size + fill)
            self._s[sl], self._a[sl], self._ns[sl], self._r[sl] = s[:fill], a[:fill], ns[:fill], r[:fill]
            self._start[sl], self._tag[sl] = st[:fill], tg[:fill]
            self._idx[sl] = self._next_index + np.arange(fill)
            self._size += fill
            self._next_index += fill
        rest = n - fill
        if rest:
            slots = (self._head + np.arange(rest)) % self.capacity
            self._s[slots], self._a[slots], self._ns[slots], self._r[slots] = s[fill:], a[fill:], ns[fill:], r[fill:]
            self._start[slots], self._tag[slots] = st[fill:], tg[fill:]
            self._idx[slots] = self._next_index + np.arange(rest)
            self._head = (self._head + rest) % self.capacity
            self._next_index += rest
        return self

    def _order(self) -> np.ndarray:
        if self._size < self.capacity:
            return np.arange(self._size)
        return (self._head + np.arange(self._size)) % self.capacity

    # oldest-first array views
    @property
    def states(self) -> np.ndarray:
        return self._s[self._order()]

    @property
    def actions(self) -> np.ndarray:
        return self._a[self._order()]

    @property
    def next_states(self) -> np.ndarray:
        return self._ns[self._order()]

    @property
    def rewards(self) -> np.ndarray:
        return self._r[self._order()]

    @property
    def episode_starts(self) -> np.ndarray:
        return self._start[self._order()]

    @property
    def insertion_indices(self) -> np.ndarray:
        return self._idx[self._order()]

    @property
    def tags(self) -> np.ndarray:
        return self._tag[self._order()]

    def arrays(self, positions=None) -> dict[str, np.ndarray]:
        """Column arrays, optionally restricted to oldest-first ``positions``."""
        order = self._order()
        if positions is not None:
            order = order[np.asarray(positions, dtype=np.int64)]
        return {
            "states": self._s[order],
            "actions": self._a[order],
            "next_states": self._ns[order],
            "rewards": self._r[order],
            "episode_starts": self._start[order],
            "insertion_indices": self._idx[order],
            "tags": self._tag[order],
        }

    def __getitem__(self, pos: int) -> Transition:
        if not -self._size <= pos < self._size:
            raise IndexError(pos)
        slot = self._order()[pos]
        return Transition(self._s[slot].copy(), self._a[slot].copy(), self._ns[slot].copy(),
                          float(self._r[slot]), bool(self._start[slot]),
                          int(self._idx[slot]), int(self._tag[slot]))

    def __iter__(self):
        for i in range(self._size):
            yield self[i]

    def subset(self, mask) -> "ReplayBuffer":
        """New buffer holding the selected transitions (indices are re-stamped).

        ``mask`` is either a boolean mask over positions or an array of integer positions.
        """
        mask = np.asarray(mask)
        positions = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(int).ravel()
        out = type(self)(self.state_dim, self.action_dim, max(1, len(positions)))
        for p in positions:
            out.push(self[int(p)])
        return out

    def sample_indices(self, batch_size: int, rng: np.random.Generator, weights=None) -> np.ndarray:
        """Oldest-first positions drawn with replacement, proportional to ``weights``."""
        if self._size == 0:
            raise EmptySupport("cannot sample from an empty buffer")
        if weights is None:
            return rng.integers(0, self._size, size=batch_size)
        w = np.asarray(weights, dtype=float)
        if w.shape != (self._size,):
            raise DimensionError(f"weights have shape {w.shape}, buffer size is {self._size}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("sampling weights must be finite and nonnegative")
        cdf = np.cumsum(w)
        total = cdf[-1]
        if total <= 0:
            raise DegenerateDistribution("all sampling weights are zero")
        u = rng.random(batch_size) * total
        return np.minimum(np.searchsorted(cdf, u, side="right"), self._size - 1)

    def sample(self, batch_size: int, rng: np.random.Generator, weights=None) -> dict[str, np.ndarray]:
        return self.arrays(self.sample_indices(batch_size, rng, weights))


class CurrentPolicyBuffer(ReplayBuffer):
    """The most recent environment transitions; stands in for the current policy's footprint."""

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 1000):
        super().__init__(state_dim, action_dim, capacity)


def buffer_push(buffer: ReplayBuffer, transition: Transition) -> ReplayBuffer:
    return buffer.push(transition)


def buffer_sample(buffer: ReplayBuffer, batch_size: int, weights=None, rng_seed=None) -> list[Transition]:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return [buffer[int(i)] for i in buffer.sample_indices(batch_size, rng, weights)]


def collect_rollout(env: Environment, policy: Policy, max_steps: int, rng_seed=None,
                    deterministic: bool = False) -> list[Transition]:
    """One episode of at most ``max_steps`` steps, stopping at the env horizon or a terminal state."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    out: list[Transition] = []
    if max_steps <= 0:
        return out
    s = env.reset(rng)
    is_terminal = getattr(env, "is_terminal", None)
    for t in range(min(max_steps, env.horizon)):
        a = policy.act(s[None, :], rng, deterministic=deterministic)[0]
        ns, r = env.step(s, a, rng)
        out.append(Transition(s, np.asarray(a, dtype=float), ns, r, t == 0))
        s = ns
        if is_terminal is not None and is_terminal(s):
            break
    return out


@dataclass
class EmpiricalPolicy:
    """Count-based ``pi_D(a|s) = n(s,a) / n(s)``; unvisited rows are NaN."""

    table: np.ndarray
    counts: np.ndarray

    @property
    def visited(self) -> np.ndarray:
        return self.counts.sum(axis=1) > 0

    def prob(self, s: int, a: int) -> float:
        if not self.visited[s]:
            raise AbsentState(s)
        return float(self.table[s, a])


def empirical_policy(buffer: ReplayBuffer, n_states: int, n_actions: int) -> EmpiricalPolicy:
    s = buffer.states[:, 0].astype(np.int64)
    a = buffer.actions[:, 0].astype(np.int64)
    counts = np.zeros((n_states, n_actions))
    np.add.at(counts, (s, a), 1.0)
    n_s = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        table = np.where(n_s > 0, counts / n_s, np.nan)
    return EmpiricalPolicy(table, counts)


def initial_state_batch(buffer: ReplayBuffer, batch_size: int, rng_seed=None) -> np.ndarray:
    """Uniform draws from the states that open an episode."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    starts = buffer.episode_starts
    if not np.any(starts):
        raise EmptySupport("buffer holds no episode-start transitions")
    states = buffer.states[starts]
    return states[rng.integers(0, len(states), size=batch_size)]


def _header(buffer: ReplayBuffer) -> list[str]:
    return ([f"s{i}" for i in range(buffer.state_dim)]
            + [f"a{i}" for i in range(buffer.action_dim)]
            + [f"ns{i}" for i in range(buffer.state_dim)]
            + ["reward", "episode_start", "insertion_index", "tag"])


def save_buffer(buffer: ReplayBuffer, path) -> None:
    """Write the buffer as CSV (one versioned comment line, then a header row)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = buffer.arrays()
    with path.open("w", newline="") as fh:
        fh.write(f"# {CSV_VERSION} state_dim={buffer.state_dim} action_dim={buffer.action_dim} "
                 f"capacity={buffer.capacity}\n")
        w = csv.writer(fh)
        w.writerow(_header(buffer))
        for i in range(len(buffer)):
            w.writerow([repr(float(x)) for x in cols["states"][i]]
                       + [repr(float(x)) for x in cols["actions"][i]]
                       + [repr(float(x)) for x in cols["next_states"][i]]
                       + [repr(float(cols["rewards"][i])), int(cols["episode_starts"][i]),
                          int(cols["insertion_indices"][i]), int(cols["tags"][i])])


def load_buffer(path) -> ReplayBuffer:
    """Inverse of :func:`save_buffer`; insertion indices are preserved."""
    path = Path(path)
    with path.open() as fh:
        first = fh.readline().strip()
        if not first.startswith("#") or CSV_VERSION not in first:
            raise ValueError(f"{path}: not a {CSV_VERSION} file")
        meta = dict(kv.split("=") for kv in first.split()[3:])
        sd, ad = int(meta["state_dim"]), int(meta["action_dim"])
        cap = int(meta.get("capacity", 1_000_000))
        rows = list(csv.reader(fh))
    buf = ReplayBuffer(sd, ad, cap)
    header = rows[0]
    if header != _header(buf):
        raise ValueError(f"{path}: unexpected columns {header}")
    for row in rows[1:]:
        vals = [float(x) for x in row[:2 * sd + ad + 1]]
        t = Transition(np.array(vals[:sd]), np.array(vals[sd:sd + ad]),
                       np.array(vals[sd + ad:2 * sd + ad]), vals[-1], bool(int(row[-3])),
                       tag=int(row[-1]))
        buf.push(t)
        buf._idx[len(buf) - 1] = int(row[-2])  # rows never exceed capacity, so no wrap
    buf._next_index = int(buf.insertion_indices.max()) + 1 if len(buf) else 0
    return buf
