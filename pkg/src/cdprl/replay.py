"""Trajectory replay buffer with uniform, CDP rank-based and PER sampling.

The buffer is not thread-safe: one writer (the training loop) owns it.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import ContractError, Trajectory
from .density import MixtureModel, NotFittedError, floored_log_density

STRATEGIES = ("uniform", "cdp", "per")


class StaleDensityError(RuntimeError):
    """CDP sampling was requested while the priority vector is out of date."""


class SumTree:
    """Binary tree of partial sums over a power-of-two number of leaves.

    Node 1 is the root, node i has children 2i and 2i+1, and leaf j lives at
    node ``size + j``. Parents are recomputed from their children rather than
    by delta propagation, so internal nodes never drift from their children.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractError("sum tree capacity must be positive")
        self.capacity = int(capacity)
        self.size = 1 << max(0, (self.capacity - 1).bit_length())
        self.tree = np.zeros(2 * self.size)
        self.max_priority = 0.0

    @property
    def total(self) -> float:
        return float(self.tree[1])

    @property
    def leaves(self) -> np.ndarray:
        return self.tree[self.size : self.size + self.capacity]

    def __getitem__(self, leaf_index):
        return self.tree[self.size + np.asarray(leaf_index)]

    def update(self, leaf_index, priority) -> None:
        """Set one or many leaves and refresh every ancestor."""
        idx = np.atleast_1d(np.asarray(leaf_index, dtype=np.int64))
        pri = np.broadcast_to(np.asarray(priority, dtype=float), idx.shape)
        if np.any(idx < 0) or np.any(idx >= self.capacity):
            raise IndexError(f"leaf index out of range [0, {self.capacity})")
        if np.any(pri < 0) or not np.all(np.isfinite(pri)):
            raise ContractError("priorities must be finite and non-negative")
        nodes = idx + self.size
        self.tree[nodes] = pri
        if pri.size:
            self.max_priority = max(self.max_priority, float(pri.max()))
        nodes = np.unique(nodes >> 1)
        while nodes[0] >= 1:
            self.tree[nodes] = self.tree[2 * nodes] + self.tree[2 * nodes + 1]
            if nodes[0] == 1:
                break
            nodes = np.unique(nodes >> 1)

    def sample(self, u):
        """Leaf whose prefix-sum interval [lo, lo + p) contains ``u``."""
        scalar = np.ndim(u) == 0
        u = np.atleast_1d(np.asarray(u, dtype=float)).copy()
        total = self.total
        if total <= 0:
            raise ContractError("cannot sample from a tree with zero total priority")
        if np.any(u < 0) or np.any(u >= total):
            raise ContractError(f"u must lie in [0, {total})")
        node = np.ones(u.shape, dtype=np.int64)
        while node[0] < self.size:
            left = 2 * node
            go_right = u >= self.tree[left]
            u = np.where(go_right, u - self.tree[left], u)
            node = left + go_right
        leaf = node - self.size
        # rounding in the subtraction chain can land on an empty leaf at a boundary
        empty = self.tree[node] <= 0
        if np.any(empty):
            leaf = leaf.copy()
            for i in np.flatnonzero(empty):
                leaf[i] = self._nearest_nonempty(int(leaf[i]))
        return int(leaf[0]) if scalar else leaf

    def _nearest_nonempty(self, leaf: int) -> int:
        nonzero = np.flatnonzero(self.leaves > 0)
        return int(nonzero[np.argmin(np.abs(nonzero - leaf))])


@dataclass(frozen=True)
class PERConfig:
    alpha: float = 0.6
    beta: float = 0.4
    beta_final: float = 1.0
    epsilon_priority: float = 1e-6

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError("alpha must be >= 0")
        if not 0.0 <= self.beta <= 1.0 or not 0.0 <= self.beta_final <= 1.0:
            raise ContractError("beta must lie in [0, 1]")
        if self.epsilon_priority <= 0:
            raise ContractError("epsilon_priority must be positive")

    def beta_at(self, progress: float) -> float:
        """Importance-sampling exponent annealed linearly over training progress in [0, 1]."""
        progress = min(max(progress, 0.0), 1.0)
        return self.beta + (self.beta_final - self.beta) * progress


def per_priority_from_td(td_error, config: PERConfig):
    return (np.abs(td_error) + config.epsilon_priority) ** config.alpha


def normalize_densities(log_densities) -> np.ndarray:
    """rho_i / sum_n rho_n, evaluated from log densities so that no term overflows."""
    logs = np.asarray(log_densities, dtype=float)
    if logs.size == 0:
        raise ContractError("cannot normalize an empty set of densities")
    return np.exp(logs - logsumexp(logs))


def rank_probabilities(complements: Sequence[float]) -> np.ndarray:
    """Sampling probabilities rank_i / sum(ranks) with ranks 0..N-1 ascending in the complement.

    Ties keep input order, so with inputs listed oldest first the older
    trajectory receives the lower rank. A single trajectory gets probability 1.
    """
    values = np.asarray(complements, dtype=float)
    n = values.shape[0]
    if n == 0:
        raise ContractError("rank probabilities of an empty buffer are undefined")
    if n == 1:
        return np.ones(1)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(n, dtype=float)
    return ranks / (n * (n - 1) / 2.0)


@dataclass
class SampleBatch:
    """Indices drawn from the buffer plus PER importance weights when relevant."""

    slots: np.ndarray
    timesteps: np.ndarray
    weights: Optional[np.ndarray] = None


class ReplayBuffer:
    """Bounded FIFO of fixed-horizon trajectories.

    Capacity counts trajectories. Slots form a ring; the logical order used for
    rank tie-breaking is oldest first.
    """

    def __init__(
        self,
        capacity: int,
        horizon: int,
        strategy: str = "uniform",
        per_config: PERConfig = PERConfig(),
        uniform_mix: float = 0.0,
    ):
        if capacity < 1 or horizon < 1:
            raise ContractError("capacity and horizon must be positive")
        if strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {strategy!r}")
        if not 0.0 <= uniform_mix <= 1.0:
            raise ContractError("uniform_mix must lie in [0, 1]")
        self.capacity = capacity
        self.horizon = horizon
        self.strategy = strategy
        self.per_config = per_config
        self.uniform_mix = uniform_mix
        self._slots: list = [None] * capacity
        self._next = 0
        self._size = 0
        self.density_dirty = False
        self.has_density_model = False
        self._probs: Optional[np.ndarray] = None
        self.tree = SumTree(capacity * horizon) if strategy == "per" else None
        self.counters = {"refreshes": 0, "priority_writes": 0, "density_seconds": 0.0, "priority_seconds": 0.0}

    def __len__(self) -> int:
        return self._size

    def _order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self._size < self.capacity:
            return np.arange(self._size)
        return (np.arange(self.capacity) + self._next) % self.capacity

    @property
    def trajectories(self) -> list:
        return [self._slots[i] for i in self._order()]

    def __getitem__(self, slot: int) -> Trajectory:
        return self._slots[slot]

    # -- writes -------------------------------------------------------------
    def store(self, trajectory: Trajectory, model: Optional[MixtureModel] = None) -> int:
        """Insert a trajectory, evicting the oldest when full. Returns its slot."""
        if trajectory.horizon != self.horizon:
            raise ContractError(f"trajectory horizon {trajectory.horizon} != buffer horizon {self.horizon}")
        t0 = time.perf_counter()
        if model is not None:
            trajectory.log_density = float(floored_log_density(model, trajectory.achieved_goal_feature))
        else:
            trajectory.log_density = 0.0
        trajectory.raw_density = float(np.exp(trajectory.log_density))
        slot = self._next
        self._slots[slot] = trajectory
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.density_dirty = True

        if self.strategy == "cdp" and self.has_density_model:
            if model is None:
                self._probs = None
            else:
                self._recompute_priorities()
        if model is not None:
            self.counters["density_seconds"] += time.perf_counter() - t0
        if self.tree is not None:
            t0 = time.perf_counter()
            leaf = slot * self.horizon + np.arange(self.horizon)
            self.tree.update(leaf, self.tree.max_priority or 1.0)
            self.counters["priority_writes"] += self.horizon
            self.counters["priority_seconds"] += time.perf_counter() - t0
        return slot

    def _recompute_priorities(self) -> None:
        order = self._order()
        trajs = [self._slots[i] for i in order]
        logs = np.array([t.log_density for t in trajs])
        normalized = normalize_densities(logs)
        # ranking on the normalized log density is the same ordering as ranking on
        # 1 - normalized, without the cancellation for tiny densities
        rank_key = -(logs - logsumexp(logs))
        probs = rank_probabilities(rank_key)
        for traj, nd, p in zip(trajs, normalized, probs):
            traj.normalized_density = float(nd)
            traj.complement = float(1.0 - nd)
            traj.priority = float(p)
        full = np.zeros(self.capacity)
        full[order] = probs
        self._probs = full

    def refresh_densities(self, model: MixtureModel) -> None:
        """Recompute every density under ``model`` and rebuild the rank priorities."""
        if self._size == 0:
            raise ContractError("cannot refresh an empty buffer")
        if model is None:
            raise NotFittedError("refresh requires a fitted model")
        t0 = time.perf_counter()
        order = self._order()
        feats = np.stack([self._slots[i].achieved_goal_feature for i in order])
        logs = np.atleast_1d(floored_log_density(model, feats))
        for i, lg in zip(order, logs):
            self._slots[i].log_density = float(lg)
            self._slots[i].raw_density = float(np.exp(lg))
        self.has_density_model = True
        self._recompute_priorities()
        self.density_dirty = False
        self.counters["refreshes"] += 1
        self.counters["density_seconds"] += time.perf_counter() - t0

    def features(self) -> np.ndarray:
        return np.stack([t.achieved_goal_feature for t in self.trajectories])

    # -- sampling -----------------------------------------------------------
    def trajectory_probabilities(self) -> np.ndarray:
        """Per-slot sampling distribution for trajectory-level strategies."""
        if self._size == 0:
            raise ContractError("cannot sample from an empty buffer")
        uniform = np.zeros(self.capacity)
        uniform[: self._size] = 1.0 / self._size
        if self.strategy == "uniform" or not self.has_density_model:
            return uniform
        if self.strategy != "cdp":
            raise ContractError("per samples transitions, not trajectories")
        if self._probs is None:
            raise StaleDensityError("CDP priorities are stale; refresh densities before sampling")
        if self.uniform_mix:
            return (1.0 - self.uniform_mix) * self._probs + self.uniform_mix * uniform
        return self._probs

    def sample(self, count: int, rng: np.random.Generator, beta: Optional[float] = None) -> SampleBatch:
        """Draw ``count`` (slot, timestep) pairs with replacement."""
        if count < 1:
            raise ContractError("count must be positive")
        if self._size == 0:
            raise ContractError("cannot sample from an empty buffer")
        if self.strategy == "per":
            return self._sample_per(count, rng, self.per_config.beta if beta is None else beta)
        probs = self.trajectory_probabilities()
        slots = rng.choice(self.capacity, size=count, p=probs)
        timesteps = rng.integers(0, self.horizon, size=count)
        return SampleBatch(slots, timesteps)

    def _sample_per(self, count, rng, beta) -> SampleBatch:
        t0 = time.perf_counter()
        total = self.tree.total
        u = np.minimum(rng.random(count) * total, np.nextafter(total, 0.0))
        leaves = self.tree.sample(u)
        n_transitions = self._size * self.horizon
        probs = self.tree[leaves] / total
        weights = (n_transitions * probs) ** (-beta)
        weights /= weights.max()
        self.counters["priority_seconds"] += time.perf_counter() - t0
        return SampleBatch(leaves // self.horizon, leaves % self.horizon, weights)

    def sample_trajectories(self, count: int, rng: np.random.Generator) -> list:
        batch = self.sample(count, rng)
        return [self._slots[s] for s in batch.slots]

    def update_priorities(self, slots, timesteps, td_errors) -> None:
        """Write fresh |TD-error| priorities for sampled transitions (PER only)."""
        if self.tree is None:
            return
        t0 = time.perf_counter()
        leaves = np.asarray(slots) * self.horizon + np.asarray(timesteps)
        self.tree.update(leaves, per_priority_from_td(np.asarray(td_errors), self.per_config))
        self.counters["priority_writes"] += len(leaves)
        self.counters["priority_seconds"] += time.perf_counter() - t0

    # -- snapshot -----------------------------------------------------------
    def dump_jsonl(self, path) -> None:
        """One JSON object per trajectory, oldest first."""
        with open(path, "w") as fh:
            for pos, traj in enumerate(self.trajectories):
                fh.write(json.dumps(trajectory_record(traj, pos)) + "\n")


def trajectory_record(traj: Trajectory, position: int) -> dict:
    return {
        "position": position,
        "horizon": traj.horizon,
        "achieved_goal_feature": traj.achieved_goal_feature.tolist(),
        "goal": traj.transitions[0].goal.tolist(),
        "rewards": [tr.reward for tr in traj.transitions],
        "log_density": traj.log_density,
        "raw_density": traj.raw_density,
        "normalized_density": traj.normalized_density,
        "complement": traj.complement,
        "priority": traj.priority,
        "episode_td_error": traj.episode_td_error,
    }


def load_jsonl(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
