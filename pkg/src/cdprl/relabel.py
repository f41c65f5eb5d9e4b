"""Hindsight goal relabeling with the "future" strategy."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .core import ContractError, GoalSpace, Trajectory, Transition
from .replay import ReplayBuffer


class NoFutureGoalError(ContractError):
    """The transition is the last one that can see a later achieved goal."""


@dataclass(frozen=True)
class HERConfig:
    replay_k: int = 4
    strategy: str = "future"
    store_relabeled: bool = False

    def __post_init__(self):
        if self.replay_k < 0:
            raise ContractError("replay_k must be >= 0")
        if self.strategy != "future":
            raise ContractError("only the 'future' strategy is supported")

    @property
    def relabel_probability(self) -> float:
        return self.replay_k / (self.replay_k + 1.0)


def future_state_index(t: int, horizon: int, rng: np.random.Generator) -> int:
    """Uniform state index in {t+1, ..., T-1}."""
    if t < 0 or t >= horizon - 1:
        raise NoFutureGoalError(f"transition {t} of {horizon} has no strictly later state to relabel with")
    return int(rng.integers(t + 1, horizon))


def relabel_transition(trajectory: Trajectory, t: int, rng: np.random.Generator, space: GoalSpace) -> Transition:
    """Copy of transition ``t`` whose goal is the achieved goal of a later state.

    States are indexed s_0..s_T; transition t moves s_t to s_{t+1}. The virtual
    goal is the achieved goal of s_j for j drawn uniformly from {t+1, ..., T-1},
    so transition t's own achieved goal (s_{t+1}) is a valid choice.
    """
    j = future_state_index(t, trajectory.horizon, rng)
    return trajectory.transitions[t].with_goal(trajectory.achieved_goal_at(j), space)


@dataclass
class Batch:
    """Stacked arrays for one optimizer step, plus where each row came from."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    goals: np.ndarray
    achieved_goals: np.ndarray
    relabeled: np.ndarray
    slots: np.ndarray
    timesteps: np.ndarray
    weights: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.states.shape[0]

    def transitions(self) -> List[Transition]:
        return [
            Transition(
                state=self.states[i],
                action=self.actions[i],
                reward=float(self.rewards[i]),
                next_state=self.next_states[i],
                goal=self.goals[i],
                achieved_goal=self.achieved_goals[i],
                relabeled=bool(self.relabeled[i]),
            )
            for i in range(len(self))
        ]


def make_batch(
    buffer: ReplayBuffer,
    batch_size: int,
    her: HERConfig,
    rng: np.random.Generator,
    space: GoalSpace,
    beta: Optional[float] = None,
) -> Batch:
    """Draw trajectories per the buffer strategy, a timestep each, then relabel.

    A row is relabeled with probability replay_k/(replay_k+1). Relabeling needs
    a strictly later state, so the last transition of an episode can never be
    relabeled; to keep the relabel fraction at replay_k/(replay_k+1), a row
    chosen for relabeling whose timestep is the last one is redrawn from the
    relabelable timesteps of the same trajectory. PER draws its own timesteps
    and keeps them, so rows landing on the last step stay original.
    """
    sample = buffer.sample(batch_size, rng, beta=beta)
    T = buffer.horizon
    timesteps = sample.timesteps.copy()
    relabel = rng.random(batch_size) < her.relabel_probability if T > 1 else np.zeros(batch_size, bool)
    if buffer.strategy != "per":
        last = relabel & (timesteps == T - 1)
        timesteps[last] = rng.integers(0, T - 1, size=int(last.sum()))
    relabel &= timesteps < T - 1

    rows = []
    for slot, t, rel in zip(sample.slots, timesteps, relabel):
        traj = buffer[slot]
        tr = relabel_transition(traj, int(t), rng, space) if rel else traj.transitions[t]
        rows.append(tr)
    return Batch(
        states=np.stack([r.state for r in rows]),
        actions=np.stack([r.action for r in rows]),
        rewards=np.array([r.reward for r in rows]),
        next_states=np.stack([r.next_state for r in rows]),
        goals=np.stack([r.goal for r in rows]),
        achieved_goals=np.stack([r.achieved_goal for r in rows]),
        relabeled=np.array([r.relabeled for r in rows]),
        slots=np.asarray(sample.slots),
        timesteps=timesteps,
        weights=sample.weights,
    )
