"""Goal-conditioned MDP value types shared by every other module."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation's input violates its contract."""


@dataclass(frozen=True)
class GoalSpace:
    dim: int
    tolerance: float

    def __post_init__(self):
        if self.dim < 1:
            raise ContractError(f"goal dim must be >= 1, got {self.dim}")
        if self.tolerance < 0:
            raise ContractError(f"tolerance must be >= 0, got {self.tolerance}")


def goal_distance(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def sparse_reward(achieved_goal, desired_goal, space: GoalSpace) -> float:
    """0.0 when the achieved goal lies inside the tolerance ball, else -1.0."""
    achieved = np.asarray(achieved_goal, dtype=float)
    desired = np.asarray(desired_goal, dtype=float)
    if achieved.shape != (space.dim,) or desired.shape != (space.dim,):
        raise ContractError(
            f"goal vectors must have shape ({space.dim},), got {achieved.shape} and {desired.shape}"
        )
    return 0.0 if goal_distance(achieved, desired) <= space.tolerance else -1.0


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    goal: np.ndarray
    achieved_goal: np.ndarray
    done: bool = False
    relabeled: bool = False

    def with_goal(self, goal, space: GoalSpace) -> "Transition":
        goal = np.asarray(goal, dtype=float)
        return replace(
            self,
            goal=goal,
            reward=sparse_reward(self.achieved_goal, goal, space),
            relabeled=True,
        )


def extract_achieved_feature(transitions: Sequence[Transition], initial_achieved_goal=None) -> np.ndarray:
    """Concatenate s_0 || s_1 || ... || s_T over achieved-goal states.

    Transitions only carry the achieved goal after each action, so the goal
    before the first action (s_0) is passed separately.
    """
    if len(transitions) == 0:
        raise ContractError("empty trajectory")
    dims = {np.asarray(tr.achieved_goal).shape for tr in transitions}
    if len(dims) != 1:
        raise ContractError(f"ragged achieved goals: {sorted(dims)}")
    (shape,) = dims
    if initial_achieved_goal is None:
        raise ContractError("initial achieved goal is required")
    initial = np.asarray(initial_achieved_goal, dtype=float)
    if initial.shape != shape:
        raise ContractError(f"initial achieved goal has shape {initial.shape}, expected {shape}")
    parts = [initial] + [np.asarray(tr.achieved_goal, dtype=float) for tr in transitions]
    return np.concatenate(parts)


@dataclass
class Trajectory:
    """A fixed-horizon episode plus its density bookkeeping.

    Density fields are mutable because the replay buffer refreshes them once per
    epoch; the transitions themselves are never modified.
    """

    transitions: tuple
    initial_achieved_goal: np.ndarray
    achieved_goal_feature: np.ndarray = field(init=False)
    log_density: float = 0.0
    raw_density: float = 1.0
    normalized_density: float = 1.0
    complement: float = 0.0
    priority: float = 0.0
    episode_td_error: float = 0.0

    def __post_init__(self):
        self.transitions = tuple(self.transitions)
        self.initial_achieved_goal = np.asarray(self.initial_achieved_goal, dtype=float)
        self.achieved_goal_feature = extract_achieved_feature(self.transitions, self.initial_achieved_goal)

    @property
    def horizon(self) -> int:
        return len(self.transitions)

    @property
    def goal_dim(self) -> int:
        return self.initial_achieved_goal.shape[0]

    def achieved_goal_at(self, state_index: int) -> np.ndarray:
        """Achieved goal of state s_j, j in 0..T."""
        if state_index == 0:
            return self.initial_achieved_goal
        return self.transitions[state_index - 1].achieved_goal


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
    total = 0.0
    discount = 1.0
    for r in rewards:
        total += discount * r
        discount *= gamma
    return total


@dataclass(frozen=True)
class DiscountedReturn:
    gamma: float
    value: float

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in [0, 1], got {self.gamma}")

    @classmethod
    def of(cls, rewards: Sequence[float], gamma: float) -> "DiscountedReturn":
        return cls(gamma, discounted_return(rewards, gamma))


def make_trajectory(
    states: Sequence,
    actions: Sequence,
    goal,
    space: GoalSpace,
    goal_slice: slice,
    rewards: Optional[Sequence[float]] = None,
) -> Trajectory:
    """Build a Trajectory from T+1 states and T actions under a fixed goal."""
    states = [np.asarray(s, dtype=float) for s in states]
    if len(states) != len(actions) + 1:
        raise ContractError("need exactly one more state than actions")
    goal = np.asarray(goal, dtype=float)
    transitions = []
    T = len(actions)
    for t in range(T):
        ag = states[t + 1][goal_slice]
        r = sparse_reward(ag, goal, space) if rewards is None else float(rewards[t])
        transitions.append(
            Transition(
                state=states[t],
                action=np.asarray(actions[t], dtype=float),
                reward=r,
                next_state=states[t + 1],
                goal=goal,
                achieved_goal=ag,
                done=(t == T - 1),
            )
        )
    return Trajectory(transitions, states[0][goal_slice])
