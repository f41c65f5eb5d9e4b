"""Small deterministic multi-goal environments with sparse -1/0 rewards.

Both environments are pure: ``step`` maps (state, action, goal) to a result
without hidden state, so a logged action sequence replays bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import ContractError, GoalSpace, Trajectory, make_trajectory, sparse_reward


@dataclass(frozen=True)
class EnvSpec:
    name: str = "bitflip"
    horizon: int = 8
    n_bits: int = 8
    tolerance: Optional[float] = None
    seed: int = 0
    spawn_range: Optional[float] = None

    def __post_init__(self):
        if self.name not in ENVIRONMENTS:
            raise ContractError(f"unknown environment {self.name!r}; choose from {sorted(ENVIRONMENTS)}")
        if self.horizon < 1:
            raise ContractError("horizon must be positive")
        if self.name == "bitflip" and self.n_bits < 1:
            raise ContractError("n_bits must be positive")
        if self.spawn_range is not None and not 0.0 < self.spawn_range <= 0.5:
            raise ContractError("spawn_range must lie in (0, 0.5]")

    def make(self) -> "Env":
        return ENVIRONMENTS[self.name](self)


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    achieved_goal: np.ndarray
    reward: float
    done: bool


class Env:
    state_dim: int
    action_dim: int
    goal_dim: int
    goal_slice: slice

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.horizon = spec.horizon

    @property
    def goal_space(self) -> GoalSpace:
        return GoalSpace(self.goal_dim, self.tolerance)

    def achieved_goal(self, state) -> np.ndarray:
        return np.asarray(state, dtype=float)[self.goal_slice]

    def reset(self, rng: np.random.Generator):
        raise NotImplementedError

    def transition(self, state, action) -> np.ndarray:
        raise NotImplementedError

    def step(self, state, action, goal, t: int = 0) -> StepResult:
        next_state = self.transition(np.asarray(state, dtype=float), np.asarray(action, dtype=float))
        ag = self.achieved_goal(next_state)
        return StepResult(next_state, ag, sparse_reward(ag, goal, self.goal_space), t + 1 >= self.horizon)


class BitFlip(Env):
    """n-bit flipping with an extra no-op action.

    The action vector has n+1 entries; its argmax picks the bit to flip, and the
    last entry means "flip nothing". Without the no-op an odd Hamming distance
    could never be closed after an even number of steps.
    """

    def __init__(self, spec: EnvSpec):
        super().__init__(spec)
        self.n = spec.n_bits
        self.state_dim = self.n
        self.goal_dim = self.n
        self.action_dim = self.n + 1
        self.goal_slice = slice(0, self.n)
        self.tolerance = 0.5 if spec.tolerance is None else spec.tolerance

    def reset(self, rng):
        state = rng.integers(0, 2, size=self.n).astype(float)
        goal = rng.integers(0, 2, size=self.n).astype(float)
        return state, goal

    def transition(self, state, action):
        if action.shape != (self.action_dim,):
            raise ContractError(f"bitflip action must have shape ({self.action_dim},)")
        idx = int(np.argmax(action))
        nxt = state.copy()
        if idx < self.n:
            nxt[idx] = 1.0 - nxt[idx]
        return nxt

    @staticmethod
    def action_for(index: int, n: int) -> np.ndarray:
        a = -np.ones(n + 1)
        a[index] = 1.0
        return a


class PointPush(Env):
    """A point agent pushing a disc-shaped object on a square table.

    State is [agent_x, agent_y, object_x, object_y]; the achieved goal is the
    object position. The agent starts at the origin, the table is the unit
    square centred on it. Object and goal are drawn from the central square
    of half-width ``spawn_range`` (default 0.3, three agent steps), and the
    object always starts at least ``contact`` away from the agent. After the
    agent moves by ``speed * action``, an object closer than ``contact`` is
    pushed out along the contact normal to distance ``contact`` and then
    kept on the table.
    """

    speed = 0.1
    contact = 0.1
    half_width = 0.5

    def __init__(self, spec: EnvSpec):
        super().__init__(spec)
        self.state_dim = 4
        self.goal_dim = 2
        self.action_dim = 2
        self.goal_slice = slice(2, 4)
        self.tolerance = 0.05 if spec.tolerance is None else spec.tolerance
        self.spawn_range = 0.3 if spec.spawn_range is None else spec.spawn_range

    def reset(self, rng):
        h = self.spawn_range
        while True:
            obj = rng.uniform(-h, h, size=2)
            if np.linalg.norm(obj) >= self.contact:
                break
        goal = rng.uniform(-h, h, size=2)
        return np.concatenate([np.zeros(2), obj]), goal

    def transition(self, state, action):
        if action.shape != (2,):
            raise ContractError("pointpush action must have shape (2,)")
        bound = self.half_width + 2 * self.contact
        agent = np.clip(state[:2] + self.speed * np.clip(action, -1.0, 1.0), -bound, bound)
        obj = state[2:4].copy()
        offset = obj - agent
        dist = float(np.hypot(offset[0], offset[1]))
        if dist < self.contact:
            if dist > 0.0:
                normal = offset / dist
            else:
                move = agent - state[:2]
                norm = float(np.hypot(move[0], move[1]))
                normal = move / norm if norm > 0 else np.array([1.0, 0.0])
            obj = np.clip(agent + self.contact * normal, -self.half_width, self.half_width)
        return np.concatenate([agent, obj])


ENVIRONMENTS = {"bitflip": BitFlip, "pointpush": PointPush}


def rollout(env: Env, policy: Callable, rng: np.random.Generator, state=None, goal=None) -> Trajectory:
    """Run exactly ``env.horizon`` steps; ``policy(state, goal)`` returns an action."""
    if state is None or goal is None:
        state, goal = env.reset(rng)
    states = [np.asarray(state, dtype=float)]
    actions = []
    for t in range(env.horizon):
        a = np.asarray(policy(states[-1], goal), dtype=float)
        res = env.step(states[-1], a, goal, t)
        actions.append(a)
        states.append(res.next_state)
    return make_trajectory(states, actions, goal, env.goal_space, env.goal_slice)


def replay_actions(env: Env, state, goal, actions) -> Trajectory:
    it = iter(actions)
    return rollout(env, lambda s, g: next(it), None, state=state, goal=goal)
