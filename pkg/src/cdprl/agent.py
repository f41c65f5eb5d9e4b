"""Goal-conditioned DDPG with hand-written networks and backpropagation."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import ContractError

CHECKPOINT_FORMAT = "cdprl.agent"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.98
    tau: float = 0.05
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    exploration_sigma: float = 0.3
    random_action_prob: float = 0.2
    hidden_sizes: Tuple[int, ...] = (64, 64)
    batch_size: int = 128
    optimizer_steps_per_episode: int = 40
    grad_clip: float = 10.0
    action_l2: float = 1.0
    max_action: float = 1.0
    clip_obs: float = 5.0
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ContractError("tau must lie in (0, 1]")
        if not 0.0 <= self.random_action_prob <= 1.0:
            raise ContractError("random_action_prob must lie in [0, 1]")
        if self.actor_lr < 0 or self.critic_lr < 0 or self.exploration_sigma < 0:
            raise ContractError("learning rates and noise scale must be non-negative")
        if self.batch_size < 1 or self.optimizer_steps_per_episode < 0 or self.grad_clip <= 0:
            raise ContractError("batch_size, optimizer steps and grad_clip must be positive")


ACTIVATIONS = ("tanh", "relu")


class Net:
    """Fully connected network with tanh or relu hidden layers; the output layer is tanh-scaled or linear."""

    def __init__(
        self,
        sizes: Sequence[int],
        output: str,
        rng: np.random.Generator,
        out_scale: float = 1.0,
        hidden: str = "tanh",
    ):
        if output not in ("tanh", "linear"):
            raise ContractError(f"unknown output activation {output!r}")
        if hidden not in ACTIVATIONS:
            raise ContractError(f"unknown hidden activation {hidden!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        self.hidden = hidden
        self.out_scale = out_scale
        self.params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, x):
        """Returns the output and the per-layer activations needed by ``backward``."""
        acts = [x]
        h = x
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            last = i == self.n_layers - 1
            if not last:
                h = np.tanh(z) if self.hidden == "tanh" else np.maximum(z, 0.0)
            elif self.output == "tanh":
                h = self.out_scale * np.tanh(z)
            else:
                h = z
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, d_out, need_params: bool = True):
        """Gradients of sum(d_out * output) w.r.t. parameters and input."""
        grads = [None] * len(self.params) if need_params else None
        delta = d_out
        for i in reversed(range(self.n_layers)):
            h_out = acts[i + 1]
            if i == self.n_layers - 1:
                if self.output == "tanh":
                    t = h_out / self.out_scale
                    delta = delta * self.out_scale * (1.0 - t * t)
            elif self.hidden == "tanh":
                delta = delta * (1.0 - h_out * h_out)
            else:
                delta = delta * (h_out > 0.0)
            if need_params:
                grads[2 * i] = acts[i].T @ delta
                grads[2 * i + 1] = delta.sum(axis=0)
            delta = delta @ self.params[2 * i].T
        return grads, delta

    def copy(self) -> "Net":
        return copy.deepcopy(self)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        pos = 0
        for p in self.params:
            n = p.size
            p[...] = flat[pos : pos + n].reshape(p.shape)
            pos += n

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads, max_norm: float):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return grads, norm


class Normalizer:
    """Running mean/std normalizer with output clipping."""

    def __init__(self, size: int, clip: float = 5.0, eps: float = 1e-2):
        self.size = size
        self.clip = clip
        self.eps = eps
        self.sum = np.zeros(size)
        self.sumsq = np.zeros(size)
        self.count = 0
        self.mean = np.zeros(size)
        self.std = np.ones(size)

    def update(self, x) -> None:
        x = np.asarray(x, dtype=float).reshape(-1, self.size)
        self.sum += x.sum(axis=0)
        self.sumsq += (x * x).sum(axis=0)
        self.count += x.shape[0]
        self.mean = self.sum / self.count
        var = np.maximum(self.eps**2, self.sumsq / self.count - self.mean**2)
        self.std = np.sqrt(var)

    def __call__(self, x):
        return np.clip((x - self.mean) / self.std, -self.clip, self.clip)

    def state(self) -> dict:
        return {"sum": self.sum.tolist(), "sumsq": self.sumsq.tolist(), "count": self.count}

    def load(self, doc: dict) -> None:
        self.sum = np.asarray(doc["sum"], dtype=float)
        self.sumsq = np.asarray(doc["sumsq"], dtype=float)
        self.count = int(doc["count"])
        if self.count:
            self.mean = self.sum / self.count
            self.std = np.sqrt(np.maximum(self.eps**2, self.sumsq / self.count - self.mean**2))


@dataclass
class AgentNets:
    actor: Net
    critic: Net
    target_actor: Net
    target_critic: Net


@dataclass
class UpdateInfo:
    critic_loss: float
    actor_loss: float
    td_errors: np.ndarray = field(repr=False)


class DDPGAgent:
    """Actor pi(s||g) and critic Q(s||g, a) with Polyak-averaged target copies."""

    def __init__(self, state_dim: int, goal_dim: int, action_dim: int, config: AgentConfig = AgentConfig(), seed: int = 0):
        self.state_dim = state_dim
        self.goal_dim = goal_dim
        self.action_dim = action_dim
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        in_dim = state_dim + goal_dim
        actor = Net((in_dim, *config.hidden_sizes, action_dim), "tanh", rng, config.max_action, config.activation)
        critic = Net((in_dim + action_dim, *config.hidden_sizes, 1), "linear", rng, hidden=config.activation)
        self.nets = AgentNets(actor, critic, actor.copy(), critic.copy())
        self.actor_opt = Adam(actor.params, config.actor_lr)
        self.critic_opt = Adam(critic.params, config.critic_lr)
        self.state_norm = Normalizer(state_dim, clip=config.clip_obs)
        self.goal_norm = Normalizer(goal_dim, clip=config.clip_obs)

    # -- inputs ---------------------------------------------------------------
    def policy_input(self, states, goals):
        states = np.asarray(states, dtype=float)
        goals = np.asarray(goals, dtype=float)
        if states.shape[-1] != self.state_dim or goals.shape[-1] != self.goal_dim:
            raise ContractError(
                f"expected state dim {self.state_dim} and goal dim {self.goal_dim}, "
                f"got {states.shape[-1]} and {goals.shape[-1]}"
            )
        return np.concatenate([self.state_norm(states), self.goal_norm(goals)], axis=-1)

    def update_normalizers(self, states, goals) -> None:
        self.state_norm.update(states)
        self.goal_norm.update(goals)

    # -- acting ---------------------------------------------------------------
    def act(self, state, goal, explore: bool = False, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        x = self.policy_input(np.atleast_2d(state), np.atleast_2d(goal))
        action = self.nets.actor(x)[0]
        if not explore:
            return action
        cfg = self.config
        if rng.random() < cfg.random_action_prob:
            return rng.uniform(-cfg.max_action, cfg.max_action, size=self.action_dim)
        noisy = action + cfg.exploration_sigma * cfg.max_action * rng.standard_normal(self.action_dim)
        return np.clip(noisy, -cfg.max_action, cfg.max_action)

    # -- learning -------------------------------------------------------------
    @property
    def return_bounds(self) -> Tuple[float, float]:
        gamma = self.config.gamma
        lower = -np.inf if gamma >= 1.0 else -1.0 / (1.0 - gamma)
        return lower, 0.0

    def td_target(self, batch) -> np.ndarray:
        """r + gamma * Q'(s'||g, pi'(s'||g)), clipped to the feasible return range."""
        x_next = self.policy_input(batch.next_states, batch.goals)
        a_next = self.nets.target_actor(x_next)
        q_next = self.nets.target_critic(np.concatenate([x_next, a_next], axis=1))[:, 0]
        y = np.asarray(batch.rewards, dtype=float) + self.config.gamma * q_next
        return np.clip(y, *self.return_bounds)

    def critic_loss_and_grads(self, batch, targets, weights=None):
        x = self.policy_input(batch.states, batch.goals)
        q, acts = self.nets.critic.forward(np.concatenate([x, batch.actions], axis=1))
        err = q[:, 0] - targets
        w = np.ones_like(err) if weights is None else np.asarray(weights, dtype=float)
        loss = float(np.mean(w * err * err))
        d_q = (2.0 * w * err / err.shape[0])[:, None]
        grads, _ = self.nets.critic.backward(acts, d_q)
        return loss, grads, err

    def actor_loss_and_grads(self, batch):
        cfg = self.config
        x = self.policy_input(batch.states, batch.goals)
        a, actor_acts = self.nets.actor.forward(x)
        q, critic_acts = self.nets.critic.forward(np.concatenate([x, a], axis=1))
        B = x.shape[0]
        scaled = a / cfg.max_action
        loss = float(-np.mean(q) + cfg.action_l2 * np.mean(np.sum(scaled * scaled, axis=1)))
        _, d_in = self.nets.critic.backward(critic_acts, np.full((B, 1), -1.0 / B), need_params=False)
        d_a = d_in[:, x.shape[1]:] + cfg.action_l2 * 2.0 * scaled / (cfg.max_action * B)
        grads, _ = self.nets.actor.backward(actor_acts, d_a)
        return loss, grads

    def critic_update(self, batch, targets, weights=None):
        """One step on the (optionally importance-weighted) mean squared TD-error.

        Returns the pre-step loss and the per-row |TD-error|.
        """
        loss, grads, err = self.critic_loss_and_grads(batch, targets, weights)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite critic loss {loss}")
        grads, _ = clip_by_global_norm(grads, self.config.grad_clip)
        self.critic_opt.step(self.nets.critic.params, grads)
        return loss, np.abs(err)

    def actor_update(self, batch) -> float:
        loss, grads = self.actor_loss_and_grads(batch)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite actor loss {loss}")
        grads, _ = clip_by_global_norm(grads, self.config.grad_clip)
        self.actor_opt.step(self.nets.actor.params, grads)
        return loss

    def train_step(self, batch) -> UpdateInfo:
        targets = self.td_target(batch)
        critic_loss, td = self.critic_update(batch, targets, batch.weights)
        actor_loss = self.actor_update(batch)
        return UpdateInfo(critic_loss, actor_loss, td)

    def polyak_update(self, tau: Optional[float] = None) -> None:
        tau = self.config.tau if tau is None else tau
        if not 0.0 < tau <= 1.0:
            raise ContractError("tau must lie in (0, 1]")
        for src, dst in ((self.nets.actor, self.nets.target_actor), (self.nets.critic, self.nets.target_critic)):
            for p, tp in zip(src.params, dst.params):
                if tau == 1.0:
                    tp[...] = p
                else:
                    tp *= 1.0 - tau
                    tp += tau * p

    def td_errors(self, states, actions, rewards, next_states, goals) -> np.ndarray:
        """|y - Q(s||g, a)| under the current critic, without updating anything."""
        from types import SimpleNamespace

        batch = SimpleNamespace(states=states, actions=actions, rewards=rewards, next_states=next_states, goals=goals)
        y = self.td_target(batch)
        x = self.policy_input(states, goals)
        q = self.nets.critic(np.concatenate([x, actions], axis=1))[:, 0]
        return np.abs(y - q)

    # -- checkpoint -----------------------------------------------------------
    def to_json(self) -> str:
        nets = {
            name: [p.tolist() for p in getattr(self.nets, name).params]
            for name in ("actor", "critic", "target_actor", "target_critic")
        }
        opt = {
            name: {"t": o.t, "m": [x.tolist() for x in o.m], "v": [x.tolist() for x in o.v]}
            for name, o in (("actor", self.actor_opt), ("critic", self.critic_opt))
        }
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dims": [self.state_dim, self.goal_dim, self.action_dim],
            "seed": self.seed,
            "config": asdict(self.config),
            "nets": nets,
            "optimizers": opt,
            "normalizers": {"state": self.state_norm.state(), "goal": self.goal_norm.state()},
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "DDPGAgent":
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError("unsupported agent checkpoint")
        cfg = AgentConfig(**doc["config"])
        agent = cls(*doc["dims"], config=cfg, seed=doc["seed"])
        for name, params in doc["nets"].items():
            net = getattr(agent.nets, name)
            net.params = [np.asarray(p, dtype=float).reshape(q.shape) for p, q in zip(params, net.params)]
        for name, o in (("actor", agent.actor_opt), ("critic", agent.critic_opt)):
            state = doc["optimizers"][name]
            o.t = state["t"]
            o.m = [np.asarray(x, dtype=float).reshape(p.shape) for x, p in zip(state["m"], o.m)]
            o.v = [np.asarray(x, dtype=float).reshape(p.shape) for x, p in zip(state["v"], o.v)]
        agent.state_norm.load(doc["normalizers"]["state"])
        agent.goal_norm.load(doc["normalizers"]["goal"])
        return agent
