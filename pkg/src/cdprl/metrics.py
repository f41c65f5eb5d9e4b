"""Evaluation, sample-efficiency accounting and the density/TD-error diagnostic."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .core import ContractError, Trajectory
from .envs import Env, rollout

CSV_FIELDS = ("epoch", "cumulative_samples", "mean_success_rate", "strategy", "seed", "overhead_seconds", "pearson_r")


@dataclass
class EvalReport:
    epoch: int
    mean_success_rate: float
    cumulative_env_samples: int
    strategy_overhead_seconds: Optional[float]
    pearson_r: Optional[float] = None
    strategy: str = ""
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mean_success_rate <= 1.0:
            raise ContractError("success rate must lie in [0, 1]")

    def csv_row(self) -> dict:
        return {
            "epoch": self.epoch,
            "cumulative_samples": self.cumulative_env_samples,
            "mean_success_rate": _fmt(self.mean_success_rate),
            "strategy": self.strategy,
            "seed": self.seed,
            "overhead_seconds": _fmt(self.strategy_overhead_seconds),
            "pearson_r": _fmt(self.pearson_r),
        }


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def _parse(value: str) -> Optional[float]:
    return None if value == "" else float(value)


def reports_to_csv(reports: Iterable[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return [
            EvalReport(
                epoch=int(row["epoch"]),
                mean_success_rate=float(row["mean_success_rate"]),
                cumulative_env_samples=int(row["cumulative_samples"]),
                strategy_overhead_seconds=_parse(row["overhead_seconds"]),
                pearson_r=_parse(row["pearson_r"]),
                strategy=row["strategy"],
                seed=int(row["seed"]),
            )
            for row in csv.DictReader(fh)
        ]


def episode_success(trajectory: Trajectory) -> bool:
    return trajectory.transitions[-1].reward == 0.0


def evaluate_policy(policy, env: Env, episodes: int, rng: np.random.Generator) -> float:
    """Fraction of deterministic episodes whose final step is a success.

    ``policy`` is either an agent exposing ``act`` or a callable (state, goal) -> action.
    """
    if episodes < 1:
        raise ContractError("evaluation needs at least one episode")
    if hasattr(policy, "act"):
        agent = policy
        policy = lambda s, g: agent.act(s, g, explore=False)  # noqa: E731
    wins = sum(episode_success(rollout(env, policy, rng)) for _ in range(episodes))
    return wins / episodes


def pearson_r(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Sample correlation coefficient; None when either input is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ContractError("pearson_r needs two equal-length sequences of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def samples_to_threshold(curve: Sequence[Tuple[int, float]], threshold: float) -> Optional[int]:
    """First cumulative sample count whose success rate reaches ``threshold``."""
    if len(curve) == 0:
        raise ContractError("empty learning curve")
    for samples, rate in curve:
        if rate >= threshold:
            return int(samples)
    return None


TD_AGGREGATES = {"mean": np.mean, "max": np.max, "sum": np.sum}


def trajectory_td_error(agent, trajectory: Trajectory, aggregate: str = "mean") -> float:
    """Aggregate |TD-error| of a trajectory's own transitions under the current critic."""
    trs = trajectory.transitions
    td = agent.td_errors(
        np.stack([t.state for t in trs]),
        np.stack([t.action for t in trs]),
        np.array([t.reward for t in trs]),
        np.stack([t.next_state for t in trs]),
        np.stack([t.goal for t in trs]),
    )
    return float(TD_AGGREGATES[aggregate](td))


def density_td_correlation(agent, trajectories: Sequence[Trajectory], aggregate: str = "mean") -> Optional[float]:
    """pearson_r between each trajectory's complementary density and its TD-error statistic."""
    if len(trajectories) < 2:
        return None
    trs = [t for traj in trajectories for t in traj.transitions]
    td = agent.td_errors(
        np.stack([t.state for t in trs]),
        np.stack([t.action for t in trs]),
        np.array([t.reward for t in trs]),
        np.stack([t.next_state for t in trs]),
        np.stack([t.goal for t in trs]),
    ).reshape(len(trajectories), -1)
    for traj, row in zip(trajectories, TD_AGGREGATES[aggregate](td, axis=1)):
        traj.episode_td_error = float(row)
    # 1 - rho_i is a negative affine map of rho_i, so correlating against -rho_i gives
    # the same coefficient without losing tiny normalized densities to cancellation
    return pearson_r([-t.normalized_density for t in trajectories], [t.episode_td_error for t in trajectories])
