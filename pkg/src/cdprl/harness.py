"""Epoch loop: rollouts, storage, prioritized hindsight replay, density refits, evaluation."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .agent import AgentConfig, DDPGAgent
from .core import Trajectory
from .density import VGMMConfig, fit
from .envs import EnvSpec, rollout
from .metrics import (
    TD_AGGREGATES,
    EvalReport,
    density_td_correlation,
    evaluate_policy,
    read_csv,
    reports_to_csv,
    samples_to_threshold,
)
from .relabel import HERConfig, make_batch, relabel_transition
from .replay import STRATEGIES, PERConfig, ReplayBuffer

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CDPRL_OUTPUT_ROOT"


class ExperimentError(RuntimeError):
    """A module error raised inside the loop, tagged with where it happened."""

    def __init__(self, message, epoch=None, episode=None, step=None):
        super().__init__(f"{message} (epoch={epoch}, episode={episode}, step={step})")
        self.epoch = epoch
        self.episode = episode
        self.step = step


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    agent: AgentConfig = field(default_factory=AgentConfig)
    her: HERConfig = field(default_factory=HERConfig)
    vgmm: VGMMConfig = field(default_factory=VGMMConfig)
    per: PERConfig = field(default_factory=PERConfig)
    strategy: str = "cdp"
    epochs: int = 50
    episodes_per_epoch: int = 16
    eval_episodes: int = 20
    buffer_capacity: int = 1000
    uniform_mix: float = 0.0
    td_aggregate: str = "mean"
    record_timing: bool = True
    seed: int = 0
    output_dir: Optional[str] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.epochs < 1 or self.episodes_per_epoch < 1 or self.eval_episodes < 1:
            raise ValueError("epochs, episodes_per_epoch and eval_episodes must be positive")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be positive")
        if self.td_aggregate not in TD_AGGREGATES:
            raise ValueError(f"td_aggregate must be one of {sorted(TD_AGGREGATES)}")

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["agent"]["hidden_sizes"] = list(self.agent.hidden_sizes)
        return doc

    @classmethod
    def from_dict(cls, doc: dict, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        """Overlay ``doc`` (possibly partial, nested) onto ``base``."""
        base = base or cls()
        sections = {"env": EnvSpec, "agent": AgentConfig, "her": HERConfig, "vgmm": VGMMConfig, "per": PERConfig}
        kwargs = {}
        for key, value in doc.items():
            if key in sections:
                unknown = set(value) - {f.name for f in dataclasses.fields(sections[key])}
                if unknown:
                    raise ValueError(f"unknown {key} keys: {sorted(unknown)}")
                kwargs[key] = dataclasses.replace(getattr(base, key), **value)
            elif key in {f.name for f in dataclasses.fields(cls)}:
                kwargs[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return dataclasses.replace(base, **kwargs)

    def digest(self) -> str:
        doc = self.to_dict()
        doc.pop("output_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def hindsight_copy(traj: Trajectory, rng, space) -> Trajectory:
    """The episode with every relabelable transition given a future achieved goal."""
    T = traj.horizon
    trs = [relabel_transition(traj, t, rng, space) if t < T - 1 else traj.transitions[t] for t in range(T)]
    return Trajectory(trs, traj.initial_achieved_goal)


class Experiment:
    """One (config, seed) run. Counters record how often each stage ran."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(5)
        self.rollout_rng = np.random.default_rng(seeds[0])
        self.batch_rng = np.random.default_rng(seeds[1])
        self.eval_rng = np.random.default_rng(seeds[2])
        agent_seed = int(seeds[3].generate_state(1)[0])
        self.fit_seed = int(seeds[4].generate_state(1)[0])
        self.env = config.env.make()
        self.space = self.env.goal_space
        self.agent = DDPGAgent(self.env.state_dim, self.env.goal_dim, self.env.action_dim, config.agent, seed=agent_seed)
        self.buffer = ReplayBuffer(
            config.buffer_capacity,
            self.env.horizon,
            strategy=config.strategy,
            per_config=config.per,
            uniform_mix=config.uniform_mix,
        )
        self.model = None
        self.counters = {"fits": 0, "refreshes": 0, "optimizer_steps": 0, "episodes": 0}
        self.reports: list = []

    @property
    def uses_density(self) -> bool:
        return self.config.strategy == "cdp"

    def _explore(self, state, goal):
        return self.agent.act(state, goal, explore=True, rng=self.rollout_rng)

    def run_epoch(self, epoch: int) -> EvalReport:
        cfg = self.config
        acfg = cfg.agent
        buf = self.buffer
        before = dict(buf.counters)
        fit_seconds = 0.0
        total_steps = cfg.epochs * cfg.episodes_per_epoch * acfg.optimizer_steps_per_episode
        for episode in range(cfg.episodes_per_epoch):
            step = None
            try:
                traj = rollout(self.env, self._explore, self.rollout_rng)
                states = np.stack([traj.transitions[0].state] + [t.next_state for t in traj.transitions])
                self.agent.update_normalizers(states, np.stack([t.goal for t in traj.transitions]))
                buf.store(traj, self.model if self.uses_density else None)
                if cfg.her.store_relabeled:
                    buf.store(hindsight_copy(traj, self.rollout_rng, self.space), self.model if self.uses_density else None)
                self.counters["episodes"] += 1
                for step in range(acfg.optimizer_steps_per_episode):
                    progress = self.counters["optimizer_steps"] / max(1, total_steps)
                    batch = make_batch(
                        buf, acfg.batch_size, cfg.her, self.batch_rng, self.space, beta=cfg.per.beta_at(progress)
                    )
                    info = self.agent.train_step(batch)
                    if cfg.strategy == "per":
                        buf.update_priorities(batch.slots, batch.timesteps, info.td_errors)
                    self.counters["optimizer_steps"] += 1
                # one target refresh per episode's block of optimizer steps
                self.agent.polyak_update()
            except Exception as exc:
                raise ExperimentError(f"{type(exc).__name__}: {exc}", epoch, episode, step) from exc

        pearson = None
        if self.uses_density:
            try:
                t0 = time.perf_counter()
                vcfg = dataclasses.replace(cfg.vgmm, seed=(self.fit_seed + epoch) % 2**32)
                self.model = fit(buf.features(), vcfg)
                fit_seconds = time.perf_counter() - t0
                self.counters["fits"] += 1
                buf.refresh_densities(self.model)
                self.counters["refreshes"] += 1
            except Exception as exc:
                raise ExperimentError(f"density refit failed: {type(exc).__name__}: {exc}", epoch) from exc
            pearson = density_td_correlation(self.agent, buf.trajectories, cfg.td_aggregate)

        success = evaluate_policy(self.agent, self.env, cfg.eval_episodes, self.eval_rng)
        overhead = None
        if cfg.record_timing:
            overhead = (
                fit_seconds
                + buf.counters["density_seconds"] - before["density_seconds"]
                + buf.counters["priority_seconds"] - before["priority_seconds"]
            )
        report = EvalReport(
            epoch=epoch,
            mean_success_rate=success,
            cumulative_env_samples=self.counters["episodes"] * self.env.horizon,
            strategy_overhead_seconds=overhead,
            pearson_r=pearson,
            strategy=cfg.strategy,
            seed=cfg.seed,
        )
        self.reports.append(report)
        return report

    def run(self) -> list:
        out = Path(self.config.output_dir) if self.config.output_dir else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            write_manifest(self.config, out / "manifest.json")
        for epoch in range(1, self.config.epochs + 1):
            report = self.run_epoch(epoch)
            log.info(
                "%s seed=%d epoch=%d success=%.3f samples=%d",
                self.config.strategy, self.config.seed, epoch, report.mean_success_rate, report.cumulative_env_samples,
            )
            if out is not None:
                (out / "metrics.csv").write_text(reports_to_csv(self.reports))
        return self.reports


def write_manifest(config: ExperimentConfig, path: Path) -> None:
    doc = {
        "package_version": __version__,
        "config_digest": config.digest(),
        "seed": config.seed,
        "config": config.to_dict(),
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_experiment(config: ExperimentConfig) -> list:
    return Experiment(config).run()


# -- comparison grid ----------------------------------------------------------

SUMMARY_FIELDS = (
    "strategy",
    "runs",
    "failures",
    "final_success_median",
    "final_success_iqr",
    "samples_to_threshold_median",
    "overhead_seconds_median",
)


def _run_cell(config: ExperimentConfig):
    try:
        return config.strategy, config.seed, run_experiment(config), None
    except Exception as exc:  # recorded per cell; the grid continues
        return config.strategy, config.seed, None, f"{type(exc).__name__}: {exc}"


def summarize(runs: dict, threshold: float) -> list:
    """Per-strategy medians over seeds. ``runs`` maps (strategy, seed) -> reports or None."""
    rows = []
    strategies = sorted({s for s, _ in runs}, key=list(STRATEGIES).index)
    for strategy in strategies:
        cells = [r for (s, _), r in sorted(runs.items()) if s == strategy]
        ok = [r for r in cells if r]
        finals = [r[-1].mean_success_rate for r in ok]
        reach = [samples_to_threshold([(x.cumulative_env_samples, x.mean_success_rate) for x in r], threshold) for r in ok]
        overheads = [sum(x.strategy_overhead_seconds or 0.0 for x in r) for r in ok]
        reached = [float(v) if v is not None else float("inf") for v in reach]
        row = {
            "strategy": strategy,
            "runs": len(cells),
            "failures": len(cells) - len(ok),
            "final_success_median": float(np.median(finals)) if ok else None,
            "final_success_iqr": float(np.subtract(*np.percentile(finals, [75, 25]))) if ok else None,
            "samples_to_threshold_median": float(np.median(reached)) if ok else None,
            "overhead_seconds_median": float(np.median(overheads)) if ok else None,
        }
        rows.append(row)
    return rows


def run_comparison(
    base: ExperimentConfig,
    strategies: Sequence[str],
    seeds: Sequence[int],
    output_dir,
    threshold: float = 0.9,
    workers: int = 1,
) -> list:
    """Run the strategy x seed grid; write one run directory per cell plus summary.csv."""
    if not strategies or not seeds:
        raise ValueError("need at least one strategy and one seed")
    root = Path(output_dir)
    root.mkdir(parents=True, exist_ok=True)
    cells = [
        dataclasses.replace(base, strategy=s, seed=int(seed), output_dir=str(root / f"{s}_seed{seed}"))
        for s in strategies
        for seed in seeds
    ]
    runs = {}
    errors = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    for strategy, seed, reports, err in results:
        runs[(strategy, seed)] = reports
        if err:
            errors[f"{strategy}_seed{seed}"] = err
            log.error("cell %s seed %d failed: %s", strategy, seed, err)
    rows = summarize(runs, threshold)
    write_summary(rows, root / "summary.csv")
    if errors:
        (root / "failures.json").write_text(json.dumps(errors, indent=2, sort_keys=True) + "\n")
    return rows


def write_summary(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})


def load_grid(root) -> dict:
    """Read every run directory under ``root`` back into (strategy, seed) -> reports."""
    runs = {}
    for csv_path in sorted(Path(root).glob("*_seed*/metrics.csv")):
        reports = read_csv(csv_path)
        if reports:
            runs[(reports[0].strategy, reports[0].seed)] = reports
    return runs


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")
