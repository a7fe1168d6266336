"""Run configuration and run-directory artifacts.

A RunConfig is a flat, fully-defaulted record loadable from a single YAML
file, with CLI flags layered on top.  Its canonical-JSON hash is stamped
into every checkpoint header and log row so a run directory is
self-describing.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import yaml

from .critic import OracleCritic, evaluate_trajectories, load_model
from .hil import HilService
from .policy import save_policy
from .ppo import PpoConfig
from .sim import TaskId, default_task_spec, run_expert_episode
from .train import HIL_MODES, TrainSettings, default_bc_steps, train_run

CRITIC_BACKENDS = ("oracle", "learned")


@dataclass(frozen=True)
class RunConfig:
    task: str = "pick_place"
    seeds: tuple[int, ...] = (0,)
    critic: str = "oracle"
    critic_model: str = ""  # checkpoint path, required when critic == "learned"
    hil_mode: str = "off"
    n_robots: int = 1
    total_episodes: int = 300
    batch_episodes: int = 20
    max_steps: int = 60
    bc_steps: int = 0  # 0 = per-task default
    lag_ms: int = 50
    eval_episodes: int = 10
    threshold: float = 0.8
    learning_rate: float = 3e-4
    entropy_coef: float = 0.0
    target_kl: float = 0.02
    out_dir: str = "runs"
    serve_host: str = "127.0.0.1"
    serve_port: int = 8765
    workers: int = 2

    def __post_init__(self):
        if self.task not in {t.value for t in TaskId}:
            raise ValueError(f"unknown task {self.task!r}")
        if self.hil_mode not in HIL_MODES:
            raise ValueError(f"hil_mode must be one of {HIL_MODES}")
        if self.critic not in CRITIC_BACKENDS:
            raise ValueError(f"critic must be one of {CRITIC_BACKENDS}")
        if self.critic == "learned" and not self.critic_model:
            raise ValueError("critic 'learned' requires critic_model path")
        if not self.seeds:
            raise ValueError("at least one seed required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def config_hash(self) -> str:
        canon = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    def settings(self, seed: int) -> TrainSettings:
        return TrainSettings(
            task=TaskId(self.task),
            seed=seed,
            total_episodes=self.total_episodes,
            batch_episodes=self.batch_episodes,
            max_steps=self.max_steps,
            bc_steps=self.bc_steps or default_bc_steps(TaskId(self.task)),
            hil_mode=self.hil_mode,
            n_robots=self.n_robots,
            lag_ms=self.lag_ms,
            eval_episodes=self.eval_episodes,
            threshold=self.threshold,
            ppo=PpoConfig(
                learning_rate=self.learning_rate,
                entropy_coef=self.entropy_coef,
                target_kl=self.target_kl,
            ),
        )

    def make_critic(self):
        if self.critic == "learned":
            return load_model(self.critic_model)
        return OracleCritic()


def load_config(path: str | Path) -> RunConfig:
    raw = yaml.safe_load(Path(path).read_text()) or {}
    return apply_overrides(RunConfig(), raw)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(dataclasses.asdict(config), sort_keys=True))


def apply_overrides(config: RunConfig, overrides: Mapping) -> RunConfig:
    """Layer a mapping of canonical keys over a config; unknown keys error."""
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    clean = {k: v for k, v in overrides.items() if v is not None}
    if "seeds" in clean:
        clean["seeds"] = tuple(clean["seeds"])
    return dataclasses.replace(config, **clean)


def run_train(config: RunConfig, run_dir: Optional[str | Path] = None) -> Path:
    """Execute training for every seed and write the run directory.

    Artifacts: config.yaml, success_curve.csv (per-episode outcomes with a
    mode column), eval_points.csv, policy checkpoints, and a newline-JSON
    stats log, all stamped with the config hash.
    """
    chash = config.config_hash()
    if run_dir is None:
        run_dir = Path(config.out_dir) / f"{config.task}-{config.hil_mode}-{chash}"
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.yaml")
    critic = config.make_critic()

    curve_rows = []
    eval_rows = []
    with open(run_dir / "log.ndjson", "w") as log:
        for seed in config.seeds:
            hil = HilService() if config.hil_mode != "off" else None
            result = train_run(config.settings(seed), critic=critic, hil=hil)
            for i, (robot_id, success) in enumerate(result.episode_log):
                curve_rows.append([seed, config.hil_mode, i, robot_id, success])
            for ep, rate in result.eval_points:
                eval_rows.append([seed, config.hil_mode, ep, rate])
            save_policy(
                result.model,
                run_dir / f"policy-seed{seed}.ckpt",
                extra={"config_hash": chash, "seed": seed},
            )
            row = {
                "config_hash": chash,
                "seed": seed,
                "episodes_to_threshold": result.episodes_to_threshold,
                "final_success": result.final_success,
                "best_eval": result.best_eval,
            }
            log.write(json.dumps(row, sort_keys=True) + "\n")
            for stats in result.stats_log:
                log.write(json.dumps({"config_hash": chash, "seed": seed, **stats}) + "\n")

    with open(run_dir / "success_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "mode", "episode", "robot_id", "success"])
        w.writerows(curve_rows)
    with open(run_dir / "eval_points.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "mode", "episode", "greedy_success"])
        w.writerows(eval_rows)
    return run_dir


def run_eval_critic(config: RunConfig, episodes_per_task: int = 5) -> list[dict]:
    """Per-task VOC/VROC/VOC-F1/NR table for the configured critic backend."""
    critic = config.make_critic()
    rows = []
    for task in TaskId:
        spec = default_task_spec(task)
        # no hold frames: idle frames at the goal tie the progress ranks and
        # drag rank correlations below the expert's true monotone profile
        trajs = [run_expert_episode(spec, seed=s)[0] for s in range(episodes_per_task)]
        rep = evaluate_trajectories(critic, trajs)
        rows.append(
            {
                "task": task.value,
                "backend": config.critic,
                "voc": rep.voc,
                "vroc": rep.vroc,
                "voc_f1": rep.voc_f1,
                "nr": rep.nr,
            }
        )
    return rows
