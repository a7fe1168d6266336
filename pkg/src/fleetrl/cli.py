"""Command-line entry points tying the modules into reproducible experiments."""

from __future__ import annotations

import asyncio
import csv
import json
from pathlib import Path

import click

from .config import RunConfig, apply_overrides, load_config, run_eval_critic, run_train
from .sim import TaskId, default_task_spec


def _base_config(config_path, **flags) -> RunConfig:
    cfg = load_config(config_path) if config_path else RunConfig()
    return apply_overrides(cfg, flags)


@click.group()
def main():
    """Desk-scale fleet RL: training, critic evaluation, dispatch, serving."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--task", default=None)
@click.option("--seeds", default=None, help="comma-separated run seeds")
@click.option("--hil-mode", "hil_mode", default=None)
@click.option("--robots", "n_robots", type=int, default=None)
@click.option("--episodes", "total_episodes", type=int, default=None)
@click.option("--critic", default=None)
@click.option("--critic-model", "critic_model", default=None)
@click.option("--out-dir", "out_dir", default=None)
def train(config_path, seeds, **flags):
    """BC warm start, RL loop, periodic evaluation; writes a run directory."""
    if seeds is not None:
        flags["seeds"] = tuple(int(s) for s in seeds.split(","))
    cfg = _base_config(config_path, **flags)
    run_dir = run_train(cfg)
    click.echo(f"run directory: {run_dir}")
    for line in (run_dir / "log.ndjson").read_text().splitlines():
        row = json.loads(line)
        if "final_success" in row:
            click.echo(
                f"seed {row['seed']}: episodes_to_threshold={row['episodes_to_threshold']}"
                f" final_success={row['final_success']:.2f}"
            )


@main.command("eval-critic")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--critic", default=None)
@click.option("--critic-model", "critic_model", default=None)
@click.option("--episodes", type=int, default=5, help="expert episodes per task")
def eval_critic(config_path, episodes, **flags):
    """Per-task VOC/VROC/VOC-F1/NR table for the configured critic backend."""
    cfg = _base_config(config_path, **flags)
    rows = run_eval_critic(cfg, episodes_per_task=episodes)
    click.echo(f"{'task':<16}{'backend':<10}{'VOC':>8}{'VROC':>8}{'VOC-F1':>8}{'NR':>8}")
    for r in rows:
        f1 = "-" if r["voc_f1"] is None else f"{r['voc_f1']:.3f}"
        click.echo(
            f"{r['task']:<16}{r['backend']:<10}{r['voc']:>8.3f}{r['vroc']:>8.3f}{f1:>8}{r['nr']:>8.3f}"
        )


@main.command("eval-metrics")
@click.option("--trajectories", "traj_path", type=click.Path(exists=True), required=True)
def eval_metrics(traj_path):
    """VOC/VROC/VOC-F1/NR of stored trajectories under the oracle critic."""
    from .critic import OracleCritic, evaluate_trajectories
    from .trajectory import load_trajectories

    trajs = load_trajectories(traj_path)
    rep = evaluate_trajectories(OracleCritic(), trajs)
    f1 = "-" if rep.voc_f1 is None else f"{rep.voc_f1:.4f}"
    click.echo(
        f"n={len(trajs)} VOC={rep.voc:.4f} VROC={rep.vroc:.4f} VOC-F1={f1} NR={rep.nr:.4f}"
    )


@main.command("build-pairs")
@click.option("--task", default="pick_place")
@click.option("--episodes", type=int, default=20)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", type=click.Path(), required=True)
def build_pairs(task, episodes, seed, out_path):
    """Sample pairwise-progress training data from scripted-expert episodes."""
    from .pairs import SamplerConfig, build_dataset, save_dataset
    from .sim import run_expert_episode

    spec = default_task_spec(TaskId(task))
    trajs = [run_expert_episode(spec, seed=seed + k, hold_steps=3)[0] for k in range(episodes)]
    pairs, completions = build_dataset(trajs, SamplerConfig(seed=seed))
    save_dataset(pairs, completions, out_path)
    click.echo(f"wrote {len(pairs)} pair samples, {len(completions)} completion samples to {out_path}")


@main.command()
@click.option("--robots", default="2,4,8", help="comma-separated fleet sizes")
@click.option("--task", default="pick_place")
@click.option("--seeds", type=int, default=3, help="number of seeds per fleet size")
@click.option("--episodes", type=int, default=320)
@click.option("--report", "report_path", type=click.Path(), required=True)
def scaling(robots, task, seeds, episodes, report_path):
    """Fleet-size sweep: episodes per robot to the 80% success threshold."""
    from .train import run_scaling_experiment

    rows = run_scaling_experiment(
        robot_counts=tuple(int(n) for n in robots.split(",")),
        seeds=tuple(range(seeds)),
        task=TaskId(task),
        total_episodes=episodes,
    )
    with open(report_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_robots", "seed", "episodes_to_threshold", "episodes_per_robot", "final_success"])
        for r in rows:
            w.writerow([r["n_robots"], r["seed"], r["episodes_to_threshold"],
                        r["episodes_per_robot"], r["final_success"]])
    click.echo(f"wrote {len(rows)} rows to {report_path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--task", default=None)
@click.option("--host", "serve_host", default=None)
@click.option("--port", "serve_port", type=int, default=None)
@click.option("--robots", "n_robots", type=int, default=None)
def serve(config_path, **flags):
    """Host the HIL service and simulated fleet on the Envelope protocol."""
    from .serve import ServeApp, start_server

    cfg = _base_config(config_path, **flags)
    spec = default_task_spec(TaskId(cfg.task))

    async def _run():
        app = ServeApp(spec, n_robots=cfg.n_robots)
        server = await start_server(app, cfg.serve_host, cfg.serve_port)
        # announce only once the socket is bound, so wrappers can gate on it
        click.echo(f"serving {cfg.task} fleet of {cfg.n_robots} on {cfg.serve_host}:{cfg.serve_port}")
        async with server:
            await server.serve_forever()

    asyncio.run(_run())


if __name__ == "__main__":
    main()
