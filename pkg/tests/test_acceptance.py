"""Acceptance gate: every release-blocking property at full scale.

Each class is one criterion with its tolerances and runtime budget pinned.
The heavy training criteria (RL improvement, HIL efficiency, scaling) reuse
the frozen recipe defaults in fleetrl.train; expected outcomes were measured
once and are asserted as inequalities, not reproduced point values.

Run order matters for wall time only; every test is independent and
deterministic (single-threaded torch, seeded RNG everywhere).
"""

import dataclasses
import math
import time

import numpy as np
import pytest
import torch

from fleetrl.balancer import compose_minibatch, realized_composition
from fleetrl.critic import (
    CriticFitConfig,
    CriticQuery,
    OracleCritic,
    evaluate_trajectories,
    evaluate_trajectory,
    fit_learned_critic,
    reference_summary,
    trajectory_deltas,
)
from fleetrl.hil import HilService
from fleetrl.metrics import (
    DeltaSeries,
    ValueSeries,
    accumulate_values,
    negative_rate,
    rank_correlation,
    voc,
    voc_f1,
)
from fleetrl.orchestrator import (
    LagSchedule,
    run_wall_clock_load_test,
    simulate_lag_pipeline,
)
from fleetrl.pairs import (
    PairKind,
    SamplerConfig,
    build_dataset,
    build_pair_group,
    completion_bands,
    progress_label,
    raster_diff_fraction,
    sample_pair_indices,
)
from fleetrl.policy import (
    HEAD_SIZES,
    ActionTokens,
    PolicyInput,
    batched_logprobs,
    input_length,
    new_policy,
    sample_action,
)
from fleetrl.ppo import PpoConfig, Transition, compute_gae, ppo_update
from fleetrl.sim import (
    TaskId,
    default_task_spec,
    run_expert_episode,
    run_random_episode,
    variant_task_spec,
)
from fleetrl.train import (
    TrainSettings,
    default_bc_steps,
    run_scaling_experiment,
    train_run,
)
from fleetrl.trajectory import Frame, Trajectory

torch.set_num_threads(1)

ALL_TASKS = list(TaskId)


def _spearman_oracle(x, y):
    def ranks(v):
        out = []
        for i in range(len(v)):
            less = sum(1 for j in range(len(v)) if v[j] < v[i])
            equal = sum(1 for j in range(len(v)) if v[j] == v[i])
            out.append(less + (equal + 1) / 2.0)
        return out

    rx, ry = ranks(list(x)), ranks(list(y))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    dx = math.sqrt(sum((a - mx) ** 2 for a in rx))
    dy = math.sqrt(sum((b - my) ** 2 for b in ry))
    if dx == 0.0 or dy == 0.0:
        return 0.0
    return num / (dx * dy)


class TestMetricsCorrectness:
    """VOC/VROC/VOC-F1/NR against brute force; 1e-9 correlations, exact NR, < 5s."""

    def test_thousand_random_series(self):
        rng = np.random.default_rng(0)
        start = time.monotonic()
        for _ in range(1000):
            T = int(rng.integers(2, 13))
            values = [0.0] + list(rng.uniform(0.0, 1.0, size=T - 1))
            got = rank_correlation(values, range(T))
            want = _spearman_oracle(values, range(T))
            assert got == pytest.approx(want, abs=1e-9)

            deltas = tuple(rng.uniform(-1.0, 1.0, size=T))
            exact_nr = sum(1 for d in deltas if d < 0) / len(deltas)
            assert negative_rate(DeltaSeries(deltas)) == exact_nr

            acc = accumulate_values(DeltaSeries(deltas))
            assert all(0.0 <= v <= 1.0 for v in acc.values)
        assert time.monotonic() - start < 5.0

    def test_worked_spearman_example(self):
        assert voc(ValueSeries((0.0, 0.5, 0.25, 0.75))) == pytest.approx(0.8, abs=1e-12)

    def test_worked_voc_f1_example(self):
        assert voc_f1(0.83, 0.95) == pytest.approx(0.886, abs=5e-4)


def _label_traj(T, task, source, seed=0):
    rng = np.random.default_rng(seed)
    frames = []
    for i in range(T):
        raster = np.zeros((8, 8))
        raster[:, i % 8] = np.round(rng.uniform(0.5, 1.0) * 255) / 255
        frames.append(Frame(features=np.array([float(i)]), raster=raster, timestamp_ms=100 * i))
    return Trajectory(frames=frames, task_text=task, source_id=source)


class TestLabelAndStrategyProperties:
    """10,000 pair groups: formula, structure, static filter, bands, mismatch rate; < 30s."""

    def test_ten_thousand_groups(self):
        start = time.monotonic()
        rng = np.random.default_rng(1)
        tasks = [f"task number {k}" for k in range(6)]
        corpus = [
            _label_traj(int(rng.integers(8, 16)), tasks[k % 6], f"t{k}", seed=k)
            for k in range(24)
        ]
        groups = 0
        while groups < 10_000:
            traj = corpus[int(rng.integers(len(corpus)))]
            T = len(traj)
            i, dt = sample_pair_indices(T, rng)
            group = build_pair_group(traj, i, dt, sigma=0.01)
            groups += 1
            assert len(group) == 4
            expected = [(i, i + 1), (i + 1, i), (i, i + dt), (i + dt, i)]
            for sample, (a, b) in zip(group, expected):
                assert sample.frame_a is traj.frames[a]
                assert sample.frame_b is traj.frames[b]
                want = progress_label(T, a, b - a)
                if raster_diff_fraction(sample.frame_a.raster, sample.frame_b.raster) < 0.01:
                    want = 0.0  # static-filter override
                assert sample.label == want
        assert time.monotonic() - start < 30.0

    def test_static_filter_override(self):
        # identical rasters on every frame: all four labels forced to zero
        frames = [
            Frame(features=np.array([float(i)]), raster=np.zeros((8, 8)), timestamp_ms=100 * i)
            for i in range(10)
        ]
        traj = Trajectory(frames=frames, task_text="static", source_id="s")
        for sample in build_pair_group(traj, 2, 4, sigma=0.01):
            assert sample.label == 0.0

    def test_completion_bands_respected(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            T = int(rng.integers(8, 40))
            incomplete, complete = completion_bands(T)
            assert all(i < 0.8 * T for i in incomplete)
            assert all(i > 0.95 * T for i in complete)

    def test_mismatch_fraction(self):
        rng = np.random.default_rng(3)
        tasks = [f"task number {k}" for k in range(6)]
        corpus = [
            _label_traj(int(rng.integers(8, 16)), tasks[k % 6], f"t{k}", seed=k)
            for k in range(24)
        ]
        # 10,000 groups of four samples at p = 0.05
        cfg = SamplerConfig(mismatch_p=0.05, groups_per_trajectory=10_000 // 24 + 1, seed=0)
        pairs, _ = build_dataset(corpus, cfg)
        assert len(pairs) >= 40_000
        frac = sum(1 for p in pairs if p.kind is PairKind.MISMATCH) / len(pairs)
        assert abs(frac - 0.05) <= 0.005
        assert all(p.label == 0.0 for p in pairs if p.kind is PairKind.MISMATCH)


class TestOracleCriticFidelity:
    @pytest.mark.parametrize("task", ALL_TASKS, ids=[t.value for t in ALL_TASKS])
    def test_expert_scores_ideal(self, task):
        traj, _, success = run_expert_episode(default_task_spec(task), seed=3, speed=0.4)
        assert success
        rep = evaluate_trajectory(OracleCritic(), traj)
        assert rep.voc == 1.0
        assert rep.vroc == 1.0
        assert rep.nr == 0.0

    def test_injected_regressions_monotone(self):
        traj, _, success = run_expert_episode(default_task_spec(TaskId.PICK_PLACE), seed=0, speed=0.4)
        assert success
        rates = []
        for k in (2, 4, 8):
            frames = list(traj.frames)
            m = len(frames) // 3
            frames[m : m + k + 1] = reversed(frames[m : m + k + 1])
            frames = [
                dataclasses.replace(f, timestamp_ms=200 * i) for i, f in enumerate(frames)
            ]
            mangled = Trajectory(frames, traj.task_text, f"rev{k}")
            rates.append(negative_rate(trajectory_deltas(OracleCritic(), mangled)))
        assert 0.0 < rates[0] < rates[1] < rates[2]


def _random_variant(rng, name):
    while True:
        mx, my = rng.uniform(-85, 85, size=2).round(0)
        sx, sy = rng.uniform(-85, 55, size=2).round(0)
        if abs(mx - (sx + 15)) + abs(my - (sy + 15)) > 80:
            return variant_task_spec(name, mx, my, spawn_box=((sx, sx + 30), (sy, sy + 30)))


@pytest.fixture(scope="module")
def learned_critic_setup():
    """Held-out corpus critic plus an in-context critic with one unseen variant."""
    start = time.monotonic()
    spec = default_task_spec(TaskId.PICK_PLACE)
    trajs = [run_expert_episode(spec, s, speed=0.4, hold_steps=4)[0] for s in range(40)]
    train, held = trajs[:30], trajs[30:]
    pairs, comps = build_dataset(train, SamplerConfig(groups_per_trajectory=12, seed=0))
    plain = fit_learned_critic(pairs, comps, CriticFitConfig(epochs=100, seed=0))

    rng = np.random.default_rng(7)
    ic_trajs, refs = [], {}
    for v in range(48):
        vspec = _random_variant(rng, str(v))
        group = [run_expert_episode(vspec, 10 * v + s, speed=0.4, hold_steps=4)[0] for s in range(2)]
        for k, traj in enumerate(group):
            refs[traj.source_id] = reference_summary(group[(k + 1) % 2])
        ic_trajs.extend(group)
    ic_pairs, ic_comps = build_dataset(ic_trajs, SamplerConfig(groups_per_trajectory=12, seed=0))
    ic_model = fit_learned_critic(
        ic_pairs, ic_comps, CriticFitConfig(epochs=300, hidden=96, in_context=True, seed=0),
        references=refs,
    )
    held_spec = variant_task_spec("Z", 55.0, 55.0, spawn_box=((-85, -55), (-85, -55)))
    held_variant = [run_expert_episode(held_spec, 1000 + s, speed=0.4, hold_steps=4)[0] for s in range(5)]
    held_ref = reference_summary(run_expert_episode(held_spec, 1999, speed=0.4, hold_steps=4)[0])
    return {
        "plain": plain,
        "held": held,
        "ic_model": ic_model,
        "held_variant": held_variant,
        "held_ref": held_ref,
        "elapsed": time.monotonic() - start,
    }


class TestLearnedCritic:
    """Held-out VOC-F1, one-shot vs zero-shot trend, failure ordering; < 10 min."""

    def test_runtime_budget(self, learned_critic_setup):
        assert learned_critic_setup["elapsed"] < 600.0

    def test_held_out_voc_f1(self, learned_critic_setup):
        rep = evaluate_trajectories(learned_critic_setup["plain"], learned_critic_setup["held"])
        assert rep.voc_f1 is not None
        assert rep.voc_f1 >= 0.8

    def test_one_shot_at_least_zero_shot(self, learned_critic_setup):
        model = learned_critic_setup["ic_model"]
        trajs = learned_critic_setup["held_variant"]
        zero = evaluate_trajectories(model, trajs)
        one = evaluate_trajectories(model, trajs, reference=learned_critic_setup["held_ref"])
        zero_f1 = zero.voc_f1 if zero.voc_f1 is not None else -1.0
        assert one.voc_f1 is not None
        assert one.voc_f1 >= zero_f1

    def test_failures_score_below_expert(self, learned_critic_setup):
        spec = default_task_spec(TaskId.PICK_PLACE)
        fails = [run_random_episode(spec, s)[0] for s in range(10)]
        expert = evaluate_trajectories(learned_critic_setup["plain"], learned_critic_setup["held"])
        fail_rep = evaluate_trajectories(learned_critic_setup["plain"], fails)
        fail_f1 = fail_rep.voc_f1 if fail_rep.voc_f1 is not None else -1.0
        assert fail_f1 < expert.voc_f1


class TestGaePpoNumerics:
    FEATURE_LEN = 3

    def _input(self, rng):
        return PolicyInput(
            features=rng.normal(size=self.FEATURE_LEN), task_vector=np.array([1.0, 0.0])
        )

    def _transition(self, rng, reward, value, done=0):
        toks = tuple(int(rng.integers(0, s)) for s in HEAD_SIZES)
        return Transition(
            input=self._input(rng),
            tokens=ActionTokens(toks, (0.0,) * 7, 1),
            logprob_old=-3.0,
            reward=reward,
            done=done,
            value_old=value,
            robot_id="r0",
            policy_version=1,
            obs_timestamp_ms=0,
            act_timestamp_ms=50,
        )

    def test_gae_matches_brute_force(self):
        def oracle(rewards, values, dones, bootstrap, gamma, lam):
            n = len(rewards)
            deltas = [
                rewards[t]
                + gamma * (bootstrap if t == n - 1 else values[t + 1]) * (1 - dones[t])
                - values[t]
                for t in range(n)
            ]
            adv = []
            for t in range(n):
                total, factor = 0.0, 1.0
                for k in range(t, n):
                    total += factor * deltas[k]
                    if dones[k]:
                        break
                    factor *= gamma * lam
                adv.append(total)
            return np.array(adv)

        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(1, 17))
            rewards = rng.normal(size=n)
            values = rng.normal(size=n)
            dones = [0] * n
            if rng.random() < 0.5:
                dones[int(rng.integers(0, n))] = 1
            bootstrap = float(rng.normal())
            gamma = float(rng.uniform(0.5, 1.0))
            lam = float(rng.uniform(0.5, 1.0))
            ep = [self._transition(rng, float(rewards[t]), float(values[t]), dones[t]) for t in range(n)]
            batch = compute_gae(ep, bootstrap, gamma, lam)
            expected = oracle(rewards, values, dones, bootstrap, gamma, lam)
            assert np.allclose(batch.advantages, expected, atol=1e-12)

    def test_nll_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        model = new_policy(input_length(self.FEATURE_LEN, 2), hidden=16, seed=0)
        inp = self._input(rng)
        demos = []
        for _ in range(4):
            toks = tuple(int(rng.integers(0, s)) for s in HEAD_SIZES)
            demos.append((inp, ActionTokens(toks, (0.0,) * 7, 0)))

        def nll(net):
            x = torch.tensor(np.stack([d[0].vector() for d in demos]), dtype=torch.float64)
            lp, _, _ = batched_logprobs(net, x, [d[1].tokens for d in demos])
            return (-lp.mean()).item()

        net = model.clone_net()
        x = torch.tensor(np.stack([d[0].vector() for d in demos]), dtype=torch.float64)
        lp, _, _ = batched_logprobs(net, x, [d[1].tokens for d in demos])
        (-lp.mean()).backward()
        h = 1e-5
        params = dict(net.named_parameters())
        for name in ("trunk.0.weight", "heads.0.weight", "heads.6.bias"):
            p = params[name]
            flat = p.grad.reshape(-1)
            for idx in rng.choice(p.numel(), size=min(3, p.numel()), replace=False):
                with torch.no_grad():
                    orig = p.reshape(-1)[idx].item()
                    p.reshape(-1)[idx] = orig + h
                    up = nll(net)
                    p.reshape(-1)[idx] = orig - h
                    down = nll(net)
                    p.reshape(-1)[idx] = orig
                fd = (up - down) / (2 * h)
                ad = flat[idx].item()
                assert abs(ad - fd) <= 1e-4 * max(1.0, abs(fd))

    def test_pre_update_ratios(self):
        rng = np.random.default_rng(5)
        model = new_policy(input_length(self.FEATURE_LEN, 2), hidden=16, seed=1)
        transitions = []
        for t in range(48):
            inp = self._input(rng)
            _, tokens, value, logprob_sum = sample_action(model, inp, rng_seed=t)
            transitions.append(
                Transition(
                    input=inp,
                    tokens=tokens,
                    logprob_old=logprob_sum,
                    reward=float(rng.normal()),
                    done=0,
                    value_old=value,
                    robot_id="r0",
                    policy_version=model.version,
                    obs_timestamp_ms=200 * t,
                    act_timestamp_ms=200 * t + 50,
                )
            )
        adv = compute_gae(transitions, bootstrap_value=0.0, gamma=0.99, lam=0.95)
        _, stats = ppo_update(model, transitions, adv, PpoConfig(epochs=1))
        assert stats["pre_ratio_max_dev"] <= 1e-6
        assert stats["pre_clip_fraction"] == 0.0


@pytest.fixture(scope="module")
def rl_improvement_runs():
    start = time.monotonic()
    results = {}
    for seed in (0, 1, 2):
        results[seed] = train_run(
            TrainSettings(task=TaskId.PICK_PLACE, seed=seed, stop_at_threshold=True)
        )
    return results, time.monotonic() - start


class TestRlImprovement:
    """pick_place: warm start <= 40%, >= 80% within 300 episodes on >= 2/3 seeds; < 20 min."""

    def test_runtime_budget(self, rl_improvement_runs):
        _, elapsed = rl_improvement_runs
        assert elapsed < 1200.0

    def test_warm_start_band(self, rl_improvement_runs):
        results, _ = rl_improvement_runs
        for r in results.values():
            assert r.eval_points[0][1] <= 0.40

    def test_two_of_three_seeds_reach_threshold(self, rl_improvement_runs):
        results, _ = rl_improvement_runs
        reached = [
            r.episodes_to_threshold
            for r in results.values()
            if 0 <= r.episodes_to_threshold <= 300
        ]
        assert len(reached) >= 2


HIL_SEEDS = (0, 1, 2)


def _hil_run(task, seed, mode):
    hil = HilService() if mode != "off" else None
    return train_run(
        TrainSettings(
            task=task,
            seed=seed,
            total_episodes=100,
            eval_episodes=20,
            hil_mode=mode,
            bc_steps=default_bc_steps(task),
        ),
        hil=hil,
    )


@pytest.fixture(scope="module")
def hil_grid():
    out = {}
    for task in ALL_TASKS:
        for mode in ("off", "offline-replay", "guided-explore"):
            for seed in HIL_SEEDS:
                out[(task, mode, seed)] = _hil_run(task, seed, mode)
    return out


class TestHilEfficiency:
    """Offline replay reaches the threshold in <= 0.7x baseline episodes; best
    checkpoints of both HIL modes are at least baseline on every task."""

    def test_replay_sample_efficiency(self, hil_grid):
        # efficiency is measurable only on matched seeds where the baseline
        # has headroom: seeds it never clears, or clears at the very first
        # eval point (the 20-episode granularity floor), cannot show a gain
        batch = TrainSettings(task=TaskId.PICK_PLACE).batch_episodes
        comparable = [
            s
            for s in HIL_SEEDS
            if hil_grid[(TaskId.PICK_PLACE, "off", s)].episodes_to_threshold > batch
        ]
        assert comparable
        base = sum(
            hil_grid[(TaskId.PICK_PLACE, "off", s)].episodes_to_threshold for s in comparable
        )
        replay = [
            hil_grid[(TaskId.PICK_PLACE, "offline-replay", s)].episodes_to_threshold
            for s in comparable
        ]
        assert all(e >= 0 for e in replay)
        assert sum(replay) <= 0.7 * base

    @pytest.mark.parametrize("mode", ["offline-replay", "guided-explore"])
    @pytest.mark.parametrize("task", ALL_TASKS, ids=[t.value for t in ALL_TASKS])
    def test_final_success_at_least_baseline(self, hil_grid, task, mode):
        base = np.mean([hil_grid[(task, "off", s)].best_eval for s in HIL_SEEDS])
        ours = np.mean([hil_grid[(task, mode, s)].best_eval for s in HIL_SEEDS])
        assert ours >= base


class TestMultiRobotScaling:
    def test_median_episodes_per_robot_monotone(self):
        rows = run_scaling_experiment(robot_counts=(2, 4, 8), seeds=(0, 1, 2))
        medians = []
        for n in (2, 4, 8):
            per_robot = [r["episodes_per_robot"] for r in rows if r["n_robots"] == n]
            medians.append(float(np.median(per_robot)))
        assert all(np.isfinite(medians))
        assert medians[0] >= medians[1] >= medians[2]

    def test_minibatch_composition_tracks_weights(self):
        @dataclasses.dataclass
        class Tr:
            robot_id: str

        weights = {"a": 0.55, "b": 0.25, "c": 0.15, "d": 0.05}
        pools = {r: [Tr(r) for _ in range(64)] for r in weights}
        batch = compose_minibatch(weights, pools, batch_size=20_000, rng_seed=0)
        comp = realized_composition(batch)
        for r, w in weights.items():
            assert abs(comp[r] - w) <= 0.03


class TestDispatcherLatency:
    def test_wall_clock_load(self):
        report = run_wall_clock_load_test(
            n_robots=8, n_workers=2, n_observations=10_000, utilization=0.8, seed=0
        )
        assert report["assigned"] == 10_000
        assert report["violations"] == 0
        assert report["p99_ms"] < 100.0

    def test_lag_equal_to_period_zero_idle(self):
        report = simulate_lag_pipeline(LagSchedule(lag_ms=200), steps=200, inference_ms=200)
        assert report["idle_ms"] == 0


class TestDeterminismAndHilSilence:
    SETTINGS = dict(
        task=TaskId.PICK_PLACE,
        seed=0,
        total_episodes=20,
        batch_episodes=10,
        max_steps=40,
        hidden=32,
        noisy_demos=5,
        bc_steps=60,
        value_warmup_steps=20,
        eval_episodes=4,
    )

    @staticmethod
    def _fingerprint(result):
        params = torch.cat([p.flatten() for p in result.model.net.parameters()])
        return (
            tuple(result.episode_log),
            tuple(result.eval_points),
            params.detach().numpy().tobytes(),
        )

    def test_identical_runs_bit_identical(self):
        a = train_run(TrainSettings(**self.SETTINGS))
        b = train_run(TrainSettings(**self.SETTINGS))
        assert self._fingerprint(a) == self._fingerprint(b)

    def test_silent_hil_changes_nothing(self):
        base = train_run(TrainSettings(**self.SETTINGS))
        silent = train_run(TrainSettings(**self.SETTINGS), hil=HilService())
        assert self._fingerprint(base) == self._fingerprint(silent)
