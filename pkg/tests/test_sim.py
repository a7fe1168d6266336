import numpy as np
import pytest

from fleetrl.actions import ActionCommand
from fleetrl.sim import (
    DONE_PROGRESS,
    RobotProfile,
    TaskId,
    TaskSpec,
    World,
    default_task_spec,
    fleet_profiles,
    observe,
    oracle_progress,
    render_raster,
    reset,
    run_expert_episode,
    scripted_expert,
    step,
)

ALL_TASKS = list(TaskId)


@pytest.fixture(params=ALL_TASKS, ids=[t.value for t in ALL_TASKS])
def spec(request):
    return default_task_spec(request.param)


class TestReset:
    def test_deterministic(self, spec):
        s1, o1 = reset(spec, seed=42)
        s2, o2 = reset(spec, seed=42)
        assert np.array_equal(o1.features, o2.features)
        assert np.array_equal(o1.raster, o2.raster)

    def test_seed_varies_spawn(self, spec):
        spawns = set()
        for seed in range(10):
            s, _ = reset(spec, seed=seed)
            from fleetrl.sim import MOVABLE

            spawns.add(tuple(s.object_poses[MOVABLE[spec.task_id]][:2]))
        # rice always spawns in the jar; other tasks vary
        if spec.task_id is not TaskId.SCOOP_TRANSFER:
            assert len(spawns) > 1

    def test_override_state_restores(self, spec):
        s, _ = reset(spec, seed=7)
        p0 = oracle_progress(s, spec)
        s2, _ = reset(spec, override_state=s)
        assert oracle_progress(s2, spec) == p0

    def test_override_state_validated(self, spec):
        s, _ = reset(spec, seed=7)
        s.eef[0] = 500.0
        with pytest.raises(ValueError):
            reset(spec, override_state=s)

    def test_seed_required(self, spec):
        with pytest.raises(ValueError):
            reset(spec)


class TestStep:
    def test_zero_action_only_advances_time(self, spec):
        s, _ = reset(spec, seed=3)
        s2, _, _ = step(s, ActionCommand(), spec)
        assert np.array_equal(s2.eef, s.eef)
        assert s2.timestamp_ms == s.timestamp_ms + 200

    def test_out_of_bounds_clamped(self, spec):
        s, _ = reset(spec, seed=3)
        for _ in range(5):
            s, _, _ = step(s, ActionCommand(dx=100, dy=100, dz=100), spec)
        assert np.all(s.eef[:3] <= 100.0)

    def test_determinism_bit_exact(self, spec):
        rng = np.random.default_rng(0)
        acts = [
            ActionCommand(
                int(rng.integers(-30, 31)),
                int(rng.integers(-30, 31)),
                int(rng.integers(-30, 31)),
                0,
                0,
                0,
                int(rng.integers(0, 2)),
            )
            for _ in range(20)
        ]
        outs = []
        for _ in range(2):
            s, _ = reset(spec, seed=11)
            feats = []
            for a in acts:
                s, obs, _ = step(s, a, spec)
                feats.append(obs.features)
            outs.append(np.concatenate(feats))
        assert np.array_equal(outs[0], outs[1])


class TestOracleProgress:
    def test_initial_progress_low(self, spec):
        s, _ = reset(spec, seed=5)
        assert 0.0 <= oracle_progress(s, spec) < 0.5

    def test_expert_monotone_and_completes(self, spec):
        for seed in range(5):
            traj, _, success = run_expert_episode(spec, seed)
            assert success
            progresses = [f.truth_progress for f in traj.frames]
            assert all(b >= a - 1e-12 for a, b in zip(progresses, progresses[1:]))
            assert progresses[-1] >= DONE_PROGRESS
            assert progresses[0] < 0.5

    def test_invariant_to_rng_state(self, spec):
        s, _ = reset(spec, seed=5)
        p0 = oracle_progress(s, spec)
        s.rng_state = np.random.default_rng(999).bit_generator.state
        assert oracle_progress(s, spec) == p0

    def test_grasp_advances_phase_pick_place(self):
        spec = default_task_spec(TaskId.PICK_PLACE)
        s, _ = reset(spec, seed=1)
        assert s.task_phase == "approach"
        for _ in range(50):
            if s.task_phase == "transport":
                break
            s, _, _ = step(s, scripted_expert(spec, s), spec)
        assert s.task_phase == "transport"
        assert not s.gripper_open


class TestExpert:
    def test_succeeds_on_100_seeds(self, spec):
        wins = 0
        lengths = []
        for seed in range(100):
            traj, _, success = run_expert_episode(spec, seed)
            wins += success
            lengths.append(len(traj) - 1)
        assert wins == 100
        assert max(lengths) <= 200

    def test_raster_pure_function_of_state(self, spec):
        s, _ = reset(spec, seed=9)
        r1 = render_raster(s, spec)
        r2 = render_raster(s.copy(), spec)
        assert np.array_equal(r1, r2)


class TestHeterogeneity:
    def test_profiles_seed_derived(self):
        a = fleet_profiles(4, seed=1)
        b = fleet_profiles(4, seed=1)
        assert a == b
        assert len({p.background_seed for p in a}) == 4

    def test_background_differs_across_robots(self):
        spec = default_task_spec(TaskId.PICK_PLACE)
        profiles = fleet_profiles(2, seed=3)
        s, _ = reset(spec, seed=0, robot=profiles[0])
        r0 = render_raster(s, spec, profiles[0])
        r1 = render_raster(s, spec, profiles[1])
        assert not np.array_equal(r0, r1)

    def test_feature_noise_applied(self):
        spec = default_task_spec(TaskId.PICK_PLACE)
        noisy = RobotProfile("r", 0, feature_noise_scale=0.05)
        clean = RobotProfile("r", 0, feature_noise_scale=0.0)
        s, _ = reset(spec, seed=0, robot=noisy)
        o_noisy = observe(s, spec, noisy)
        o_clean = observe(s, spec, clean)
        assert not np.array_equal(o_noisy.features, o_clean.features)


def test_variant_target_changes_goal():
    plate = default_task_spec(TaskId.PICK_PLACE, target="plate")
    tray = default_task_spec(TaskId.PICK_PLACE, target="tray")
    t1, _, ok1 = run_expert_episode(plate, 0)
    t2, _, ok2 = run_expert_episode(tray, 0)
    assert ok1 and ok2
    assert t1.task_text != t2.task_text
