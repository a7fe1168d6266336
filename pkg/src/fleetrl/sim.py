"""Deterministic desk-scale manipulation worlds.

Four tasks stand in for the physical fleet: pick-and-place a bowl, sweep
trash into a can, unfold a mat, and scoop-and-transfer rice.  Each task has
an analytic progress oracle (0 at the canonical start, 1 at the goal,
monotone along its scripted expert) and a scripted expert policy.  Physics
is intentionally minimal: kinematic EEF integration, proximity-based
grasping/pushing, and phase machines.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .actions import ActionCommand
from .trajectory import Frame, Trajectory

WORKSPACE_MM = 100.0  # half-extent of the cube around the table origin
RASTER_SIZE = 32
CONTROL_PERIOD_MS = 200  # one simulator step per recorded frame
DONE_PROGRESS = 0.95
DIST_NORM = 250.0  # fixed normalizer for distance-reduction progress terms

EEF_START = np.array([0.0, 0.0, 80.0, 0.0, 0.0, 0.0])

PHASES = ("approach", "engaged", "transport", "done")


class TaskId(Enum):
    PICK_PLACE = "pick_place"
    SWEEP = "sweep"
    UNFOLD = "unfold"
    SCOOP_TRANSFER = "scoop_transfer"


@dataclass(frozen=True)
class TaskSpec:
    task_id: TaskId
    task_text: str
    goal_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.task_text:
            raise ValueError("task_text must be non-empty")


def default_task_spec(task_id: TaskId, target: str = "plate") -> TaskSpec:
    texts = {
        TaskId.PICK_PLACE: f"pick up the bowl and place it on the {target}",
        TaskId.SWEEP: "sweep the trash on the table into the trash can",
        TaskId.UNFOLD: "grab the folded mat, lift it up and release it to unfold",
        TaskId.SCOOP_TRANSFER: "scoop the rice from the jar and pour it into the cooker",
    }
    params = {"target": target} if task_id is TaskId.PICK_PLACE else {}
    return TaskSpec(task_id=task_id, task_text=texts[task_id], goal_params=params)


def variant_task_spec(
    marker: str,
    x: float,
    y: float,
    spawn_box: Optional[tuple[tuple[float, float], tuple[float, float]]] = None,
) -> TaskSpec:
    """Pick-and-place variant whose target is a named marker position.

    The marker is not rendered or present in the observation features, so
    its location is only recoverable from the instruction (for seen tasks)
    or from an in-context reference demonstration.  ``spawn_box`` optionally
    overrides where the bowl spawns, which varies transport direction.
    """
    params: dict = {"target_pos": (x, y)}
    if spawn_box is not None:
        params["spawn_box"] = spawn_box
    return TaskSpec(
        task_id=TaskId.PICK_PLACE,
        task_text=f"pick up the bowl and place it on marker {marker}",
        goal_params=params,
    )


@dataclass(frozen=True)
class RobotProfile:
    """Seed-derived per-robot heterogeneity for multi-robot runs."""

    robot_id: str = "robot-0"
    background_seed: int = 0
    feature_noise_scale: float = 0.0
    latency_jitter_ms: int = 0


def fleet_profiles(n: int, seed: int, heterogeneous: bool = True) -> list[RobotProfile]:
    rng = np.random.default_rng(seed)
    profiles = []
    for k in range(n):
        bg = int(rng.integers(0, 2**31))
        noise = float(rng.uniform(0.0, 0.02)) if (heterogeneous and n > 1) else 0.0
        jitter = int(rng.integers(0, 20)) if (heterogeneous and n > 1) else 0
        profiles.append(RobotProfile(f"robot-{k}", bg, noise, jitter))
    return profiles


@dataclass
class WorldState:
    eef: np.ndarray  # x, y, z (mm), roll, pitch, yaw (degrees)
    gripper_open: bool
    object_poses: dict[str, np.ndarray]  # name -> xyz mm
    task_phase: str
    aux: dict[str, float]
    timestamp_ms: int
    rng_state: dict  # opaque bit-generator state for observation noise

    def copy(self) -> "WorldState":
        return WorldState(
            eef=self.eef.copy(),
            gripper_open=self.gripper_open,
            object_poses={k: v.copy() for k, v in self.object_poses.items()},
            task_phase=self.task_phase,
            aux=dict(self.aux),
            timestamp_ms=self.timestamp_ms,
            rng_state=copy.deepcopy(self.rng_state),
        )


@dataclass(frozen=True)
class SimObservation:
    features: np.ndarray
    raster: np.ndarray
    timestamp_ms: int
    robot_id: str


def _check_state(state: WorldState) -> None:
    pos = state.eef[:3]
    if np.any(np.abs(pos) > WORKSPACE_MM + 1e-9):
        raise ValueError("eef pose outside workspace box")
    for name, p in state.object_poses.items():
        if np.any(np.abs(p[:2]) > WORKSPACE_MM + 1e-9):
            raise ValueError(f"object {name} outside table bounds")
    if state.task_phase not in PHASES:
        raise ValueError(f"unknown task phase {state.task_phase}")


def _hdist(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a[:2] - b[:2]))


def _dist(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a[:3] - b[:3]))


# --- task geometry -----------------------------------------------------------

FIXTURES = {
    TaskId.PICK_PLACE: {"plate": np.array([60.0, 60.0, 0.0]), "tray": np.array([-60.0, 60.0, 0.0])},
    TaskId.SWEEP: {"can": np.array([70.0, -70.0, 0.0])},
    TaskId.UNFOLD: {},
    TaskId.SCOOP_TRANSFER: {"jar": np.array([-60.0, -60.0, 0.0]), "cooker": np.array([60.0, 0.0, 0.0])},
}

MOVABLE = {
    TaskId.PICK_PLACE: "bowl",
    TaskId.SWEEP: "trash",
    TaskId.UNFOLD: "mat",
    TaskId.SCOOP_TRANSFER: "rice",
}

GRASP_TOL = 30.0
PLACE_TOL = 30.0
CONTACT_TOL = 30.0  # broom-face width: sweeps tolerate sideways drift while pushing
CAN_RADIUS = 25.0
LIFT_HEIGHT = 60.0
SPILL_SPEED = 70.0  # mm per step while carrying rice

SPAWN_BOX = {
    TaskId.PICK_PLACE: ((-80.0, -20.0), (-80.0, -20.0)),
    TaskId.SWEEP: ((-60.0, 0.0), (-20.0, 40.0)),
    TaskId.UNFOLD: ((-40.0, 20.0), (-60.0, 0.0)),
    TaskId.SCOOP_TRANSFER: ((-60.0, -60.0), (-60.0, -60.0)),  # rice starts in the jar
}


def _target_pose(spec: TaskSpec, state: WorldState) -> np.ndarray:
    if spec.task_id is TaskId.PICK_PLACE:
        if "target_pos" in spec.goal_params:
            x, y = spec.goal_params["target_pos"]
            return np.array([float(x), float(y), 0.0])
        return state.object_poses[spec.goal_params.get("target", "plate")]
    if spec.task_id is TaskId.SWEEP:
        return state.object_poses["can"]
    if spec.task_id is TaskId.SCOOP_TRANSFER:
        return state.object_poses["cooker"]
    # unfold: the "target" is a lift height above the mat's spawn point
    mat = state.object_poses["mat"]
    return np.array([mat[0], mat[1], LIFT_HEIGHT])


# --- reset / step / oracle ---------------------------------------------------


def reset(
    spec: TaskSpec,
    seed: Optional[int] = None,
    override_state: Optional[WorldState] = None,
    robot: RobotProfile = RobotProfile(),
) -> tuple[WorldState, SimObservation]:
    """Deterministic initial state, or exact restoration of ``override_state``."""
    if override_state is not None:
        state = override_state.copy()
        _check_state(state)
        return state, observe(state, spec, robot)
    if seed is None:
        raise ValueError("seed required when override_state is absent")
    rng = np.random.default_rng(seed)
    (x0, x1), (y0, y1) = spec.goal_params.get("spawn_box", SPAWN_BOX[spec.task_id])
    pos = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1), 0.0])
    objects = {MOVABLE[spec.task_id]: pos}
    objects.update({k: v.copy() for k, v in FIXTURES[spec.task_id].items()})
    state = WorldState(
        eef=EEF_START.copy(),
        gripper_open=True,
        object_poses=objects,
        task_phase="approach",
        aux={"touched": 0.0, "carried": 0.0, "unfolded": 0.0},
        timestamp_ms=0,
        rng_state=np.random.default_rng(seed ^ 0x5EED).bit_generator.state,
    )
    return state, observe(state, spec, robot)


def step(
    state: WorldState,
    action: ActionCommand,
    spec: TaskSpec,
    robot: RobotProfile = RobotProfile(),
    period_ms: int = CONTROL_PERIOD_MS,
) -> tuple[WorldState, SimObservation, int]:
    """Integrate one action; returns (state', observation, done_truth)."""
    s = state.copy()
    prev_eef = state.eef.copy()
    delta = np.array([action.dx, action.dy, action.dz], dtype=float)
    s.eef[:3] = np.clip(s.eef[:3] + delta, -WORKSPACE_MM, WORKSPACE_MM)
    s.eef[3:] = np.clip(
        s.eef[3:] + np.array([action.droll, action.dpitch, action.dyaw], dtype=float),
        -180.0,
        180.0,
    )
    was_open = s.gripper_open
    s.gripper_open = bool(action.open)
    s.timestamp_ms += period_ms

    _apply_task_dynamics(s, spec, prev_eef, was_open)
    done = int(oracle_progress(s, spec) >= DONE_PROGRESS)
    return s, observe(s, spec, robot), done


def _apply_task_dynamics(s: WorldState, spec: TaskSpec, prev_eef: np.ndarray, was_open: bool) -> None:
    obj = s.object_poses[MOVABLE[spec.task_id]]
    target = _target_pose(spec, s)
    tid = spec.task_id

    if tid is TaskId.PICK_PLACE:
        if s.task_phase == "approach":
            if not s.gripper_open and _dist(s.eef, obj) <= GRASP_TOL:
                s.task_phase = "transport"
        elif s.task_phase == "transport":
            obj[:] = s.eef[:3]
            if s.gripper_open:
                obj[2] = 0.0
                if _hdist(obj, target) <= PLACE_TOL and s.eef[2] <= 30.0:
                    s.task_phase = "done"
                else:
                    s.task_phase = "approach"  # dropped off-target
        if s.task_phase == "transport":
            obj[:] = s.eef[:3]

    elif tid is TaskId.SWEEP:
        if s.eef[2] <= 25.0 and _hdist(prev_eef, obj) <= CONTACT_TOL:
            push = s.eef[:2] - prev_eef[:2]
            obj[:2] = np.clip(obj[:2] + push, -WORKSPACE_MM, WORKSPACE_MM)
            s.aux["touched"] = 1.0
            if s.task_phase == "approach":
                s.task_phase = "transport"
        elif s.task_phase == "transport" and _hdist(s.eef, obj) > CONTACT_TOL:
            s.task_phase = "approach"  # lost contact
        if _hdist(obj, s.object_poses["can"]) <= CAN_RADIUS:
            s.task_phase = "done"

    elif tid is TaskId.UNFOLD:
        if s.task_phase == "approach":
            if not s.gripper_open and _dist(s.eef, obj) <= GRASP_TOL:
                s.task_phase = "transport"  # mat in hand, lifting
        elif s.task_phase == "transport":
            obj[:] = s.eef[:3]
            if s.gripper_open:
                obj[2] = 0.0
                if s.eef[2] >= LIFT_HEIGHT:
                    s.aux["unfolded"] = 1.0
                    s.task_phase = "done"
                else:
                    s.task_phase = "approach"  # dropped too low, still folded

    elif tid is TaskId.SCOOP_TRANSFER:
        if s.task_phase == "approach":
            if not s.gripper_open and _dist(s.eef, s.object_poses["jar"]) <= GRASP_TOL:
                s.aux["carried"] = 1.0
                s.task_phase = "transport"
        elif s.task_phase == "transport":
            obj[:] = s.eef[:3]
            speed = float(np.linalg.norm(s.eef[:3] - prev_eef[:3]))
            if speed > SPILL_SPEED:
                s.aux["carried"] = 0.0
                obj[:] = s.object_poses["jar"]
                s.task_phase = "approach"  # spilled; scoop again
            elif s.gripper_open:
                cooker = s.object_poses["cooker"]
                if _hdist(s.eef, cooker) <= PLACE_TOL and s.eef[2] <= 40.0:
                    obj[:] = cooker
                    s.task_phase = "done"
                else:
                    s.aux["carried"] = 0.0
                    obj[:] = s.object_poses["jar"]
                    s.task_phase = "approach"


def oracle_progress(state: WorldState, spec: TaskSpec) -> float:
    """Analytic task progress in [0, 1]; monotone along the scripted expert."""
    obj = state.object_poses[MOVABLE[spec.task_id]]
    target = _target_pose(spec, state)
    phase = state.task_phase
    if phase == "done":
        return 1.0

    if spec.task_id is TaskId.SWEEP:
        if phase == "approach" and state.aux.get("touched", 0.0) == 0.0:
            red = 1.0 - min(1.0, _dist(state.eef, obj) / DIST_NORM)
            return 0.2 * red
        red = 1.0 - min(1.0, _hdist(obj, target) / DIST_NORM)
        return min(0.94, 0.2 + 0.75 * red)

    if phase == "approach":
        red = 1.0 - min(1.0, _dist(state.eef, obj if spec.task_id is not TaskId.SCOOP_TRANSFER else state.object_poses["jar"]) / DIST_NORM)
        return (0.4 if spec.task_id is TaskId.PICK_PLACE else 0.5) * red * 0.9

    # transport phase
    if spec.task_id is TaskId.PICK_PLACE:
        red = 1.0 - min(1.0, _hdist(obj, target) / DIST_NORM)
        return 0.6 + 0.34 * red
    if spec.task_id is TaskId.UNFOLD:
        # Normalized by the expert's release height so progress keeps rising
        # until the very step the mat is released.
        lift = min(1.0, max(0.0, state.eef[2]) / (LIFT_HEIGHT + 5.0))
        return 0.5 + 0.44 * lift
    # scoop_transfer
    red = 1.0 - min(1.0, _hdist(state.eef, target) / DIST_NORM)
    return 0.5 + 0.44 * red


# --- scripted experts --------------------------------------------------------


def _move_toward(eef: np.ndarray, goal: np.ndarray, max_step: float, open_bit: int) -> ActionCommand:
    delta = goal - eef[:3]
    norm = float(np.linalg.norm(delta))
    if norm > max_step:
        delta = delta * (max_step / norm)
    d = np.rint(delta).astype(int)
    d = np.clip(d, -100, 100)
    return ActionCommand(int(d[0]), int(d[1]), int(d[2]), 0, 0, 0, open_bit)


def scripted_expert(spec: TaskSpec, state: WorldState, speed: float = 1.0) -> ActionCommand:
    """Expert action that advances oracle progress toward the goal.

    ``speed`` scales step sizes; fractions of 1.0 yield longer trajectories
    for critic-training data collection.
    """
    obj = state.object_poses[MOVABLE[spec.task_id]]
    target = _target_pose(spec, state)
    eef = state.eef
    tid = spec.task_id
    stride = max(3.0, 40.0 * speed)

    if tid is TaskId.SWEEP:
        if state.task_phase == "done":
            return ActionCommand()
        to_can = target[:2] - obj[:2]
        norm = float(np.linalg.norm(to_can))
        direction = to_can / norm if norm > 1e-9 else np.array([1.0, 0.0])
        behind = np.clip(obj[:2] - direction * CONTACT_TOL * 0.6, -WORKSPACE_MM + 2.0, WORKSPACE_MM - 2.0)
        in_contact = _hdist(eef, obj) <= CONTACT_TOL * 0.8
        if not in_contact and _hdist(eef, np.append(behind, 0.0)) > 6.0:
            # travel above contact height so the broom face cannot shove the
            # pile off line before it is lined up behind it
            return _move_toward(eef, np.array([behind[0], behind[1], 35.0]), stride, 1)
        if eef[2] > 26.0:
            return _move_toward(eef, np.array([eef[0], eef[1], 26.0]), stride, 1)
        # push toward the can in small steps so contact is kept
        goal = np.array([target[0], target[1], 10.0])
        return _move_toward(eef, goal, min(14.0, stride), 1)

    if state.task_phase == "done":
        return ActionCommand()

    if state.task_phase == "approach":
        grasp_point = state.object_poses["jar"] if tid is TaskId.SCOOP_TRANSFER else obj
        goal = np.array([grasp_point[0], grasp_point[1], max(grasp_point[2], 2.0)])
        if _dist(eef, goal) <= GRASP_TOL * 0.6:
            return ActionCommand(open=0)  # close gripper: grasp / scoop
        return _move_toward(eef, goal, stride, 1)

    # transport phase
    if tid is TaskId.PICK_PLACE:
        goal = np.array([target[0], target[1], 20.0])
        if _hdist(eef, goal) <= PLACE_TOL * 0.5 and eef[2] <= 30.0:
            return ActionCommand(open=1)  # release on target
        return _move_toward(eef, goal, stride, 0)
    if tid is TaskId.UNFOLD:
        goal = np.array([obj[0], obj[1], LIFT_HEIGHT + 15.0])
        if eef[2] >= LIFT_HEIGHT + 5.0:
            return ActionCommand(open=1)  # release high: mat unfolds
        return _move_toward(eef, goal, stride, 0)
    # scoop_transfer: carry gently below the spill speed
    goal = np.array([target[0], target[1], 30.0])
    if _hdist(eef, goal) <= PLACE_TOL * 0.5 and eef[2] <= 40.0:
        return ActionCommand(open=1)  # pour
    return _move_toward(eef, goal, min(stride, 60.0), 0)


# --- observations ------------------------------------------------------------


def feature_length(spec: TaskSpec) -> int:
    return 7 + 3 * 3


def observe(state: WorldState, spec: TaskSpec, robot: RobotProfile = RobotProfile()) -> SimObservation:
    # Deliberately excludes the goal-relative vector and the internal phase
    # machine: task goals and progress must be inferred from the instruction
    # (or an in-context reference), not leaked through the observation.
    names = sorted(state.object_poses)
    rel = []
    for name in names[:3]:
        rel.append((state.object_poses[name] - state.eef[:3]) / (2 * WORKSPACE_MM))
    while len(rel) < 3:
        rel.append(np.zeros(3))
    features = np.concatenate(
        [
            state.eef / np.array([100.0, 100.0, 100.0, 180.0, 180.0, 180.0]),
            [1.0 if state.gripper_open else 0.0],
            *rel,
        ]
    )
    if robot.feature_noise_scale > 0.0:
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
        features = features + rng.normal(0.0, robot.feature_noise_scale, size=features.shape)
        state.rng_state = rng.bit_generator.state
    raster = render_raster(state, spec, robot)
    return SimObservation(
        features=features,
        raster=raster,
        timestamp_ms=state.timestamp_ms,
        robot_id=robot.robot_id,
    )


def _to_cell(xy: np.ndarray) -> tuple[int, int]:
    col = int(np.clip((xy[0] + WORKSPACE_MM) / (2 * WORKSPACE_MM) * (RASTER_SIZE - 1), 0, RASTER_SIZE - 1))
    row = int(np.clip((xy[1] + WORKSPACE_MM) / (2 * WORKSPACE_MM) * (RASTER_SIZE - 1), 0, RASTER_SIZE - 1))
    return row, col


def _blob(raster: np.ndarray, pos: np.ndarray, intensity: float, size: int = 2) -> None:
    row, col = _to_cell(pos)
    raster[row : row + size, col : col + size] = intensity


def render_raster(state: WorldState, spec: TaskSpec, robot: RobotProfile = RobotProfile()) -> np.ndarray:
    """Pure function of WorldState (plus the robot's static background)."""
    bg_rng = np.random.default_rng(robot.background_seed)
    raster = bg_rng.uniform(0.0, 0.15, size=(RASTER_SIZE, RASTER_SIZE))
    for name, pos in sorted(state.object_poses.items()):
        fixed = name in FIXTURES[spec.task_id]
        _blob(raster, pos, 0.55 if fixed else 0.8, size=3)
    eef_level = 0.6 + 0.3 * (state.eef[2] / WORKSPACE_MM)
    _blob(raster, state.eef, eef_level if state.gripper_open else 1.0, size=3)
    return np.rint(np.clip(raster, 0.0, 1.0) * 255.0) / 255.0


# --- convenience wrapper -----------------------------------------------------


class World:
    """One simulated robot: owns a TaskSpec + RobotProfile, tracks current state."""

    def __init__(self, spec: TaskSpec, robot: RobotProfile = RobotProfile()):
        self.spec = spec
        self.robot = robot
        self.state: Optional[WorldState] = None

    def reset(self, seed: Optional[int] = None, override_state: Optional[WorldState] = None) -> SimObservation:
        self.state, obs = reset(self.spec, seed, override_state, self.robot)
        return obs

    def step(self, action: ActionCommand) -> tuple[SimObservation, int]:
        assert self.state is not None, "reset first"
        self.state, obs, done = step(self.state, action, self.spec, self.robot)
        return obs, done

    def progress(self) -> float:
        assert self.state is not None
        return oracle_progress(self.state, self.spec)


def obs_to_frame(obs: SimObservation, state: WorldState, spec: TaskSpec) -> Frame:
    return Frame(
        features=obs.features,
        raster=obs.raster,
        timestamp_ms=obs.timestamp_ms,
        truth_progress=oracle_progress(state, spec),
        truth_task=spec.task_text,
    )


def run_expert_episode(
    spec: TaskSpec,
    seed: int,
    robot: RobotProfile = RobotProfile(),
    max_steps: int = 200,
    speed: float = 1.0,
    hold_steps: int = 0,
) -> tuple[Trajectory, list[ActionCommand], bool]:
    """Roll the scripted expert from reset to done; returns (trajectory, actions, success).

    ``hold_steps`` appends idle frames at the goal so short episodes still
    contain a completed band for done-label sampling.
    """
    world = World(spec, robot)
    obs = world.reset(seed=seed)
    frames = [obs_to_frame(obs, world.state, spec)]
    actions: list[ActionCommand] = []
    done = 0
    for _ in range(max_steps):
        action = scripted_expert(spec, world.state, speed=speed)
        obs, done = world.step(action)
        frames.append(obs_to_frame(obs, world.state, spec))
        actions.append(action)
        if done:
            break
    for _ in range(hold_steps if done else 0):
        obs, done = world.step(ActionCommand())
        frames.append(obs_to_frame(obs, world.state, spec))
        actions.append(ActionCommand())
    traj = Trajectory(frames=frames, task_text=spec.task_text, source_id=f"{spec.task_id.value}-expert-{seed}")
    return traj, actions, bool(done)


def run_random_episode(
    spec: TaskSpec,
    seed: int,
    robot: RobotProfile = RobotProfile(),
    max_steps: int = 40,
) -> tuple[Trajectory, bool]:
    """Aimless small-step rollout; a stand-in for failing policy behavior."""
    rng = np.random.default_rng(seed)
    world = World(spec, robot)
    obs = world.reset(seed=seed)
    frames = [obs_to_frame(obs, world.state, spec)]
    done = 0
    for _ in range(max_steps):
        action = ActionCommand(
            int(rng.integers(-30, 31)),
            int(rng.integers(-30, 31)),
            int(rng.integers(-30, 31)),
            0,
            0,
            0,
            int(rng.integers(0, 2)),
        )
        obs, done = world.step(action)
        frames.append(obs_to_frame(obs, world.state, spec))
        if done:
            break
    traj = Trajectory(frames=frames, task_text=spec.task_text, source_id=f"{spec.task_id.value}-random-{seed}")
    return traj, bool(done)
