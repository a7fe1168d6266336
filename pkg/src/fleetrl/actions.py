"""Delta end-effector action command shared by the simulator and the policy."""

from __future__ import annotations

from dataclasses import dataclass

TRANSLATION_BOUND = 100  # mm per step
ROTATION_BOUND = 45  # degrees per step


@dataclass(frozen=True)
class ActionCommand:
    """Per-step delta EEF pose (integer mm / degrees) plus a gripper bit."""

    dx: int = 0
    dy: int = 0
    dz: int = 0
    droll: int = 0
    dpitch: int = 0
    dyaw: int = 0
    open: int = 1

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            v = getattr(self, name)
            if not isinstance(v, int) or abs(v) > TRANSLATION_BOUND:
                raise ValueError(f"{name}={v} outside [-{TRANSLATION_BOUND}, {TRANSLATION_BOUND}]")
        for name in ("droll", "dpitch", "dyaw"):
            v = getattr(self, name)
            if not isinstance(v, int) or abs(v) > ROTATION_BOUND:
                raise ValueError(f"{name}={v} outside [-{ROTATION_BOUND}, {ROTATION_BOUND}]")
        if self.open not in (0, 1):
            raise ValueError(f"open={self.open} must be 0 or 1")

    def as_tuple(self) -> tuple[int, int, int, int, int, int, int]:
        return (self.dx, self.dy, self.dz, self.droll, self.dpitch, self.dyaw, self.open)
