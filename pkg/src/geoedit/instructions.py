"""Editing instructions: operation vocabulary, difficulty bands, and
conversion to concrete geometric transforms."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .geometry import AffineParams, Rotation3DParams

OPS = ("move", "resize", "rotate2d", "rotate3d")
DIFFICULTIES = ("easy", "medium", "hard")

_SQ2 = math.sqrt(0.5)
MOVE_DIRECTIONS = {
    "up": (0.0, -1.0),
    "down": (0.0, 1.0),
    "left": (-1.0, 0.0),
    "right": (1.0, 0.0),
    "up_left": (-_SQ2, -_SQ2),
    "up_right": (_SQ2, -_SQ2),
    "down_left": (-_SQ2, _SQ2),
    "down_right": (_SQ2, _SQ2),
}

# (op, variant) -> difficulty -> inclusive magnitude range
BANDS = {
    ("rotate2d", None): {"easy": (5.0, 10.0), "medium": (10.0, 20.0), "hard": (20.0, 40.0)},
    ("move", None): {"easy": (0.05, 0.1), "medium": (0.1, 0.2), "hard": (0.2, 0.4)},
    ("resize", "enlarge"): {"easy": (1.1, 1.3), "medium": (1.3, 1.5), "hard": (1.5, 3.0)},
    ("resize", "shrink"): {"easy": (0.8, 0.9), "medium": (0.6, 0.8), "hard": (0.4, 0.6)},
    ("rotate3d", None): {"easy": (5.0, 10.0), "medium": (15.0, 20.0), "hard": (25.0, 40.0)},
}


def magnitude_band(op: str, direction: str, difficulty: str) -> tuple:
    variant = direction if op == "resize" else None
    try:
        return BANDS[(op, variant)][difficulty]
    except KeyError:
        raise ValueError(f"no magnitude band for op={op!r} direction={direction!r} difficulty={difficulty!r}")


@dataclass(frozen=True)
class EditInstruction:
    """One geometric edit: operation, direction, magnitude, difficulty.

    Units: move magnitudes are fractions of image size, resize magnitudes are
    scale factors, rotations are degrees.
    """

    op: str
    direction: str
    magnitude: float
    difficulty: str
    requires_completion: bool = False
    completion_mask_ref: Optional[str] = None

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown op {self.op!r}")
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")
        valid_dirs = {
            "move": tuple(MOVE_DIRECTIONS),
            "resize": ("enlarge", "shrink"),
            "rotate2d": ("cw", "ccw"),
            "rotate3d": ("x", "y", "z"),
        }[self.op]
        if self.direction not in valid_dirs:
            raise ValueError(f"direction {self.direction!r} invalid for op {self.op!r}")
        lo, hi = magnitude_band(self.op, self.direction, self.difficulty)
        if not lo <= self.magnitude <= hi:
            raise ValueError(
                f"magnitude {self.magnitude} outside {self.difficulty} band [{lo}, {hi}] for {self.op}"
            )
        if self.op == "move" and self.magnitude <= 0:
            raise ValueError("move fraction must be positive")

    def is_3d(self) -> bool:
        return self.op == "rotate3d"

    def to_affine(self, height: int, width: int) -> AffineParams:
        """Concrete 2D transform for this instruction at the given resolution."""
        if self.op == "move":
            ux, uy = MOVE_DIRECTIONS[self.direction]
            span = self.magnitude * min(height, width)
            return AffineParams(t_x=ux * span, t_y=uy * span)
        if self.op == "resize":
            return AffineParams(s_x=self.magnitude, s_y=self.magnitude)
        if self.op == "rotate2d":
            sign = 1.0 if self.direction == "ccw" else -1.0
            return AffineParams(phi=sign * self.magnitude)
        raise ValueError(f"{self.op} is not a 2D operation")

    def to_rotation(self) -> Rotation3DParams:
        if self.op != "rotate3d":
            raise ValueError(f"{self.op} is not a 3D operation")
        return Rotation3DParams(axis=self.direction, angle=self.magnitude)

    def to_dict(self) -> dict:
        d = {
            "op": self.op,
            "direction": self.direction,
            "magnitude": self.magnitude,
            "difficulty": self.difficulty,
        }
        if self.requires_completion:
            d["requires_completion"] = True
        if self.completion_mask_ref:
            d["completion_mask_ref"] = self.completion_mask_ref
        return d

    @staticmethod
    def from_dict(d: dict) -> "EditInstruction":
        return EditInstruction(
            op=d["op"],
            direction=d["direction"],
            magnitude=float(d["magnitude"]),
            difficulty=d["difficulty"],
            requires_completion=bool(d.get("requires_completion", False)),
            completion_mask_ref=d.get("completion_mask_ref"),
        )
