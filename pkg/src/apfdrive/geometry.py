"""Small geometric primitives shared by the road model and the potential fields."""

import enum
import math
from dataclasses import dataclass

import numpy as np


class MarkingKind(str, enum.Enum):
    NON_TRAVERSABLE = "non_traversable"  # solid line
    TRAVERSABLE = "traversable"  # broken line


class Side(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"

    @property
    def sign(self) -> float:
        return 1.0 if self is Side.LEFT else -1.0


def wrap_angle(angle):
    """Wrap to (-pi, pi]. Works on scalars and arrays."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class CenterlinePoint:
    """A point on a lane centerline with the road tangent angle beta."""

    x: float
    y: float
    beta: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.beta)):
            raise ValueError("CenterlinePoint must be finite")
        object.__setattr__(self, "beta", wrap_angle(self.beta))

    @property
    def normal(self):
        """Unit normal pointing to the left of the road direction."""
        return (-math.sin(self.beta), math.cos(self.beta))


def hap_lateral(position, ref_point: CenterlinePoint) -> float:
    """Lateral coordinate of `position` in the heading-angle-paralleled frame of `ref_point`.

    Evaluates p_x sin(beta) + p_y cos(beta) exactly as written for the HAP frame.
    Note this expression is a true perpendicular projection only for beta in
    {0, +-pi/2, pi}; `signed_lateral_offset` is the rotation-invariant form.
    """
    px, py = float(position[0]), float(position[1])
    return px * math.sin(ref_point.beta) + py * math.cos(ref_point.beta)


def signed_lateral_offset(position, ref_point: CenterlinePoint) -> float:
    """Offset of `position` from the centerline point along its left normal."""
    nx, ny = ref_point.normal
    return (float(position[0]) - ref_point.x) * nx + (float(position[1]) - ref_point.y) * ny


def lateral_gap_to_marking(position, marking_ref: CenterlinePoint, side: Side, w_R: float) -> float:
    """Distance s_R from the vehicle center to a lane marking.

    `marking_ref` is the centerline point of the lane the marking bounds and
    `side` tells on which side of that lane the marking sits. Positive values
    mean the vehicle is on the legal (lane) side of the marking.
    """
    if hasattr(position, "p_x"):
        position = (position.p_x, position.p_y)
    e = signed_lateral_offset(position, marking_ref)
    if side is Side.LEFT:
        return 0.5 * w_R - e
    return e + 0.5 * w_R


def circle_centers(x: float, y: float, heading: float, r_V: float):
    """Front and rear covering-circle centers of a vehicle footprint."""
    c, s = math.cos(heading), math.sin(heading)
    return (x + r_V * c, y + r_V * s), (x - r_V * c, y - r_V * s)
