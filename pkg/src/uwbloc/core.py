"""Geometry, time representation, and node/layout types shared by all modules.

Two time domains are used throughout:

* true time  -- the simulator's ground-truth clock, counted in integer
  picoseconds so event ordering and propagation arithmetic are exact.
* device time -- what a radio's own counter reads, counted in integer
  ticks of the 63.8976 GHz timestamping clock (~15.65 ps per tick).

All positions are 2-D Cartesian in meters.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

SPEED_OF_LIGHT = 299792458.0  # m/s, exact

TICK_RATE_HZ = 63.8976e9
TICK_PERIOD_S = 1.0 / TICK_RATE_HZ  # ~15.65 ps

PS_PER_S = 1_000_000_000_000

# Slack (in ticks) when flooring a device reading to a tick count.  A double
# near 6.4e10 carries ~1e-5 ticks of representation noise; without the slack
# an exact tick boundary could floor one tick low.
_QUANTIZE_EPS_TICKS = 1e-4


class GeometryError(ValueError):
    """Raised for invalid positions or layouts."""


@dataclass(frozen=True)
class Position:
    """A 2-D point in meters."""

    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"non-finite coordinates ({self.x}, {self.y})")

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


class NodeRole(Enum):
    ANCHOR = "anchor"
    TAG = "tag"
    SYNC = "sync"


@dataclass(frozen=True)
class Node:
    """A radio with an id, role and (for stationary nodes) a surveyed position."""

    node_id: int
    role: NodeRole
    position: Position


def distance(a: Position, b: Position) -> float:
    """Euclidean distance between two points, in meters."""
    return math.hypot(a.x - b.x, a.y - b.y)


def propagation_delay(a: Position, b: Position) -> float:
    """One-way radio propagation delay between two points, in seconds."""
    return distance(a, b) / SPEED_OF_LIGHT


def seconds_to_ps(seconds: float) -> int:
    """Convert seconds to integer picoseconds (round to nearest)."""
    return round(seconds * PS_PER_S)


def ps_to_seconds(ps: int) -> float:
    return ps / PS_PER_S


def quantize_to_ticks(reading_s: float) -> int:
    """Quantize a continuous clock reading (seconds) to a whole tick count.

    Models a free-running counter: the stamp is the number of full tick
    periods elapsed, i.e. floor(reading / tick_period).
    """
    ticks = math.floor(reading_s * TICK_RATE_HZ + _QUANTIZE_EPS_TICKS)
    if ticks < 0:
        raise ValueError(f"negative device reading {reading_s!r} s")
    return ticks


def ticks_to_seconds(ticks: int) -> float:
    return ticks * TICK_PERIOD_S


def derive_seed(*parts) -> int:
    """Stable 63-bit seed derived from a tuple of ints/strings.

    Used to give every node clock, broadcast and sweep run its own
    reproducible random stream, independent of execution order.
    """
    text = ":".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle, used for room bounds and solver constraints."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise GeometryError(f"degenerate bounds {self}")

    def contains(self, p: Position, slack: float = 1e-9) -> bool:
        return (self.x_min - slack <= p.x <= self.x_max + slack
                and self.y_min - slack <= p.y <= self.y_max + slack)


def _collinear(points: Iterable[Position], tol: float = 1e-9) -> bool:
    pts = list(points)
    if len(pts) < 3:
        return True
    p0 = pts[0]
    for a in pts[1:]:
        for b in pts[1:]:
            cross = (a.x - p0.x) * (b.y - p0.y) - (a.y - p0.y) * (b.x - p0.x)
            if abs(cross) > tol:
                return False
    return True


@dataclass(frozen=True)
class SystemLayout:
    """Anchor, sync-node and tag placement for one deployment.

    At least three non-collinear anchors are needed for closed-form
    trilateration; two suffice for bounded iterative solving.
    """

    anchors: tuple[Node, ...]
    sync: Node
    tag_start: Position
    bounds: Rect

    def __post_init__(self) -> None:
        if len(self.anchors) < 2:
            raise GeometryError("layout needs at least 2 anchors")
        ids = [n.node_id for n in self.anchors] + [self.sync.node_id]
        if len(set(ids)) != len(ids):
            raise GeometryError(f"duplicate node ids in layout: {ids}")
        if self.sync.role is not NodeRole.SYNC:
            raise GeometryError("sync node must have the sync role")
        for node in self.anchors:
            if node.role is not NodeRole.ANCHOR:
                raise GeometryError(f"node {node.node_id} is not an anchor")
            if not self.bounds.contains(node.position):
                raise GeometryError(f"anchor {node.node_id} outside bounds")
        if not self.bounds.contains(self.sync.position):
            raise GeometryError("sync node outside bounds")
        if not self.bounds.contains(self.tag_start):
            raise GeometryError("tag start outside bounds")

    @property
    def anchor_ids(self) -> tuple[int, ...]:
        return tuple(n.node_id for n in self.anchors)

    def anchor_position(self, node_id: int) -> Position:
        for node in self.anchors:
            if node.node_id == node_id:
                return node.position
        raise KeyError(f"no anchor with id {node_id}")

    def anchors_collinear(self) -> bool:
        return _collinear(n.position for n in self.anchors)

    def sync_offsets(self) -> dict[int, float]:
        """Fixed sync-to-anchor propagation delays, in seconds, per anchor id."""
        return {
            n.node_id: propagation_delay(self.sync.position, n.position)
            for n in self.anchors
        }
