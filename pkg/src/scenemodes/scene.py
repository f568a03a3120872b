"""Scene data model: poses, agents, lanes, and the lane graph.

All positions are meters in an arbitrary global frame, headings are stored
as (sin, cos) pairs so no angle wrapping ever happens, and time is seconds.
Invalid frames are masked, never encoded as sentinel coordinates.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

UNIT_TOL = 1e-6


class AgentType(enum.IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    CYCLIST = 2


class LaneRelation(enum.IntEnum):
    NEXT = 0
    PREV = 1
    LEFT_ADJ = 2
    RIGHT_ADJ = 3


_INVERSE_REL = {
    LaneRelation.NEXT: LaneRelation.PREV,
    LaneRelation.PREV: LaneRelation.NEXT,
    LaneRelation.LEFT_ADJ: LaneRelation.RIGHT_ADJ,
    LaneRelation.RIGHT_ADJ: LaneRelation.LEFT_ADJ,
}


@dataclass(frozen=True)
class Pose4:
    """Planar pose as (X, Y, sin heading, cos heading)."""

    x: float
    y: float
    sin_h: float
    cos_h: float

    def __post_init__(self):
        norm = self.sin_h * self.sin_h + self.cos_h * self.cos_h
        if abs(norm - 1.0) > UNIT_TOL:
            raise ValueError(f"heading (sin, cos) not on the unit circle: norm^2={norm}")

    @staticmethod
    def from_heading(x: float, y: float, heading: float) -> "Pose4":
        return Pose4(float(x), float(y), math.sin(heading), math.cos(heading))

    @property
    def heading(self) -> float:
        return math.atan2(self.sin_h, self.cos_h)

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.sin_h, self.cos_h])

    @staticmethod
    def from_array(a: Sequence[float]) -> "Pose4":
        return Pose4(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class AgentStatic:
    agent_type: AgentType
    length: float
    width: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ValueError("agent footprint must have positive length and width")

    @property
    def disc_radius(self) -> float:
        """Radius of the disc covering the rectangular footprint."""
        return 0.5 * math.hypot(self.length, self.width)


@dataclass
class StateSeq:
    """A timed sequence of (pose, speed, valid) samples."""

    poses: np.ndarray  # [T, 4]
    speeds: np.ndarray  # [T]
    valid: np.ndarray  # [T] bool

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        self.speeds = np.asarray(self.speeds, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.poses.ndim != 2 or self.poses.shape[1] != 4:
            raise ValueError(f"poses must be [T, 4], got {self.poses.shape}")
        t = self.poses.shape[0]
        if self.speeds.shape != (t,) or self.valid.shape != (t,):
            raise ValueError("poses, speeds and valid must share the time length")
        norms = self.poses[self.valid, 2] ** 2 + self.poses[self.valid, 3] ** 2
        if norms.size and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
            raise ValueError("heading (sin, cos) columns must be unit length on valid frames")

    def __len__(self) -> int:
        return self.poses.shape[0]

    def pose_at(self, t: int) -> Pose4:
        return Pose4.from_array(self.poses[t])

    def last_valid_index(self) -> int:
        idx = np.flatnonzero(self.valid)
        if idx.size == 0:
            raise ValueError("state sequence has no valid frame")
        return int(idx[-1])

    @property
    def xy(self) -> np.ndarray:
        return self.poses[:, :2]

    @staticmethod
    def all_valid(poses: np.ndarray, speeds: np.ndarray) -> "StateSeq":
        poses = np.asarray(poses, dtype=np.float64)
        return StateSeq(poses, np.asarray(speeds, dtype=np.float64), np.ones(len(poses), dtype=bool))


@dataclass
class AgentTrack:
    static: AgentStatic
    history: StateSeq
    future: Optional[StateSeq] = None

    def __post_init__(self):
        if len(self.history) < 1:
            raise ValueError("history must contain at least one frame")

    @property
    def current_pose(self) -> Pose4:
        return self.history.pose_at(self.history.last_valid_index())

    @property
    def current_speed(self) -> float:
        return float(self.history.speeds[self.history.last_valid_index()])


@dataclass
class LanePolyline:
    """Ordered centerline waypoints with a constant half width.

    Lane ids are 1-based; id 0 is reserved for the null ("no lane") mode.
    """

    points: np.ndarray  # [P, 4] waypoint poses, heading = local tangent
    half_width: float
    lane_id: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 4:
            raise ValueError(f"lane points must be [P, 4], got {self.points.shape}")
        if self.points.shape[0] < 2:
            raise ValueError("a lane polyline needs at least two points")
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")
        if self.lane_id < 1:
            raise ValueError("lane ids are 1-based")
        seg = np.diff(self.points[:, :2], axis=0)
        self._seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(self._seg_len <= 0):
            raise ValueError("consecutive lane points must be distinct")
        self._cum_len = np.concatenate([[0.0], np.cumsum(self._seg_len)])

    @property
    def arc_length(self) -> float:
        return float(self._cum_len[-1])

    @property
    def seg_lengths(self) -> np.ndarray:
        return self._seg_len

    @property
    def cum_lengths(self) -> np.ndarray:
        return self._cum_len

    @property
    def start(self) -> Pose4:
        return Pose4.from_array(self.points[0])

    @property
    def end(self) -> Pose4:
        return Pose4.from_array(self.points[-1])

    def point_at_arclength(self, s: float) -> np.ndarray:
        """XY on the centerline at clamped arc length s."""
        s = float(np.clip(s, 0.0, self.arc_length))
        i = int(np.clip(np.searchsorted(self._cum_len, s, side="right") - 1, 0, len(self._seg_len) - 1))
        t = (s - self._cum_len[i]) / self._seg_len[i]
        return self.points[i, :2] + t * (self.points[i + 1, :2] - self.points[i, :2])


@dataclass
class LaneGraph:
    lanes: list[LanePolyline]
    adjacency: set[tuple[int, int, LaneRelation]] = field(default_factory=set)

    def __post_init__(self):
        ids = [lane.lane_id for lane in self.lanes]
        if sorted(ids) != list(range(1, len(self.lanes) + 1)):
            raise ValueError("lane ids must be exactly 1..M")
        self.lanes = sorted(self.lanes, key=lambda l: l.lane_id)
        for i, j, rel in self.adjacency:
            if not (1 <= i <= len(self.lanes) and 1 <= j <= len(self.lanes)):
                raise ValueError(f"adjacency ({i}, {j}, {rel.name}) references an unknown lane")
            if (j, i, _INVERSE_REL[rel]) not in self.adjacency:
                raise ValueError(f"adjacency ({i}, {j}, {rel.name}) is missing its inverse relation")

    @property
    def num_lanes(self) -> int:
        return len(self.lanes)

    def lane(self, lane_id: int) -> LanePolyline:
        return self.lanes[lane_id - 1]

    def neighbors(self, lane_id: int, relation: LaneRelation) -> list[int]:
        return sorted(j for (i, j, rel) in self.adjacency if i == lane_id and rel == relation)

    def relation_of(self, i: int, j: int) -> Optional[LaneRelation]:
        for rel in LaneRelation:
            if (i, j, rel) in self.adjacency:
                return rel
        return None


@dataclass
class Scene:
    """One prediction problem: agents with history (and optional future) plus the local map.

    ``dt`` is the future frame spacing; history frames may be sampled more
    coarsely, with spacing ``dt_hist`` (defaults to ``dt``).
    """

    agents: list[AgentTrack]
    lane_graph: LaneGraph
    ego_index: int
    dt: float
    dt_hist: Optional[float] = None

    def __post_init__(self):
        if not self.agents:
            raise ValueError("a scene needs at least one agent")
        if not (0 <= self.ego_index < len(self.agents)):
            raise ValueError("ego_index out of range")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.dt_hist is None:
            self.dt_hist = self.dt
        if self.dt_hist <= 0:
            raise ValueError("dt_hist must be positive")
        t_h = len(self.agents[0].history)
        for a in self.agents:
            if len(a.history) != t_h:
                raise ValueError("all agents must share the history length")
        futures = [a.future for a in self.agents if a.future is not None]
        if futures:
            t_f = len(futures[0])
            for f in futures:
                if len(f) != t_f:
                    raise ValueError("all provided futures must share the same length")

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    @property
    def num_lanes(self) -> int:
        return self.lane_graph.num_lanes

    @property
    def history_len(self) -> int:
        return len(self.agents[0].history)

    @property
    def future_len(self) -> int:
        for a in self.agents:
            if a.future is not None:
                return len(a.future)
        return 0

    @property
    def has_futures(self) -> bool:
        return all(a.future is not None for a in self.agents)

    @property
    def ego(self) -> AgentTrack:
        return self.agents[self.ego_index]


def iter_pairs(n: int) -> Iterable[tuple[int, int]]:
    """Unordered agent pairs (i < j) in canonical row-major order."""
    for i in range(n):
        for j in range(i + 1, n):
            yield i, j


def pair_index(i: int, j: int, n: int) -> int:
    """Position of unordered pair (i < j) in the canonical order."""
    if not 0 <= i < j < n:
        raise ValueError(f"pair ({i}, {j}) not canonical for n={n}")
    return i * n - i * (i + 1) // 2 + (j - i - 1)


def num_pairs(n: int) -> int:
    return n * (n - 1) // 2
