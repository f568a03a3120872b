"""Exact scene-mode labeling from trajectories.

A scene mode is one lane assignment per agent (0 = no lane) plus one
interaction class per unordered agent pair, derived from the accumulated
winding angle of the pair's relative displacement. Margins are the signed,
(almost everywhere) differentiable quantities whose positivity certifies a
mode.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import project_onto_polyline
from .scene import LaneGraph, LanePolyline, Pose4, Scene, iter_pairs, num_pairs

DEFAULT_THETA_HAT = math.pi / 6
DEFAULT_ALIGN_THRESH = math.pi / 4
COINCIDENT_EPS = 1e-6
# LEFTOF/RIGHTOF only apply within this many half-widths of the centerline.
SIDE_BAND_FACTOR = 3.0


class CoincidentAgents(ValueError):
    """Two distinct agents share a position, so their bearing is undefined."""


class PairwiseA2L(enum.IntEnum):
    NOTON = 0
    ON = 1
    AHEAD = 2
    BEHIND = 3
    LEFTOF = 4
    RIGHTOF = 5
    MISALIGN = 6


class HomotopyClass(enum.IntEnum):
    CW = 0
    S = 1
    CCW = 2


@dataclass(frozen=True)
class SceneMode:
    """Joint tokenized mode: per-agent lane index and per-pair interaction class.

    ``a2l[i]`` is in {0 (null), 1..M}; ``a2a`` is ordered row-major over
    unordered pairs (i < j).
    """

    a2l: tuple[int, ...]
    a2a: tuple[HomotopyClass, ...]

    def __post_init__(self):
        n = len(self.a2l)
        if len(self.a2a) != num_pairs(n):
            raise ValueError(f"expected {num_pairs(n)} pair modes for {n} agents, got {len(self.a2a)}")
        object.__setattr__(self, "a2a", tuple(HomotopyClass(h) for h in self.a2a))

    @property
    def num_agents(self) -> int:
        return len(self.a2l)

    def key(self) -> tuple:
        return (self.a2l, tuple(int(h) for h in self.a2a))


@dataclass
class ModeMargins:
    """lane[i, j]: on-lane margin of agent i w.r.t. lane j+1 (meters).
    homotopy[p]: (CW, S, CCW) margins of pair p (radians)."""

    lane: np.ndarray  # [N, M]
    homotopy: np.ndarray  # [P, 3]


def angular_distance(
    traj1: np.ndarray,
    traj2: np.ndarray,
    valid: Optional[np.ndarray] = None,
) -> float:
    """Accumulated wrapped change of the bearing of (traj1 - traj2).

    Symmetric in its arguments and unbounded in magnitude (it counts full
    turns). Raises CoincidentAgents when the two positions are closer than
    1e-6 m at any used frame.
    """
    p1 = np.asarray(traj1, dtype=np.float64)[..., :2]
    p2 = np.asarray(traj2, dtype=np.float64)[..., :2]
    if p1.shape != p2.shape:
        raise ValueError("trajectories must have equal shapes")
    if valid is not None:
        keep = np.asarray(valid, dtype=bool)
        p1 = p1[keep]
        p2 = p2[keep]
    if p1.shape[0] < 2:
        raise ValueError("need at least two valid frames to accumulate a winding angle")
    delta = p1 - p2
    dist = np.hypot(delta[:, 0], delta[:, 1])
    if np.any(dist < COINCIDENT_EPS):
        raise CoincidentAgents(f"agents within {COINCIDENT_EPS} m; bearing undefined")
    bearing = np.arctan2(delta[:, 1], delta[:, 0])
    inc = np.diff(bearing)
    inc = np.where(inc > math.pi, inc - 2 * math.pi, inc)
    inc = np.where(inc <= -math.pi, inc + 2 * math.pi, inc)
    return float(np.sum(inc))


def homotopy_class(dtheta: float, theta_hat: float = DEFAULT_THETA_HAT) -> HomotopyClass:
    """3-way interaction class of a winding angle; dtheta = theta_hat maps to CCW."""
    if theta_hat <= 0:
        raise ValueError("theta_hat must be positive")
    if dtheta < -theta_hat:
        return HomotopyClass.CW
    if dtheta < theta_hat:
        return HomotopyClass.S
    return HomotopyClass.CCW


def homotopy_margin(dtheta: float, theta_hat: float = DEFAULT_THETA_HAT) -> np.ndarray:
    """(CW, S, CCW) margins; exactly one is positive away from |dtheta| = theta_hat."""
    if theta_hat <= 0:
        raise ValueError("theta_hat must be positive")
    return np.array([-dtheta - theta_hat, theta_hat - abs(dtheta), dtheta - theta_hat])


def a2l_margin(pose: Pose4, lane: LanePolyline) -> float:
    """Signed on-lane margin: min of lateral clearance and both end clearances.

    Positive iff the pose is within the lane's width and longitudinal extent;
    uses the unclamped arc length so being past an end goes negative.
    """
    proj = project_onto_polyline(pose, lane)
    return min(lane.half_width - abs(proj.lat), proj.s_raw, lane.arc_length - proj.s_raw)


def pairwise_a2l(
    pose: Pose4,
    lane: LanePolyline,
    align_thresh: float = DEFAULT_ALIGN_THRESH,
) -> PairwiseA2L:
    """7-way agent-lane relation at one frame."""
    if not 0 < align_thresh < math.pi:
        raise ValueError("align_thresh must be in (0, pi)")
    proj = project_onto_polyline(pose, lane)
    if proj.s_raw > lane.arc_length:
        return PairwiseA2L.AHEAD
    if proj.s_raw < 0.0:
        return PairwiseA2L.BEHIND
    lat = proj.lat
    if abs(lat) <= lane.half_width:
        if abs(proj.dheading) <= align_thresh:
            return PairwiseA2L.ON
        return PairwiseA2L.MISALIGN
    if abs(lat) <= SIDE_BAND_FACTOR * lane.half_width:
        return PairwiseA2L.LEFTOF if lat > 0 else PairwiseA2L.RIGHTOF
    return PairwiseA2L.NOTON


def unitary_a2l(end_pose: Pose4, lane_graph: LaneGraph) -> tuple[int, float]:
    """Lane the pose is on (largest positive margin) or 0 with the best margin.

    Ties go to the smallest |lat|, then the lowest lane id.
    """
    if lane_graph.num_lanes == 0:
        return 0, float("-inf")
    best: tuple[float, float, int] | None = None  # (-margin, |lat|, id)
    for lane in lane_graph.lanes:
        proj = project_onto_polyline(end_pose, lane)
        margin = min(lane.half_width - abs(proj.lat), proj.s_raw, lane.arc_length - proj.s_raw)
        key = (-margin, abs(proj.lat), lane.lane_id)
        if best is None or key < best:
            best = key
    margin = -best[0]
    if margin > 0:
        return best[2], margin
    return 0, margin


def extract_gtsm(scene: Scene, theta_hat: float = DEFAULT_THETA_HAT) -> tuple[SceneMode, ModeMargins]:
    """Ground-truth scene mode of a logged scene.

    Lane assignment is evaluated at each agent's final valid future frame;
    pair classes accumulate the winding over [current frame, future window].
    """
    if not scene.has_futures:
        raise ValueError("every agent needs a future to extract the ground-truth mode")
    n = scene.num_agents
    m = scene.num_lanes

    a2l: list[int] = []
    lane_margins = np.zeros((n, m))
    end_poses: list[Pose4] = []
    for i, agent in enumerate(scene.agents):
        end_pose = agent.future.pose_at(agent.future.last_valid_index())
        end_poses.append(end_pose)
        lane_idx, _ = unitary_a2l(end_pose, scene.lane_graph)
        a2l.append(lane_idx)
        for j, lane in enumerate(scene.lane_graph.lanes):
            lane_margins[i, j] = a2l_margin(end_pose, lane)

    a2a: list[HomotopyClass] = []
    homo_margins = np.zeros((num_pairs(n), 3))
    for p, (i, j) in enumerate(iter_pairs(n)):
        xy_i, xy_j, valid = _pair_window(scene, i, j)
        dtheta = angular_distance(xy_i, xy_j, valid)
        a2a.append(homotopy_class(dtheta, theta_hat))
        homo_margins[p] = homotopy_margin(dtheta, theta_hat)

    mode = SceneMode(tuple(a2l), tuple(a2a))
    return mode, ModeMargins(lane_margins, homo_margins)


def _pair_window(scene: Scene, i: int, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Current pose plus future frames of agents i and j, with a joint validity mask."""
    ai, aj = scene.agents[i], scene.agents[j]
    cur_i = ai.history.poses[ai.history.last_valid_index(), :2]
    cur_j = aj.history.poses[aj.history.last_valid_index(), :2]
    xy_i = np.concatenate([cur_i[None], ai.future.xy])
    xy_j = np.concatenate([cur_j[None], aj.future.xy])
    valid = np.concatenate([[True], ai.future.valid & aj.future.valid])
    return xy_i, xy_j, valid


def sm_cardinality(n_agents: int, n_lanes: int) -> int:
    """Number of joint scene modes, counting the null lane assignment."""
    if n_agents < 1 or n_lanes < 0:
        raise ValueError("need n_agents >= 1 and n_lanes >= 0")
    return (n_lanes + 1) ** n_agents * 3 ** num_pairs(n_agents)


def enumerate_scene_modes(n_agents: int, n_lanes: int):
    """Yield every SceneMode for small scenes, in lexicographic key order."""
    import itertools

    lane_choices = range(n_lanes + 1)
    class_choices = [HomotopyClass.CW, HomotopyClass.S, HomotopyClass.CCW]
    for a2l in itertools.product(lane_choices, repeat=n_agents):
        for a2a in itertools.product(class_choices, repeat=num_pairs(n_agents)):
            yield SceneMode(tuple(a2l), tuple(a2a))
