"""Synthetic scene generation and the scene-log file format.

Scenes are simulated closed-loop: scripted route/speed targets drive a
simple tracking controller whose controls are integrated through the same
clamped unicycle step the model uses, so every logged future is dynamically
feasible. Each generated scene is validated (no footprint overlap, robust
ground-truth margins) and regenerated with a fresh sub-seed otherwise.

Units in the file format: meters, seconds, m/s. Floats round-trip exactly
through JSON.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .batching import batch_scenes  # re-exported: padding lives with the tensors
from .geometry import wrap_angle
from .modes import CoincidentAgents, extract_gtsm
from .model.tgeom import control_limits, unicycle_step
from .scene import (
    AgentStatic,
    AgentTrack,
    AgentType,
    LaneGraph,
    LanePolyline,
    LaneRelation,
    Pose4,
    Scene,
    StateSeq,
    iter_pairs,
)

__all__ = [
    "TemplateKind",
    "ScenarioTemplate",
    "GenerationFailed",
    "ParseError",
    "VersionMismatch",
    "gen_scene",
    "gen_dataset",
    "write_scene",
    "read_scene",
    "scene_equal",
    "batch_scenes",
]

FORMAT_NAME = "scene-log"
FORMAT_VERSION = 1

DT_FUTURE = 0.25
DT_HISTORY = 0.5
HISTORY_LEN = 4
FUTURE_LEN = 12
FINE_STEPS_HISTORY = 2 * (HISTORY_LEN - 1)  # fine frames before "now"
N_FINE = FINE_STEPS_HISTORY + FUTURE_LEN + 1

LANE_SPACING = 5.0
HALF_WIDTH = 2.0
K_HEADING = 2.5
K_SPEED = 1.5
LOOKAHEAD_TIME = 0.9
MIN_LOOKAHEAD = 3.0
HOMOTOPY_MARGIN_FLOOR = 0.05  # rad
LANE_MARGIN_FLOOR = 0.10  # m
MAX_ATTEMPTS = 25


class GenerationFailed(RuntimeError):
    pass


class ParseError(ValueError):
    pass


class VersionMismatch(ParseError):
    pass


class TemplateKind(str, enum.Enum):
    STRAIGHT_MULTI_LANE = "straight"
    MERGE = "merge"
    INTERSECTION = "intersection"
    OVERTAKE = "overtake"
    PARKED_MERGE_IN = "parked"


@dataclass(frozen=True)
class ScenarioTemplate:
    kind: TemplateKind
    n_lanes: int = 3
    lane_length: float = 140.0
    agent_range: tuple[int, int] = (2, 4)
    speed_range: tuple[float, float] = (5.0, 11.0)
    seed: int = 0  # base salt combined with the per-scene seed

    def __post_init__(self):
        if self.n_lanes < 1 or self.lane_length <= 0:
            raise ValueError("template needs at least one lane of positive length")
        lo, hi = self.agent_range
        if not 1 <= lo <= hi:
            raise ValueError("agent_range must be 1 <= lo <= hi")


# ---------------------------------------------------------------------------
# polyline helpers


def polyline_from_xy(xy: np.ndarray) -> np.ndarray:
    """[P, 4] waypoints with tangent headings from an [P, 2] point list."""
    xy = np.asarray(xy, dtype=np.float64)
    d = np.diff(xy, axis=0)
    d = np.vstack([d, d[-1]])
    norm = np.hypot(d[:, 0], d[:, 1])
    norm[norm == 0] = 1.0
    return np.column_stack([xy, d[:, 1] / norm, d[:, 0] / norm])


def straight_points(x0, y0, heading, length, spacing=20.0) -> np.ndarray:
    n = max(2, int(math.ceil(length / spacing)) + 1)
    s = np.linspace(0.0, length, n)
    return np.column_stack([x0 + s * math.cos(heading), y0 + s * math.sin(heading)])


def arc_points(cx, cy, radius, ang0, ang1, n=9) -> np.ndarray:
    ang = np.linspace(ang0, ang1, n)
    return np.column_stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)])


def _route(points: np.ndarray) -> LanePolyline:
    """Transient polyline a controller can track (not part of the map)."""
    keep = [0]
    for i in range(1, len(points)):
        if np.hypot(*(points[i] - points[keep[-1]])) > 1e-6:
            keep.append(i)
    return LanePolyline(polyline_from_xy(points[keep]), HALF_WIDTH, 1)


# ---------------------------------------------------------------------------
# scripted agents + closed-loop rollout


@dataclass
class _Script:
    static: AgentStatic
    pose: Pose4  # at simulation start (2 s before "now")
    speed: float
    paths: list[tuple[float, LanePolyline]]  # (activation time rel. to now, route)
    v_refs: list[tuple[float, float]]
    parked_until: float = -math.inf  # stands still before this time

    def active_path(self, t: float) -> LanePolyline:
        path = self.paths[0][1]
        for t0, p in self.paths:
            if t >= t0:
                path = p
        return path

    def active_v_ref(self, t: float) -> float:
        v = self.v_refs[0][1]
        for t0, vr in self.v_refs:
            if t >= t0:
                v = vr
        return v


def _controls(script: _Script, pose: np.ndarray, speed: float, t: float, noise: float) -> tuple[float, float]:
    if t < script.parked_until:
        return -speed / DT_FUTURE, 0.0
    path = script.active_path(t)
    from .geometry import project_onto_polyline

    p = Pose4.from_array(pose)
    proj = project_onto_polyline(p, path)
    look = max(MIN_LOOKAHEAD, speed * LOOKAHEAD_TIME)
    target = path.point_at_arclength(min(proj.s + look, path.arc_length))
    desired = math.atan2(target[1] - p.y, target[0] - p.x)
    err = wrap_angle(desired - p.heading)
    v_ref = max(0.0, script.active_v_ref(t) + noise)
    return K_SPEED * (v_ref - speed), K_HEADING * err


def _rollout(scripts: list[_Script], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Simulate all agents; returns poses [N, T_fine, 4] and speeds [N, T_fine]."""
    n = len(scripts)
    noise = rng.normal(0.0, 0.25, size=(n, N_FINE))
    pose = torch.tensor(np.stack([s.pose.as_array() for s in scripts]), dtype=torch.float64)
    speed = torch.tensor([s.speed for s in scripts], dtype=torch.float64)
    a_type = torch.tensor([int(s.static.agent_type) for s in scripts])
    limits = control_limits(a_type)
    poses = np.zeros((n, N_FINE, 4))
    speeds = np.zeros((n, N_FINE))
    for f in range(N_FINE):
        poses[:, f] = pose.numpy()
        speeds[:, f] = speed.numpy()
        if f == N_FINE - 1:
            break
        t = (f - FINE_STEPS_HISTORY) * DT_FUTURE
        ctrl = np.array(
            [_controls(s, poses[i, f], speeds[i, f], t, noise[i, f]) for i, s in enumerate(scripts)]
        )
        accel = torch.tensor(ctrl[:, 0], dtype=torch.float64)
        yaw = torch.tensor(ctrl[:, 1], dtype=torch.float64)
        pose, speed = unicycle_step(pose, speed, accel, yaw, DT_FUTURE, limits)
    return poses, speeds


def _pose_on(path: LanePolyline, s: float, back_time: float, speed: float) -> tuple[Pose4, float]:
    """Pose on a path at arc length s, moved back along it by back_time*speed."""
    s0 = s - back_time * speed
    xy = path.point_at_arclength(s0)
    xy2 = path.point_at_arclength(min(s0 + 1.0, path.arc_length))
    heading = math.atan2(xy2[1] - xy[1], xy2[0] - xy[0])
    return Pose4.from_heading(xy[0], xy[1], heading), s0


def _vehicle(rng: np.random.Generator) -> AgentStatic:
    # sizes keep the worst-case disc radius sum under the 5 m lane spacing
    return AgentStatic(
        AgentType.VEHICLE,
        length=float(rng.uniform(3.8, 4.4)),
        width=float(rng.uniform(1.7, 1.9)),
    )


# ---------------------------------------------------------------------------
# templates


def _parallel_lanes(n_lanes: int, length: float) -> LaneGraph:
    lanes = []
    adjacency = set()
    for i in range(n_lanes):
        pts = straight_points(-0.4 * length, i * LANE_SPACING, 0.0, length)
        lanes.append(LanePolyline(polyline_from_xy(pts), HALF_WIDTH, i + 1))
    for i in range(1, n_lanes):
        adjacency.add((i, i + 1, LaneRelation.LEFT_ADJ))
        adjacency.add((i + 1, i, LaneRelation.RIGHT_ADJ))
    return LaneGraph(lanes, adjacency)


def _build_straight(template: ScenarioTemplate, rng: np.random.Generator):
    graph = _parallel_lanes(template.n_lanes, template.lane_length)
    n_agents = int(rng.integers(template.agent_range[0], template.agent_range[1] + 1))
    scripts: list[_Script] = []
    slots: dict[int, list[float]] = {i + 1: [] for i in range(template.n_lanes)}
    for _ in range(n_agents):
        for _try in range(40):
            lane_id = int(rng.integers(1, template.n_lanes + 1))
            s_now = float(rng.uniform(0.25, 0.65) * template.lane_length)
            if all(abs(s_now - o) > 16.0 for o in slots[lane_id]):
                break
        else:
            raise GenerationFailed("could not place agents without overlap")
        slots[lane_id].append(s_now)
        lane = graph.lane(lane_id)
        speed = float(rng.uniform(*template.speed_range))
        pose, _ = _pose_on(lane, s_now, 2.0, speed)
        paths = [(-math.inf, lane)]
        if rng.uniform() < 0.4:
            options = graph.neighbors(lane_id, LaneRelation.LEFT_ADJ) + graph.neighbors(
                lane_id, LaneRelation.RIGHT_ADJ
            )
            if options:
                target = int(options[int(rng.integers(0, len(options)))])
                t_switch = float(rng.uniform(-1.0, 1.0))
                paths.append((t_switch, graph.lane(target)))
        scripts.append(_Script(_vehicle(rng), pose, speed, paths, [(-math.inf, speed)]))
    return graph, scripts


def _build_overtake(template: ScenarioTemplate, rng: np.random.Generator):
    graph = _parallel_lanes(2, template.lane_length)
    lane1, lane2 = graph.lane(1), graph.lane(2)
    v_slow = float(rng.uniform(3.0, 5.0))
    v_fast = float(rng.uniform(8.5, 12.0))
    s_lead = float(rng.uniform(0.35, 0.5) * template.lane_length)
    gap = float(rng.uniform(10.0, 16.0))

    lead_pose, _ = _pose_on(lane1, s_lead, 2.0, v_slow)
    lead = _Script(_vehicle(rng), lead_pose, v_slow, [(-math.inf, lane1)], [(-math.inf, v_slow)])

    s_f = s_lead - gap
    f_pose, _ = _pose_on(lane1, s_f, 2.0, v_fast)
    t_switch = float(rng.uniform(-1.5, 0.5))
    follow = _Script(
        _vehicle(rng),
        f_pose,
        v_fast,
        [(-math.inf, lane1), (t_switch, lane2)],
        [(-math.inf, v_fast)],
    )
    scripts = [follow, lead]  # ego is the overtaker
    if rng.uniform() < 0.5:
        s3 = s_lead + float(rng.uniform(25.0, 40.0))
        v3 = float(rng.uniform(6.0, 9.0))
        p3, _ = _pose_on(lane2, s3, 2.0, v3)
        scripts.append(_Script(_vehicle(rng), p3, v3, [(-math.inf, lane2)], [(-math.inf, v3)]))
    return graph, scripts


def _build_merge(template: ScenarioTemplate, rng: np.random.Generator):
    l_in = 0.45 * template.lane_length
    l_out = 0.55 * template.lane_length
    main_in = LanePolyline(polyline_from_xy(straight_points(-l_in, 0.0, 0.0, l_in)), HALF_WIDTH, 1)
    main_out = LanePolyline(polyline_from_xy(straight_points(0.0, 0.0, 0.0, l_out)), HALF_WIDTH, 2)
    # oblique ramp; the mapped segment stops before the blend zone so its
    # corridor never overlaps the main lane (labels stay unambiguous)
    xs = np.linspace(-55.0, 0.0, 14)
    ys = np.where(xs <= -6.0, 20.0 * xs / 55.0, -(20.0 * 6.0 / 55.0) * (xs / -6.0) ** 2)
    ramp_full = np.column_stack([xs, ys])
    ramp = LanePolyline(polyline_from_xy(ramp_full[xs <= -6.0]), HALF_WIDTH, 3)
    graph = LaneGraph(
        [main_in, main_out, ramp],
        {
            (1, 2, LaneRelation.NEXT),
            (2, 1, LaneRelation.PREV),
            (3, 2, LaneRelation.NEXT),
            (2, 3, LaneRelation.PREV),
        },
    )
    main_route = _route(np.vstack([main_in.points[:, :2], main_out.points[1:, :2]]))
    ramp_route = _route(np.vstack([ramp_full, main_out.points[1:, :2]]))

    v_ego = float(rng.uniform(7.0, 10.0))
    d_ego = float(rng.uniform(20.0, 30.0))  # distance of ego to merge point at t=0
    ego_x0 = -d_ego
    ego_pose, _ = _pose_on(main_route, l_in - d_ego, 2.0, v_ego)
    ego = _Script(_vehicle(rng), ego_pose, v_ego, [(-math.inf, main_route)], [(-math.inf, v_ego)])

    merger_yields = bool(rng.uniform() < 0.5)
    v_m = v_ego + float(rng.uniform(-1.0, 1.0))
    if merger_yields:
        delta_x = float(rng.uniform(-2.0, 2.0))
        v_new = max(1.5, v_ego - float(rng.uniform(3.0, 5.0)))
    else:
        delta_x = float(rng.uniform(-3.0, 1.0))
        v_new = min(v_ego + float(rng.uniform(2.0, 3.5)), 13.0)
    # arc length on the ramp route whose x is closest to the target abeam offset
    grid = np.linspace(0.0, ramp_route.arc_length * 0.55, 200)
    xs_grid = np.array([ramp_route.point_at_arclength(g)[0] for g in grid])
    s_m = float(grid[np.argmin(np.abs(xs_grid - (ego_x0 + delta_x)))])
    t_decide = float(rng.uniform(-1.6, -0.6))
    back = (2.0 + t_decide) * v_m - t_decide * 0.5 * (v_m + v_new)
    m_pose, _ = _pose_on(ramp_route, s_m, 1.0, back)  # back up along the route by `back` meters
    merger = _Script(
        _vehicle(rng),
        m_pose,
        v_m,
        [(-math.inf, ramp_route)],
        [(-math.inf, v_m), (t_decide, v_new)],
    )
    scripts = [ego, merger]
    if rng.uniform() < 0.4:
        v3 = float(rng.uniform(6.0, 9.0))
        p3, _ = _pose_on(main_route, l_in - d_ego - float(rng.uniform(18.0, 28.0)), 2.0, v3)
        scripts.append(_Script(_vehicle(rng), p3, v3, [(-math.inf, main_route)], [(-math.inf, v3)]))
    return graph, scripts


def _build_intersection(template: ScenarioTemplate, rng: np.random.Generator):
    half = 0.5 * template.lane_length
    eb = LanePolyline(polyline_from_xy(straight_points(-half, 0.0, 0.0, template.lane_length)), HALF_WIDTH, 1)
    nb = LanePolyline(
        polyline_from_xy(straight_points(0.0, -half, math.pi / 2, template.lane_length)), HALF_WIDTH, 2
    )
    # the turn arc guides the turner's route only; mapping it as a lane would
    # overlap the through corridor and make end-of-horizon labels knife-edge
    graph = LaneGraph([eb, nb])
    turner_route = _route(
        np.vstack(
            [
                straight_points(-half, 0.0, 0.0, half - 8.0),
                arc_points(-8.0, 8.0, 8.0, -math.pi / 2, 0.0)[1:],
                straight_points(0.0, 8.0, math.pi / 2, half - 8.0)[1:],
            ]
        )
    )

    v1 = float(rng.uniform(6.0, 9.0))
    ego_turns = bool(rng.uniform() < 0.5)
    route1 = turner_route if ego_turns else eb
    d1 = float(rng.uniform(14.0, 26.0))
    p1, _ = _pose_on(route1, (half - d1) if not ego_turns else (half - 8.0 - d1), 2.0, v1)
    ego = _Script(_vehicle(rng), p1, v1, [(-math.inf, route1)], [(-math.inf, v1)])

    v2 = float(rng.uniform(6.0, 9.0))
    crosser_yields = bool(rng.uniform() < 0.5)
    d2 = d1 + float(rng.uniform(6.0, 14.0) if crosser_yields else -4.0)
    p2, _ = _pose_on(nb, half - d2, 2.0, v2)
    t_decide = float(rng.uniform(-1.5, -0.5))
    v2_new = v2 * 0.35 if crosser_yields else v2 * 1.25
    crosser = _Script(_vehicle(rng), p2, v2, [(-math.inf, nb)], [(-math.inf, v2), (t_decide, v2_new)])
    return graph, [ego, crosser]


def _build_parked(template: ScenarioTemplate, rng: np.random.Generator):
    graph = _parallel_lanes(2, template.lane_length)
    lane1 = graph.lane(1)
    v_ego = float(rng.uniform(5.0, 8.0))
    s_ego = float(rng.uniform(0.3, 0.45) * template.lane_length)
    ego_pose, _ = _pose_on(lane1, s_ego, 2.0, v_ego)
    ego = _Script(_vehicle(rng), ego_pose, v_ego, [(-math.inf, lane1)], [(-math.inf, v_ego)])

    s_parked = s_ego + float(rng.uniform(24.0, 36.0))
    xy = lane1.point_at_arclength(s_parked)
    parked_pose = Pose4.from_heading(xy[0], xy[1] - 5.2, 0.0)
    merges = bool(rng.uniform() < 0.5)
    shoulder = _route(
        np.vstack([straight_points(xy[0] - 30.0, xy[1] - 5.2, 0.0, 60.0)])
    )
    merge_path = _route(
        np.vstack(
            [
                np.array([[xy[0] - 1.0, xy[1] - 5.2]]),
                straight_points(xy[0] + 14.0, xy[1], 0.0, template.lane_length * 0.4),
            ]
        )
    )
    t_go = float(rng.uniform(0.0, 0.8))
    if merges:
        script = _Script(
            _vehicle(rng),
            parked_pose,
            0.0,
            [(-math.inf, shoulder), (t_go, merge_path)],
            [(-math.inf, 0.0), (t_go, float(rng.uniform(4.0, 6.5)))],
            parked_until=t_go,
        )
    else:
        script = _Script(
            _vehicle(rng), parked_pose, 0.0, [(-math.inf, shoulder)], [(-math.inf, 0.0)], parked_until=math.inf
        )
    scripts = [ego, script]
    if rng.uniform() < 0.5:
        lane2 = graph.lane(2)
        v3 = float(rng.uniform(*template.speed_range))
        p3, _ = _pose_on(lane2, s_ego + float(rng.uniform(-15.0, 15.0)), 2.0, v3)
        scripts.append(_Script(_vehicle(rng), p3, v3, [(-math.inf, lane2)], [(-math.inf, v3)]))
    return graph, scripts


_BUILDERS = {
    TemplateKind.STRAIGHT_MULTI_LANE: _build_straight,
    TemplateKind.OVERTAKE: _build_overtake,
    TemplateKind.MERGE: _build_merge,
    TemplateKind.INTERSECTION: _build_intersection,
    TemplateKind.PARKED_MERGE_IN: _build_parked,
}

_KIND_SALT = {kind: i + 1 for i, kind in enumerate(TemplateKind)}


# ---------------------------------------------------------------------------
# generation + validation


def _assemble_scene(graph: LaneGraph, scripts: list[_Script], poses, speeds, rng) -> Scene:
    agents = []
    hist_idx = [FINE_STEPS_HISTORY - 2 * (HISTORY_LEN - 1 - k) for k in range(HISTORY_LEN)]
    for i, script in enumerate(scripts):
        hist_valid = np.ones(HISTORY_LEN, dtype=bool)
        if rng.uniform() < 0.1:  # occasionally a late-appearing track
            hist_valid[0] = False
        history = StateSeq(poses[i, hist_idx], speeds[i, hist_idx], hist_valid)
        future = StateSeq.all_valid(
            poses[i, FINE_STEPS_HISTORY + 1 :], speeds[i, FINE_STEPS_HISTORY + 1 :]
        )
        agents.append(AgentTrack(script.static, history, future))
    return Scene(agents, graph, ego_index=0, dt=DT_FUTURE, dt_hist=DT_HISTORY)


def _validate(scene: Scene) -> Optional[str]:
    """None when the scene is usable, else a reason string."""
    n = scene.num_agents
    radii = [a.static.disc_radius for a in scene.agents]
    all_xy = np.stack(
        [np.vstack([a.history.xy, a.future.xy]) for a in scene.agents]
    )  # [N, T_all, 2]
    for i, j in iter_pairs(n):
        d = np.hypot(*(all_xy[i] - all_xy[j]).T)
        if np.min(d) < radii[i] + radii[j]:
            return f"footprint overlap between agents {i} and {j}"
    try:
        gtsm, margins = extract_gtsm(scene)
    except CoincidentAgents:
        return "coincident agents"
    for p, _pair in enumerate(iter_pairs(n)):
        if np.max(margins.homotopy[p]) < HOMOTOPY_MARGIN_FLOOR:
            return "ambiguous interaction margin"
    for i, lane_id in enumerate(gtsm.a2l):
        if lane_id > 0 and margins.lane[i, lane_id - 1] < LANE_MARGIN_FLOOR:
            return "weak lane margin"
        if lane_id == 0 and scene.num_lanes and np.max(margins.lane[i]) > -LANE_MARGIN_FLOOR:
            return "ambiguous null lane"
    return None


def gen_scene(template: ScenarioTemplate, seed: int) -> Scene:
    """Deterministic scene for (template, seed); retries sub-seeds until valid."""
    builder = _BUILDERS[template.kind]
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([template.seed, _KIND_SALT[template.kind], seed, attempt])
        try:
            graph, scripts = builder(template, rng)
            poses, speeds = _rollout(scripts, rng)
            scene = _assemble_scene(graph, scripts, poses, speeds, rng)
        except GenerationFailed:
            continue
        if _validate(scene) is None:
            return scene
    raise GenerationFailed(
        f"no valid scene for template={template.kind.value} seed={seed} after {MAX_ATTEMPTS} attempts"
    )


def gen_dataset(templates: Sequence[ScenarioTemplate], count: int, seed: int = 0) -> list[Scene]:
    """Round-robin over templates with consecutive seeds."""
    return [gen_scene(templates[i % len(templates)], seed + i) for i in range(count)]


# ---------------------------------------------------------------------------
# scene-log file format


def _seq_to_json(seq: StateSeq) -> dict:
    return {
        "poses": [[float(v) for v in row] for row in seq.poses],
        "speeds": [float(v) for v in seq.speeds],
        "valid": [bool(v) for v in seq.valid],
    }


def _seq_from_json(obj: dict, where: str) -> StateSeq:
    try:
        return StateSeq(
            np.array(obj["poses"], dtype=np.float64).reshape(len(obj["poses"]), 4),
            np.array(obj["speeds"], dtype=np.float64),
            np.array(obj["valid"], dtype=bool),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise ParseError(f"{where}: bad state sequence ({e})") from e


_KNOWN_TOP = {"format", "version", "dt", "dt_hist", "ego_index", "agents", "lanes", "adjacency", "meta"}
_KNOWN_AGENT = {"type", "length", "width", "history", "future"}
_KNOWN_LANE = {"id", "half_width", "points"}


def write_scene(scene: Scene, path, meta: Optional[dict] = None) -> None:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dt": float(scene.dt),
        "dt_hist": float(scene.dt_hist),
        "ego_index": scene.ego_index,
        "agents": [
            {
                "type": a.static.agent_type.name,
                "length": float(a.static.length),
                "width": float(a.static.width),
                "history": _seq_to_json(a.history),
                "future": _seq_to_json(a.future) if a.future is not None else None,
            }
            for a in scene.agents
        ],
        "lanes": [
            {
                "id": lane.lane_id,
                "half_width": float(lane.half_width),
                "points": [[float(v) for v in row] for row in lane.points],
            }
            for lane in scene.lane_graph.lanes
        ],
        "adjacency": sorted([i, j, rel.name] for i, j, rel in scene.lane_graph.adjacency),
    }
    if meta is not None:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def read_scene(path) -> Scene:
    """Parse a scene-log file; unknown fields warn, malformed input raises ParseError."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ParseError(f"{path}: not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: version {doc.get('version')!r}, expected {FORMAT_VERSION}")
    for key in set(doc) - _KNOWN_TOP:
        warnings.warn(f"{path}: ignoring unknown field {key!r}")

    try:
        agents = []
        for ai, a in enumerate(doc["agents"]):
            for key in set(a) - _KNOWN_AGENT:
                warnings.warn(f"{path}: agents[{ai}]: ignoring unknown field {key!r}")
            static = AgentStatic(AgentType[a["type"]], float(a["length"]), float(a["width"]))
            history = _seq_from_json(a["history"], f"agents[{ai}].history")
            future = _seq_from_json(a["future"], f"agents[{ai}].future") if a.get("future") else None
            agents.append(AgentTrack(static, history, future))
        lanes = []
        for li, lane in enumerate(doc["lanes"]):
            for key in set(lane) - _KNOWN_LANE:
                warnings.warn(f"{path}: lanes[{li}]: ignoring unknown field {key!r}")
            pts = np.array(lane["points"], dtype=np.float64)
            lanes.append(LanePolyline(pts.reshape(len(pts), 4), float(lane["half_width"]), int(lane["id"])))
        adjacency = {(int(i), int(j), LaneRelation[rel]) for i, j, rel in doc.get("adjacency", [])}
        return Scene(
            agents,
            LaneGraph(lanes, adjacency),
            ego_index=int(doc["ego_index"]),
            dt=float(doc["dt"]),
            dt_hist=float(doc["dt_hist"]),
        )
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise ParseError(f"{path}: malformed scene log: {e}") from e


def read_meta(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON: {e.msg}") from e
    return doc.get("meta", {}) if isinstance(doc, dict) else {}


def scene_equal(a: Scene, b: Scene) -> bool:
    """Bit-exact equality of two scenes (used by round-trip checks)."""
    if a.num_agents != b.num_agents or a.num_lanes != b.num_lanes:
        return False
    if (a.dt, a.dt_hist, a.ego_index) != (b.dt, b.dt_hist, b.ego_index):
        return False
    for x, y in zip(a.agents, b.agents):
        if x.static != y.static:
            return False
        for sx, sy in ((x.history, y.history), (x.future, y.future)):
            if (sx is None) != (sy is None):
                return False
            if sx is not None and not (
                np.array_equal(sx.poses, sy.poses)
                and np.array_equal(sx.speeds, sy.speeds)
                and np.array_equal(sx.valid, sy.valid)
            ):
                return False
    for lx, ly in zip(a.lane_graph.lanes, b.lane_graph.lanes):
        if lx.lane_id != ly.lane_id or lx.half_width != ly.half_width:
            return False
        if not np.array_equal(lx.points, ly.points):
            return False
    return a.lane_graph.adjacency == b.lane_graph.adjacency
