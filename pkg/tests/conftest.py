import math

import numpy as np
import pytest

from scenemodes.scene import (
    AgentStatic,
    AgentTrack,
    AgentType,
    LaneGraph,
    LanePolyline,
    Pose4,
    Scene,
    StateSeq,
)
from scenemodes.synth import polyline_from_xy, straight_points


def make_lane(lane_id=1, length=20.0, half_width=2.0, y=0.0, x0=0.0, heading=0.0, spacing=5.0):
    pts = straight_points(x0, y, heading, length, spacing)
    return LanePolyline(polyline_from_xy(pts), half_width, lane_id)


def make_curved_lane(rng, lane_id=1, n_pts=12, half_width=2.0):
    """Random smooth-ish polyline for projection stress tests."""
    headings = np.cumsum(rng.uniform(-0.4, 0.4, n_pts - 1))
    steps = rng.uniform(1.0, 4.0, n_pts - 1)
    xy = np.zeros((n_pts, 2))
    xy[0] = rng.uniform(-10, 10, 2)
    for i in range(1, n_pts):
        xy[i] = xy[i - 1] + steps[i - 1] * np.array([np.cos(headings[i - 1]), np.sin(headings[i - 1])])
    return LanePolyline(polyline_from_xy(xy), half_width, lane_id)


def const_track(x, y, heading=0.0, speed=5.0, t_h=4, t_f=12, dt=0.25, dt_hist=0.5,
                agent_type=AgentType.VEHICLE, length=4.0, width=1.8, moving=True):
    """Agent moving straight at constant speed (or parked)."""
    static = AgentStatic(agent_type, length, width)
    vx = speed * math.cos(heading) if moving else 0.0
    vy = speed * math.sin(heading) if moving else 0.0
    t_hist = (np.arange(t_h) - (t_h - 1)) * dt_hist
    t_fut = (np.arange(t_f) + 1) * dt
    hp = np.stack([x + vx * t_hist, y + vy * t_hist,
                   np.full(t_h, math.sin(heading)), np.full(t_h, math.cos(heading))], axis=1)
    fp = np.stack([x + vx * t_fut, y + vy * t_fut,
                   np.full(t_f, math.sin(heading)), np.full(t_f, math.cos(heading))], axis=1)
    s = speed if moving else 0.0
    return AgentTrack(static, StateSeq.all_valid(hp, np.full(t_h, s)),
                      StateSeq.all_valid(fp, np.full(t_f, s)))


def simple_scene(tracks=None, lanes=None, adjacency=None, dt=0.25, dt_hist=0.5):
    if tracks is None:
        tracks = [const_track(2.0, 0.0), const_track(2.0, 5.0)]
    if lanes is None:
        lanes = [make_lane(1, length=60.0, x0=-20.0), make_lane(2, length=60.0, y=5.0, x0=-20.0)]
    graph = LaneGraph(lanes, adjacency or set())
    return Scene(tracks, graph, ego_index=0, dt=dt, dt_hist=dt_hist)


def random_pose(rng, span=30.0) -> Pose4:
    th = rng.uniform(-math.pi, math.pi)
    return Pose4(rng.uniform(-span, span), rng.uniform(-span, span), math.sin(th), math.cos(th))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
