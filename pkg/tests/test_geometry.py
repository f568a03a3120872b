import math

import numpy as np
import pytest

from scenemodes.geometry import (
    AgentAux,
    a2a_edge_feature,
    a2l_edge_feature,
    l2l_edge_feature,
    project_onto_polyline,
    relative_pose,
    transform_pose,
    transform_pose_array,
)
from scenemodes.scene import AgentStatic, AgentType, LanePolyline, Pose4

from conftest import make_curved_lane, make_lane, random_pose


def test_relative_pose_identity():
    x = Pose4.from_heading(3.0, -2.0, 0.7)
    rel = relative_pose(x, x)
    assert np.allclose(rel.as_array(), [0, 0, 0, 1], atol=1e-12)


def test_relative_pose_axis_aligned():
    x1 = Pose4.from_heading(0, 0, 0.0)
    x2 = Pose4.from_heading(5, 0, 0.0)
    assert np.allclose(relative_pose(x1, x2).as_array(), [5, 0, 0, 1])


def test_relative_pose_rotated_frame():
    # frame at origin facing +y; a point 5 m up is 5 m ahead in its frame
    x1 = Pose4(0, 0, math.sin(math.pi / 2), math.cos(math.pi / 2))
    x2 = Pose4(0, 5, math.sin(math.pi / 2), math.cos(math.pi / 2))
    assert np.allclose(relative_pose(x1, x2).as_array(), [5, 0, 0, 1], atol=1e-12)


def test_relative_pose_rigid_invariance(rng):
    for _ in range(1000):
        x1, x2, t = random_pose(rng), random_pose(rng), random_pose(rng)
        base = relative_pose(x1, x2).as_array()
        moved = relative_pose(transform_pose(t, x1), transform_pose(t, x2)).as_array()
        assert np.max(np.abs(base - moved)) < 1e-9


def test_transform_pose_roundtrip(rng):
    for _ in range(100):
        frame, local = random_pose(rng), random_pose(rng)
        glob = transform_pose(frame, local)
        back = relative_pose(frame, glob)
        assert np.allclose(back.as_array(), local.as_array(), atol=1e-9)


def test_projection_on_centerline():
    lane = make_lane(length=20.0)
    p = Pose4.from_heading(8.0, 0.0, 0.0)
    proj = project_onto_polyline(p, lane)
    assert proj.in_extent
    assert abs(proj.lat) < 1e-12
    assert abs(proj.s - 8.0) < 1e-12
    assert abs(proj.dheading) < 1e-12


def test_projection_left_positive():
    lane = make_lane(length=20.0)
    proj = project_onto_polyline(Pose4.from_heading(10.0, 1.0, 0.0), lane)
    assert proj.lat == pytest.approx(1.0)
    proj = project_onto_polyline(Pose4.from_heading(10.0, -1.5, 0.0), lane)
    assert proj.lat == pytest.approx(-1.5)


def test_projection_beyond_end_clamps():
    lane = make_lane(length=20.0)
    proj = project_onto_polyline(Pose4.from_heading(23.0, 0.0, 0.0), lane)
    assert not proj.in_extent
    assert proj.s == pytest.approx(20.0)
    assert proj.s_raw == pytest.approx(23.0)
    proj = project_onto_polyline(Pose4.from_heading(-4.0, 0.5, 0.0), lane)
    assert not proj.in_extent
    assert proj.s == pytest.approx(0.0)
    assert proj.s_raw == pytest.approx(-4.0)


def _dense_points(lane, samples):
    s_grid = np.linspace(0.0, lane.arc_length, samples)
    seg_idx = np.clip(np.searchsorted(lane.cum_lengths, s_grid, side="right") - 1, 0, len(lane.seg_lengths) - 1)
    t = (s_grid - lane.cum_lengths[seg_idx]) / lane.seg_lengths[seg_idx]
    p0 = lane.points[seg_idx, :2]
    p1 = lane.points[seg_idx + 1, :2]
    return s_grid, p0 + t[:, None] * (p1 - p0)


def _brute_force_nearest(p, lane, samples=10_000):
    s_grid, pts = _dense_points(lane, samples)
    d = np.hypot(pts[:, 0] - p.x, pts[:, 1] - p.y)
    i = int(np.argmin(d))
    return s_grid[i], d[i]


def test_projection_matches_brute_force(rng):
    for _ in range(25):
        lane = make_curved_lane(rng)
        for _ in range(8):
            p = random_pose(rng, span=20.0)
            proj = project_onto_polyline(p, lane)
            s_bf, d_bf = _brute_force_nearest(p, lane)
            grid = lane.arc_length / 9_999
            assert abs(proj.s - s_bf) < 1e-3 + grid
            d_ours = np.hypot(*(lane.point_at_arclength(proj.s) - np.array([p.x, p.y])))
            assert abs(d_ours - d_bf) < 1e-3


def test_projection_lat_matches_construction(rng):
    # place points at a known (s, lat) perpendicular to segment midpoints and
    # check the recovered lateral offset against the construction
    checked = 0
    for _ in range(25):
        lane = make_curved_lane(rng)
        for seg in range(len(lane.seg_lengths)):
            s = 0.5 * (lane.cum_lengths[seg] + lane.cum_lengths[seg + 1])
            lat = float(rng.uniform(-0.3, 0.3)) * lane.seg_lengths[seg]
            t = (lane.points[seg + 1, :2] - lane.points[seg, :2]) / lane.seg_lengths[seg]
            base = lane.point_at_arclength(s)
            p = Pose4(base[0] - lat * t[1], base[1] + lat * t[0], 0.0, 1.0)
            proj = project_onto_polyline(p, lane)
            if abs(proj.s - s) < 1e-6:  # still closest to the same segment
                assert abs(proj.lat - lat) < 1e-9
                checked += 1
    assert checked > 100


def test_vertex_tie_uses_following_segment():
    # right-angle corner: a point on the bisector beyond the corner projects
    # onto the shared vertex; heading must come from the second segment
    pts = np.array([[0.0, 0.0, 0.0, 1.0], [10.0, 0.0, 0.0, 1.0], [10.0, 10.0, 1.0, 0.0]])
    lane = LanePolyline(pts, 2.0, 1)
    p = Pose4.from_heading(11.0, -1.0, math.pi / 2)
    proj = project_onto_polyline(p, lane)
    assert proj.s == pytest.approx(10.0)
    assert proj.dheading == pytest.approx(0.0)  # aligned with the (vertical) second segment


def _aux(x, y, heading=0.0, speed=5.0, agent_type=AgentType.VEHICLE, length=4.0, width=2.0):
    return AgentAux(Pose4.from_heading(x, y, heading), AgentStatic(agent_type, length, width), speed)


def test_a2a_edge_self():
    a = _aux(3.0, 4.0, 0.3)
    feat = a2a_edge_feature(a, a)
    assert feat.shape == (10,)
    assert np.allclose(feat[:4], [0, 0, 0, 1], atol=1e-12)


def test_a2a_edge_ahead():
    a = _aux(0.0, 0.0)
    b = _aux(5.0, 0.0, speed=7.0, length=4.4, width=1.9)
    feat = a2a_edge_feature(a, b)
    assert np.allclose(feat[:4], [5, 0, 0, 1])
    assert np.allclose(feat[4:], [1, 0, 0, 4.4, 1.9, 7.0])


def test_a2l_edge_on_start():
    lane = make_lane(length=20.0)
    feat = a2l_edge_feature(_aux(0.0, 0.0), lane)
    assert feat.shape == (15,)
    assert np.allclose(feat[:4], [0, 0, 0, 1], atol=1e-12)
    assert feat[12] == pytest.approx(0.0)  # lat
    assert feat[13] == pytest.approx(0.0)  # s


def test_a2l_edge_right_of_midpoint():
    lane = make_lane(length=10.0)
    feat = a2l_edge_feature(_aux(5.0, -2.0), lane)
    assert feat[12] == pytest.approx(-2.0)
    assert feat[13] == pytest.approx(5.0)


def test_a2l_edge_rigid_invariance(rng):
    lane = make_curved_lane(rng)
    aux = _aux(2.0, 1.0, 0.4)
    base = a2l_edge_feature(aux, lane)
    for _ in range(20):
        t = random_pose(rng)
        lane2 = LanePolyline(transform_pose_array(t, lane.points), lane.half_width, lane.lane_id)
        aux2 = AgentAux(transform_pose(t, aux.pose), aux.static, aux.speed)
        assert np.max(np.abs(a2l_edge_feature(aux2, lane2) - base)) < 1e-9


def test_l2l_edge_identity_blocks():
    lane = make_lane(length=20.0)
    feat = l2l_edge_feature(lane, lane)
    assert feat.shape == (16,)
    assert np.allclose(feat[0:4], [0, 0, 0, 1], atol=1e-12)  # start -> start
    assert np.allclose(feat[12:16], [0, 0, 0, 1], atol=1e-12)  # end -> end


def test_l2l_edge_parallel_offset():
    l1 = make_lane(1, length=20.0, y=0.0)
    l2 = make_lane(2, length=20.0, y=3.5)
    feat = l2l_edge_feature(l1, l2).reshape(4, 4)
    assert np.allclose(np.abs(feat[:, 1]), 3.5)
    assert np.allclose(feat[:, 2], 0.0, atol=1e-12)  # no heading difference


def test_edge_features_deterministic(rng):
    lane = make_curved_lane(rng)
    aux1, aux2 = _aux(1.0, 2.0, 0.2), _aux(4.0, -1.0, -0.5, speed=3.0)
    assert np.array_equal(a2a_edge_feature(aux1, aux2), a2a_edge_feature(aux1, aux2))
    assert np.array_equal(a2l_edge_feature(aux1, lane), a2l_edge_feature(aux1, lane))
    assert np.array_equal(l2l_edge_feature(lane, lane), l2l_edge_feature(lane, lane))
