import math

import numpy as np
import pytest
import torch

from scenemodes.modes import (
    CoincidentAgents,
    HomotopyClass,
    PairwiseA2L,
    SceneMode,
    a2l_margin,
    angular_distance,
    enumerate_scene_modes,
    extract_gtsm,
    homotopy_class,
    homotopy_margin,
    pairwise_a2l,
    sm_cardinality,
    unitary_a2l,
)
from scenemodes.scene import LaneGraph, Pose4
from scenemodes.synth import ScenarioTemplate, TemplateKind, gen_scene

from conftest import const_track, make_lane, simple_scene

THETA = math.pi / 6


def dense_winding(xy1, xy2, upsample=200):
    """Oracle: winding via densely interpolated bearings (no wrap jumps)."""
    xy1, xy2 = np.asarray(xy1, float), np.asarray(xy2, float)
    t = np.arange(len(xy1))
    tf = np.linspace(0, len(xy1) - 1, (len(xy1) - 1) * upsample + 1)
    d = np.stack(
        [np.interp(tf, t, xy1[:, k]) - np.interp(tf, t, xy2[:, k]) for k in range(2)], axis=1
    )
    bearing = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    return bearing[-1] - bearing[0]


def test_angular_distance_parallel_motion():
    t = np.linspace(0, 5, 12)
    xy1 = np.stack([t, np.zeros_like(t)], axis=1)
    xy2 = xy1 + np.array([2.0, 3.0])
    assert angular_distance(xy1, xy2) == pytest.approx(0.0, abs=1e-12)


def test_angular_distance_full_orbit():
    ang = np.linspace(0, 2 * math.pi, 65)  # 64 steps counterclockwise
    orbit = np.stack([5 * np.cos(ang), 5 * np.sin(ang)], axis=1)
    center = np.zeros_like(orbit)
    assert angular_distance(orbit, center) == pytest.approx(2 * math.pi, abs=1e-6)
    assert angular_distance(center, orbit) == pytest.approx(2 * math.pi, abs=1e-6)


def test_angular_distance_symmetry(rng):
    for _ in range(100):
        xy1 = rng.uniform(-20, 20, (10, 2)).cumsum(axis=0)
        xy2 = xy1 + rng.uniform(1.0, 5.0, 2) + rng.uniform(-0.5, 0.5, (10, 2))
        assert abs(angular_distance(xy1, xy2) - angular_distance(xy2, xy1)) < 1e-9


def test_angular_distance_coincident_raises():
    xy = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(CoincidentAgents):
        angular_distance(xy, xy + 1e-9)


def test_angular_distance_masked_frames():
    ang = np.linspace(0, math.pi, 9)
    orbit = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    center = np.zeros_like(orbit)
    valid = np.ones(9, dtype=bool)
    valid[3] = False  # dropping one frame keeps the half turn
    assert angular_distance(orbit, center, valid) == pytest.approx(math.pi, abs=1e-9)


def test_angular_distance_matches_dense_oracle(rng):
    for _ in range(50):
        xy1 = np.cumsum(rng.uniform(-1.5, 2.0, (13, 2)), axis=0)
        offset = rng.uniform(3.0, 8.0, 2)
        xy2 = np.cumsum(rng.uniform(-1.5, 2.0, (13, 2)), axis=0) + offset
        try:
            ours = angular_distance(xy1, xy2)
        except CoincidentAgents:
            continue
        ref = dense_winding(xy1, xy2)
        # identical unless a single step rotates by more than pi (rare; skip)
        if np.all(np.abs(np.diff(np.unwrap(np.arctan2(*(xy1 - xy2).T[::-1])))) < 3.0):
            assert ours == pytest.approx(ref, abs=1e-9)


def test_homotopy_class_branches():
    assert homotopy_class(0.0, THETA) is HomotopyClass.S
    assert homotopy_class(-(THETA + 0.01), THETA) is HomotopyClass.CW
    assert homotopy_class(THETA + 0.5, THETA) is HomotopyClass.CCW
    # boundary: closed upper bound goes to CCW, lower stays S
    assert homotopy_class(THETA, THETA) is HomotopyClass.CCW
    assert homotopy_class(-THETA, THETA) is HomotopyClass.S


def test_homotopy_margin_examples():
    m = homotopy_margin(0.0, THETA)
    assert np.allclose(m, [-THETA, THETA, -THETA])
    m = homotopy_margin(2 * THETA, THETA)
    assert np.allclose(m, [-3 * THETA, -THETA, THETA])


def test_homotopy_margin_single_positive(rng):
    for _ in range(500):
        d = rng.uniform(-4, 4)
        if abs(abs(d) - THETA) < 1e-9:
            continue
        m = homotopy_margin(d, THETA)
        assert int((m > 0).sum()) == 1
        assert HomotopyClass(int(np.argmax(m))) is homotopy_class(d, THETA)


def test_pairwise_a2l_decision_tree():
    lane = make_lane(length=20.0, half_width=2.0)
    on = Pose4.from_heading(10.0, 0.5, 0.1)
    assert pairwise_a2l(on, lane) is PairwiseA2L.ON
    rev = Pose4.from_heading(10.0, 0.0, math.pi)
    assert pairwise_a2l(rev, lane) is PairwiseA2L.MISALIGN
    left = Pose4.from_heading(10.0, 4.0, 0.0)  # 2x half width left
    assert pairwise_a2l(left, lane) is PairwiseA2L.LEFTOF
    right = Pose4.from_heading(10.0, -3.0, 0.0)
    assert pairwise_a2l(right, lane) is PairwiseA2L.RIGHTOF
    far = Pose4.from_heading(10.0, 7.0, 0.0)  # beyond 3x half width
    assert pairwise_a2l(far, lane) is PairwiseA2L.NOTON
    ahead = Pose4.from_heading(25.0, 0.0, 0.0)
    assert pairwise_a2l(ahead, lane) is PairwiseA2L.AHEAD
    behind = Pose4.from_heading(-3.0, 1.0, 0.0)
    assert pairwise_a2l(behind, lane) is PairwiseA2L.BEHIND


def test_a2l_margin_formula():
    lane = make_lane(length=20.0, half_width=2.0)
    assert a2l_margin(Pose4.from_heading(10.0, 0.0, 0.0), lane) == pytest.approx(2.0)
    assert a2l_margin(Pose4.from_heading(10.0, 3.0, 0.0), lane) == pytest.approx(-1.0)
    assert a2l_margin(Pose4.from_heading(1.0, 0.0, 0.0), lane) == pytest.approx(1.0)


def test_a2l_margin_gradient_matches_fd(rng):
    from scenemodes.model.tgeom import lane_margin

    lane = make_lane(length=30.0, half_width=2.0)
    pts = torch.tensor(lane.points)
    mask = torch.ones(pts.shape[0], dtype=torch.bool)
    hw = torch.tensor(lane.half_width, dtype=torch.float64)
    checked = 0
    for _ in range(100):
        x, y = rng.uniform(2, 28), rng.uniform(-4, 4)
        if abs(abs(y) - 0.0) < 0.2:  # keep away from the lat kink at 0
            continue
        xy = torch.tensor([x, y], dtype=torch.float64, requires_grad=True)
        pose = torch.cat([xy, torch.tensor([0.0, 1.0])])
        m = lane_margin(pose, pts, mask, hw)
        (g,) = torch.autograd.grad(m, xy)
        h = 1e-5
        for k in range(2):
            dp = np.array([x, y], dtype=float)
            dm = dp.copy()
            dp[k] += h
            dm[k] -= h
            f = lambda v: a2l_margin(Pose4(v[0], v[1], 0.0, 1.0), lane)
            fd = (f(dp) - f(dm)) / (2 * h)
            if abs(fd) > 1e-6:
                assert g[k].item() == pytest.approx(fd, rel=1e-4, abs=1e-6)
        checked += 1
    assert checked > 50


def test_unitary_a2l_single_lane():
    lane = make_lane(length=20.0, half_width=2.0)
    graph = LaneGraph([lane])
    idx, margin = unitary_a2l(Pose4.from_heading(10.0, 0.0, 0.0), graph)
    assert idx == 1
    assert margin == pytest.approx(2.0)


def test_unitary_a2l_null():
    graph = LaneGraph([make_lane(length=20.0)])
    idx, margin = unitary_a2l(Pose4.from_heading(10.0, 50.0, 0.0), graph)
    assert idx == 0
    assert margin < 0


def test_unitary_a2l_tie_lowest_id():
    # equidistant between two identical parallel lanes: same margin, same |lat|
    graph = LaneGraph([make_lane(1, length=20.0, y=0.0), make_lane(2, length=20.0, y=2.0)])
    idx, _ = unitary_a2l(Pose4.from_heading(10.0, 1.0, 0.0), graph)
    assert idx == 1


def test_extract_gtsm_single_agent():
    scene = simple_scene(tracks=[const_track(2.0, 0.0)])
    mode, margins = extract_gtsm(scene, THETA)
    assert len(mode.a2l) == 1
    assert mode.a2a == ()
    assert margins.homotopy.shape == (0, 3)


def test_extract_gtsm_parallel_is_static():
    scene = simple_scene()
    mode, _ = extract_gtsm(scene, THETA)
    assert mode.a2a == (HomotopyClass.S,)
    assert mode.a2l == (1, 2)


def test_extract_gtsm_overtake_matches_oracle():
    t = ScenarioTemplate(TemplateKind.OVERTAKE)
    for seed in range(30):
        scene = gen_scene(t, seed)
        mode, _ = extract_gtsm(scene, THETA)
        a, b = scene.agents[0], scene.agents[1]
        xy1 = np.vstack([a.history.xy[-1:], a.future.xy])
        xy2 = np.vstack([b.history.xy[-1:], b.future.xy])
        ref = dense_winding(xy1, xy2)
        assert mode.a2a[0] is homotopy_class(ref, THETA)


def test_sm_cardinality_matches_enumeration():
    assert sm_cardinality(1, 0) == 1
    assert sm_cardinality(2, 2) == 27
    assert sm_cardinality(3, 3) == 1728
    for n in range(1, 4):
        for m in range(0, 4):
            assert sm_cardinality(n, m) == sum(1 for _ in enumerate_scene_modes(n, m))


def test_scene_mode_pair_count_validation():
    with pytest.raises(ValueError):
        SceneMode((1, 2), ())
