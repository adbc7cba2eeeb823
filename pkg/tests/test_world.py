"""World model: file format, kinematics, collision, and raycast behaviour."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudnav.rng import seeded_stream
from cloudnav.world import (
    GroundTruthWorld,
    Pose2D,
    RobotParams,
    ScanConfig,
    Twist,
    WorldFormatError,
    bundled_world_path,
    load_world,
    make_robot,
    norm_angle,
    parse_world,
    render_camera_strip,
    simulate_scan,
    step_robot,
)


def open_box_world(size_m: float = 8.0, res: float = 0.05) -> GroundTruthWorld:
    n = int(size_m / res)
    occ = np.zeros((n, n), dtype=bool)
    occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    return GroundTruthWorld(resolution=res, origin=Pose2D(0, 0, 0), occ=occ)


# ---------- poses ----------

@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-50, 50))
def test_pose_theta_always_normalised(x, y, theta):
    p = Pose2D(x, y, theta)
    assert -math.pi < p.theta <= math.pi


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10),
       st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
@settings(max_examples=200)
def test_pose_compose_inverse_roundtrip(ax, ay, at, bx, by, bt):
    a = Pose2D(ax, ay, at)
    b = Pose2D(bx, by, bt)
    back = a.compose(b).compose(b.inverse())
    assert math.isclose(back.x, a.x, abs_tol=1e-9)
    assert math.isclose(back.y, a.y, abs_tol=1e-9)
    assert abs(norm_angle(back.theta - a.theta)) < 1e-9


def test_delta_to_recovers_relative_pose():
    a = Pose2D(1.0, 2.0, 0.5)
    d = Pose2D(0.3, -0.1, 0.2)
    b = a.compose(d)
    rel = a.delta_to(b)
    assert math.isclose(rel.x, d.x, abs_tol=1e-12)
    assert math.isclose(rel.y, d.y, abs_tol=1e-12)
    assert math.isclose(rel.theta, d.theta, abs_tol=1e-12)


def test_pose_rejects_non_finite():
    with pytest.raises(ValueError):
        Pose2D(float("nan"), 0.0, 0.0)


# ---------- world files ----------

def test_bundled_corridor_dimensions_follow_from_its_text():
    text = bundled_world_path().read_text()
    bitmap = [line for line in text.splitlines() if line and set(line) <= {"#", "."}]
    assert len(bitmap) == 60
    assert all(len(row) == 480 for row in bitmap)

    world = load_world(bundled_world_path())
    assert world.width == 480 and world.height == 60
    assert world.resolution == 0.05
    assert math.isclose(world.width * world.resolution, 24.0)
    assert math.isclose(world.height * world.resolution, 3.0)
    assert set(world.spawns) == {"entrance", "middle"}
    for pose in world.spawns.values():
        assert world.is_free(pose.x, pose.y)


def test_unclosed_world_rejected():
    text = "resolution: 0.1\n...\n...\n...\n"
    with pytest.raises(WorldFormatError, match="not closed"):
        parse_world(text)


def test_empty_world_rejected():
    with pytest.raises(WorldFormatError):
        parse_world("")


def test_garbage_line_rejected_with_location():
    text = "resolution: 0.1\nwat\n###\n#.#\n###\n"
    with pytest.raises(WorldFormatError, match=":2"):
        parse_world(text)


def test_ragged_bitmap_rejected():
    text = "resolution: 0.1\n###\n#.##\n###\n"
    with pytest.raises(WorldFormatError, match="width"):
        parse_world(text)


def test_spawn_in_wall_rejected():
    text = "resolution: 0.1\nspawn a: 0.05 0.05 0\n###\n#.#\n###\n"
    with pytest.raises(WorldFormatError, match="spawn"):
        parse_world(text)


def test_first_bitmap_line_is_top_row():
    text = "resolution: 1.0\n####\n#..#\n####\n"
    world = parse_world(text)
    assert world.height == 3 and world.width == 4
    assert world.is_free(1.5, 1.5) and world.is_free(2.5, 1.5)
    assert not world.is_free(0.5, 0.5)


# ---------- kinematics ----------

def test_straight_drive_advances_exactly_without_noise():
    world = open_box_world()
    params = RobotParams(odom_noise_trans=0.0, odom_noise_rot=0.0)
    state = make_robot("r", Pose2D(2.0, 4.0, 0.0))
    for _ in range(10):
        state = step_robot(world, state, params, Twist(0.5, 0.0), dt=0.1)
    assert math.isclose(state.true_pose.x, 2.5, abs_tol=1e-9)
    assert math.isclose(state.true_pose.y, 4.0, abs_tol=1e-9)
    assert math.isclose(state.distance_travelled, 0.5, abs_tol=1e-9)
    assert math.isclose(state.odom_pose.x, state.true_pose.x, abs_tol=1e-12)
    assert math.isclose(state.odom_pose.y, state.true_pose.y, abs_tol=1e-12)


def test_drive_into_wall_blocks_translation():
    world = open_box_world()
    params = RobotParams(odom_noise_trans=0.0, odom_noise_rot=0.0)
    # wall face at x = 7.95 (interior side of the right border)
    state = make_robot("r", Pose2D(7.65, 4.0, 0.0))
    poses = []
    for _ in range(40):
        state = step_robot(world, state, params, Twist(0.65, 0.0), dt=0.1)
        poses.append(state.true_pose.x)
    assert poses[-1] == poses[-5]                       # stopped advancing
    assert poses[-1] < 7.95 - params.footprint_radius + 0.1
    blocked_state = step_robot(world, state, params, Twist(0.65, 0.0), dt=0.1)
    assert blocked_state.distance_travelled == state.distance_travelled
    assert blocked_state.twist.v == 0.0


def test_blocked_step_still_applies_rotation():
    world = open_box_world()
    params = RobotParams(odom_noise_trans=0.0, odom_noise_rot=0.0)
    state = make_robot("r", Pose2D(7.70, 4.0, 0.0))
    for _ in range(30):
        state = step_robot(world, state, params, Twist(0.65, 0.0), dt=0.1)
    turned = step_robot(world, state, params, Twist(0.65, 0.5), dt=0.1)
    assert math.isclose(turned.true_pose.theta, state.true_pose.theta + 0.05, abs_tol=1e-12)


def test_command_clamped_to_limits():
    world = open_box_world()
    params = RobotParams(odom_noise_trans=0.0, odom_noise_rot=0.0)
    state = make_robot("r", Pose2D(4.0, 4.0, 0.0))
    state = step_robot(world, state, params, Twist(99.0, -99.0), dt=0.1)
    assert state.twist == Twist(params.v_max, -params.w_max)


def test_zero_noise_odometry_tracks_truth_through_arbitrary_commands():
    world = open_box_world()
    params = RobotParams(odom_noise_trans=0.0, odom_noise_rot=0.0)
    rng = seeded_stream(7, "cmds")
    state = make_robot("r", Pose2D(4.0, 4.0, 1.0))
    for _ in range(200):
        cmd = Twist(float(rng.uniform(-0.7, 0.7)), float(rng.uniform(-1.2, 1.2)))
        state = step_robot(world, state, params, cmd, dt=0.1, rng=rng)
    assert math.isclose(state.odom_pose.x, state.true_pose.x, abs_tol=1e-9)
    assert math.isclose(state.odom_pose.y, state.true_pose.y, abs_tol=1e-9)
    assert abs(norm_angle(state.odom_pose.theta - state.true_pose.theta)) < 1e-9


def test_noisy_odometry_drifts_but_truth_is_exact():
    world = open_box_world()
    params = RobotParams()     # default drift levels
    rng = seeded_stream(3, "odom")
    state = make_robot("r", Pose2D(1.0, 4.0, 0.0))
    for _ in range(50):
        state = step_robot(world, state, params, Twist(0.5, 0.0), dt=0.1, rng=rng)
    assert math.isclose(state.true_pose.x, 3.5, abs_tol=1e-9)
    assert state.odom_pose.x != state.true_pose.x


def test_distance_monotone_and_bounded_by_vmax():
    world = open_box_world()
    params = RobotParams()
    rng = seeded_stream(11, "cmds2")
    state = make_robot("r", Pose2D(4.0, 4.0, 0.0))
    prev = 0.0
    for _ in range(100):
        cmd = Twist(float(rng.uniform(-1.0, 1.0)), float(rng.uniform(-2.0, 2.0)))
        state = step_robot(world, state, params, cmd, dt=0.1, rng=rng)
        gained = state.distance_travelled - prev
        assert 0.0 <= gained <= params.v_max * 0.1 + 1e-12
        prev = state.distance_travelled


# ---------- scans ----------

def test_perpendicular_wall_range_is_exact_to_half_cell():
    world = open_box_world()
    cfg = ScanConfig(range_noise=0.0)
    # right wall interior face at x = 7.95; stand 1.0 m away
    scan = simulate_scan(world, Pose2D(6.95, 4.0, 0.0), cfg)
    centre = scan.ranges[len(scan.ranges) // 2]
    assert abs(centre - 1.0) <= world.resolution / 2 + 1e-9


def test_ranges_outside_band_become_inf():
    world = open_box_world()
    cfg = ScanConfig(range_noise=0.0)
    # middle of the box: nothing within 3 m in front
    scan = simulate_scan(world, Pose2D(4.0, 4.0, math.pi / 2), cfg)
    far = simulate_scan(world, Pose2D(4.0, 4.0, 0.0), cfg)
    assert np.isinf(scan.ranges).all() or (scan.ranges[np.isfinite(scan.ranges)] <= cfg.range_max).all()
    # too close: 0.2 m from the wall is below range_min
    near = simulate_scan(world, Pose2D(7.75, 4.0, 0.0), cfg)
    assert np.isinf(near.ranges[len(near.ranges) // 2])
    for s in (scan, far, near):
        finite = s.ranges[np.isfinite(s.ranges)]
        assert ((finite >= cfg.range_min) & (finite <= cfg.range_max)).all()


def test_scan_geometry_fields():
    world = open_box_world()
    cfg = ScanConfig(range_noise=0.0)
    scan = simulate_scan(world, Pose2D(4.0, 4.0, 0.0), cfg, stamp=1.5)
    assert scan.beam_count == cfg.beam_count
    assert math.isclose(scan.angle_min, -0.5)
    assert math.isclose(scan.angle_min + scan.angle_increment * (cfg.beam_count - 1), 0.5)
    assert scan.stamp == 1.5


def test_scan_noise_is_reproducible_per_stream():
    world = open_box_world()
    cfg = ScanConfig()
    a = simulate_scan(world, Pose2D(6.5, 4.0, 0.0), cfg, rng=seeded_stream(5, "s"))
    b = simulate_scan(world, Pose2D(6.5, 4.0, 0.0), cfg, rng=seeded_stream(5, "s"))
    assert np.array_equal(a.ranges, b.ranges)


# ---------- camera strip ----------

def test_camera_strip_clear_view_saturates_to_one():
    world = open_box_world()
    cfg = ScanConfig()
    strip = render_camera_strip(world, Pose2D(2.0, 4.0, 0.0), cfg, columns=320)
    assert len(strip) == 320
    assert ((strip >= 0.0) & (strip <= 1.0)).all()
    assert (strip == 1.0).all()     # nearest wall ahead is ~5.9 m away


def test_camera_strip_sees_wall_depth():
    world = open_box_world()
    cfg = ScanConfig()
    strip = render_camera_strip(world, Pose2D(6.45, 4.0, 0.0), cfg, columns=101)
    assert abs(strip[50] - 1.5 / cfg.range_max) < 0.02
    assert ((strip >= 0.0) & (strip <= 1.0)).all()
