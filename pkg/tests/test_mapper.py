"""Occupancy grid, scan matcher, and pose graph tests.

The scan matcher is checked against an independently written brute-force
scorer, and the pose graph solver against randomly perturbed chains whose
exact optimum is known.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from cloudnav.mapper import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    L_CLAMP,
    KeyframeCandidate,
    OccupancyGrid,
    PoseGraph,
    StreamRegistration,
    export_pgm,
    integrate_scan,
    load_pgm,
    match_scan,
    merge_streams,
    rebuild_grid,
    should_add_keyframe,
)
from cloudnav.world import (
    GroundTruthWorld,
    LaserScan,
    Pose2D,
    ScanConfig,
    simulate_scan,
)


# ---------- helpers / oracles ----------

def box_world(size_m: float = 4.0, res: float = 0.05) -> GroundTruthWorld:
    n = int(round(size_m / res))
    occ = np.zeros((n, n), dtype=bool)
    occ[:2, :] = occ[-2:, :] = True
    occ[:, :2] = occ[:, -2:] = True
    return GroundTruthWorld(resolution=res, origin=Pose2D(0.0, 0.0, 0.0),
                            occ=occ, spawns={})


def make_scan(ranges, angle_min=-0.5, increment=None, count=None) -> LaserScan:
    ranges = np.asarray(ranges, dtype=float)
    if increment is None:
        n = count or len(ranges)
        increment = 1.0 / (n - 1) if n > 1 else 0.0
    return LaserScan(stamp=0.0, frame="test", angle_min=angle_min,
                     angle_increment=increment, ranges=ranges)


def brute_force_match(grid, scan, prior, window_xy, window_theta):
    """Reference matcher: plain loops, recomputed per candidate.

    Returns (best_score, best_pose or None-if-tied, candidate_count).
    """
    prob = 1.0 / (1.0 + np.exp(-grid.logodds.astype(np.float64)))
    res = grid.resolution
    n_t = int(round(window_xy / res))
    n_r = int(round(window_theta / 0.01))
    angles = [scan.angle_min + k * scan.angle_increment for k in range(len(scan.ranges))]
    results = []
    for k in range(-n_r, n_r + 1):
        th = prior.theta + k * 0.01
        for di in range(-n_t, n_t + 1):
            for dj in range(-n_t, n_t + 1):
                x = prior.x + dj * res
                y = prior.y + di * res
                vals = []
                for r_m, a in zip(scan.ranges, angles):
                    if not math.isfinite(r_m):
                        continue
                    rr = r_m + 0.5 * res
                    wx = x + rr * math.cos(th + a)
                    wy = y + rr * math.sin(th + a)
                    row = math.floor((wy - grid.origin_y) / res)
                    col = math.floor((wx - grid.origin_x) / res)
                    if 0 <= row < grid.height and 0 <= col < grid.width:
                        vals.append(float(prob[row, col]))
                    else:
                        vals.append(0.5)
                results.append((sum(vals) / len(vals), Pose2D(x, y, th)))
    best_score = max(s for s, _ in results)
    near = [p for s, p in results if s > best_score - 1e-9]
    unique = near[0] if len(near) == 1 else None
    return best_score, unique, len(results)


def random_chain(rng, n):
    """Ground-truth poses plus the exact consecutive relative measurements."""
    poses = [Pose2D(0.0, 0.0, 0.0)]
    for _ in range(n - 1):
        step = Pose2D(rng.uniform(0.2, 0.6), rng.uniform(-0.1, 0.1),
                      rng.uniform(-0.5, 0.5))
        poses.append(poses[-1].compose(step))
    rels = [poses[i].delta_to(poses[i + 1]) for i in range(n - 1)]
    return poses, rels


def dummy_scan() -> LaserScan:
    return make_scan([1.0, 1.2, 1.4])


# ---------- grid basics ----------

def test_single_beam_marks_ray_free_and_endpoint_occupied():
    grid = OccupancyGrid(0.05, origin_x=-1.0, origin_y=-1.0, width=64, height=64)
    scan = make_scan([1.0], angle_min=0.0, increment=0.0)
    integrate_scan(grid, Pose2D(0.0, 0.0, 0.0), scan)
    row = 20                      # y = 0 band
    hit_col = int((1.0 + 0.025 + 1.0) / 0.05)   # endpoint pushed half a cell
    assert grid.logodds[row, hit_col] == pytest.approx(0.85)
    for col in range(20, hit_col):
        assert grid.logodds[row, col] == pytest.approx(-0.4)
    assert grid.logodds[row, hit_col + 1] == 0.0


def test_no_return_beam_clears_to_range_max_without_hit():
    grid = OccupancyGrid(0.05, origin_x=-1.0, origin_y=-1.0, width=128, height=128)
    scan = make_scan([np.inf], angle_min=0.0, increment=0.0)
    integrate_scan(grid, Pose2D(0.0, 0.0, 0.0), scan, range_max=3.0)
    band = grid.logodds[20, :]
    assert (band <= 0.0).all()
    end_col = int((3.0 + 1.0) / 0.05)
    assert grid.logodds[20, end_col] == pytest.approx(-0.4)


def test_log_odds_saturate_at_clamp():
    grid = OccupancyGrid(0.05, origin_x=-1.0, origin_y=-1.0)
    scan = make_scan([1.0], angle_min=0.0, increment=0.0)
    for _ in range(10):
        integrate_scan(grid, Pose2D(0.0, 0.0, 0.0), scan)
    assert grid.logodds.max() == pytest.approx(L_CLAMP)
    for _ in range(15):
        integrate_scan(grid, Pose2D(0.0, 0.0, 0.0), scan)
    assert grid.logodds.min() == pytest.approx(-L_CLAMP)


def test_classification_thresholds():
    grid = OccupancyGrid(0.05)
    grid.logodds[0, 0] = 0.85          # one hit: p ~ 0.70 > 0.65
    grid.logodds[0, 1] = -0.4          # one miss: p ~ 0.40, still unknown band
    grid.logodds[0, 2] = -1.2          # three misses: p ~ 0.23 < 0.25
    grid.revision += 1
    cls = grid.classification()
    assert cls[0, 0] == OCCUPIED
    assert cls[0, 1] == UNKNOWN
    assert cls[0, 2] == FREE
    assert cls[1, 0] == UNKNOWN


def test_grid_grows_and_preserves_world_coordinates():
    grid = OccupancyGrid(0.05, origin_x=0.0, origin_y=0.0, width=32, height=32)
    r, c = grid.world_to_cell(0.525, 0.275)
    grid.logodds[r, c] = 2.5
    grid.revision += 1
    grid.ensure_contains([-5.0, 9.0], [-5.0, 9.0])
    assert grid.width >= 280 and grid.height >= 280
    r2, c2 = grid.world_to_cell(0.525, 0.275)
    assert grid.logodds[r2, c2] == pytest.approx(2.5)
    assert grid.world_to_cell(-4.9, -4.9)[0] >= 0


def test_growth_is_by_doubling():
    grid = OccupancyGrid(0.05, width=64, height=64)
    grid.ensure_contains([0.0, 4.0], [0.0, 0.5])
    assert grid.width % 64 == 0 and (grid.width // 64) & (grid.width // 64 - 1) == 0


def test_square_room_classification_matches_ground_truth():
    world = box_world(size_m=4.0, res=0.05)
    cfg = ScanConfig()
    grid = OccupancyGrid(0.05, origin_x=-0.5, origin_y=-0.5, width=128, height=128)
    poses = []
    for cx, cy in [(2.0, 2.0), (1.3, 1.3), (2.7, 2.7), (1.3, 2.7), (2.7, 1.3)]:
        for k in range(40):
            poses.append(Pose2D(cx, cy, -math.pi + k * 2 * math.pi / 40))
    for pose in poses:
        scan = simulate_scan(world, pose, cfg, rng=None)
        integrate_scan(grid, pose, scan, range_max=cfg.range_max)
    cls = grid.classification()
    checked = correct = 0
    for row in range(grid.height):
        for col in range(grid.width):
            if cls[row, col] == UNKNOWN:
                continue
            x, y = grid.cell_center(row, col)
            wr, wc = world.cell_of(x, y)
            truth_occ = bool(world.occ[wr, wc])
            checked += 1
            if (cls[row, col] == OCCUPIED) == truth_occ:
                correct += 1
    assert checked > 2000
    assert correct / checked >= 0.99


# ---------- scan matcher ----------

def sharpened_map_from(world, poses, cfg):
    grid = OccupancyGrid(0.05, origin_x=-0.5, origin_y=-0.5, width=128, height=128)
    for pose in poses:
        scan = simulate_scan(world, pose, cfg, rng=None)
        for _ in range(3):
            integrate_scan(grid, pose, scan, range_max=cfg.range_max)
    return grid


def test_match_agrees_with_brute_force_on_random_grids():
    rng = np.random.default_rng(7)
    for case in range(20):
        grid = OccupancyGrid(0.05, origin_x=-2.0, origin_y=-2.0, width=96, height=96)
        grid.logodds[:] = rng.uniform(-2.0, 2.0, size=grid.logodds.shape).astype(np.float32)
        grid.revision += 1
        n = 24
        ranges = rng.uniform(0.5, 2.0, size=n)
        ranges[rng.random(n) < 0.15] = np.inf
        scan = make_scan(ranges, angle_min=-0.5, increment=1.0 / (n - 1))
        prior = Pose2D(rng.uniform(-0.3, 0.3) + 0.0137, rng.uniform(-0.3, 0.3) + 0.0071,
                       rng.uniform(-math.pi, math.pi))
        got = match_scan(grid, scan, prior, window_xy=0.1, window_theta=0.05)
        want_score, want_pose, count = brute_force_match(grid, scan, prior, 0.1, 0.05)
        assert count == 11 * 5 * 5
        assert got.score == pytest.approx(want_score, abs=1e-9)
        if want_pose is not None:
            assert got.corrected.x == pytest.approx(want_pose.x, abs=1e-12)
            assert got.corrected.y == pytest.approx(want_pose.y, abs=1e-12)
            assert got.corrected.theta == pytest.approx(want_pose.theta, abs=1e-12)


def test_match_from_true_prior_is_not_accepted_but_stays_put():
    world = box_world(4.0)
    cfg = ScanConfig()
    true_pose = Pose2D(1.2, 1.1, 0.7)
    grid = sharpened_map_from(world, [true_pose], cfg)
    scan = simulate_scan(world, true_pose, cfg, rng=None)
    res = match_scan(grid, scan, true_pose)
    assert res.score >= 0.55
    assert res.corrected.distance_to(true_pose) <= 0.05 + 1e-9
    assert not res.accepted    # no improvement over an already-correct prior


def test_match_recovers_translated_prior():
    world = box_world(4.0)
    cfg = ScanConfig()
    true_pose = Pose2D(1.2, 1.1, 0.7)
    grid = sharpened_map_from(world, [true_pose, Pose2D(2.6, 2.4, -2.2)], cfg)
    scan = simulate_scan(world, true_pose, cfg, rng=None)
    prior = Pose2D(true_pose.x + 0.10, true_pose.y - 0.05, true_pose.theta + 0.04)
    res = match_scan(grid, scan, prior)
    assert res.accepted
    assert abs(res.corrected.x - true_pose.x) <= 0.05 + 1e-9
    assert abs(res.corrected.y - true_pose.y) <= 0.05 + 1e-9
    assert abs(res.corrected.theta - true_pose.theta) <= 0.01 + 1e-9


def test_degenerate_window_returns_prior_unaccepted():
    grid = OccupancyGrid(0.05)
    scan = make_scan([1.0, 1.5])
    prior = Pose2D(0.3, 0.2, 0.1)
    res = match_scan(grid, scan, prior, window_xy=0.0, window_theta=0.0)
    assert res.corrected == prior
    assert not res.accepted


def test_keyframe_gating():
    base = Pose2D(1.0, 1.0, 0.5)
    assert should_add_keyframe(None, base)
    assert not should_add_keyframe(base, Pose2D(1.1, 1.0, 0.5))
    assert should_add_keyframe(base, Pose2D(1.31, 1.0, 0.5))
    assert should_add_keyframe(base, Pose2D(1.0, 1.0, 0.81))
    assert not should_add_keyframe(base, Pose2D(1.2, 1.2, 0.4))


# ---------- pose graph ----------

def test_consistent_chain_has_zero_residual_and_optimize_is_noop():
    rng = np.random.default_rng(3)
    poses, rels = random_chain(rng, 6)
    g = PoseGraph()
    for i, p in enumerate(poses):
        g.add_keyframe("r1", float(i), p, dummy_scan(), anchor=(i == 0))
    for i, rel in enumerate(rels):
        g.add_edge(i, i + 1, rel)
    assert g.residual() <= 1e-18
    report = g.optimize()
    assert report.final_residual <= 1e-12
    for i, p in enumerate(poses):
        assert g.keyframes[i].pose.distance_to(p) <= 1e-9


def test_perturbed_chains_recover_to_tolerance():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 9))
        poses, rels = random_chain(rng, n)
        g = PoseGraph()
        for i, p in enumerate(poses):
            if i == 0:
                g.add_keyframe("r1", float(i), p, dummy_scan(), anchor=True)
            else:
                noisy = Pose2D(p.x + rng.normal(0, 0.1), p.y + rng.normal(0, 0.1),
                               p.theta + rng.normal(0, 0.1))
                g.add_keyframe("r1", float(i), noisy, dummy_scan())
        for i, rel in enumerate(rels):
            g.add_edge(i, i + 1, rel)
        report = g.optimize()
        assert report.final_residual <= 1e-6, f"seed {seed}"
        for a, b in zip(report.residuals, report.residuals[1:]):
            assert b <= a + 1e-12
        for i, p in enumerate(poses):
            assert g.keyframes[i].pose.distance_to(p) <= 1e-3


def test_loop_closure_edge_pulls_square_back_into_shape():
    # square path with an explicit closing edge; corners knocked out of place
    corners = [Pose2D(0, 0, 0), Pose2D(2, 0, math.pi / 2), Pose2D(2, 2, math.pi),
               Pose2D(0, 2, -math.pi / 2)]
    rels = [corners[i].delta_to(corners[(i + 1) % 4]) for i in range(4)]
    rng = np.random.default_rng(11)
    g = PoseGraph()
    for i, p in enumerate(corners):
        if i == 0:
            g.add_keyframe("r1", float(i), p, dummy_scan(), anchor=True)
        else:
            g.add_keyframe("r1", float(i),
                           Pose2D(p.x + rng.normal(0, 0.2), p.y + rng.normal(0, 0.2),
                                  p.theta + rng.normal(0, 0.15)),
                           dummy_scan())
    for i in range(4):
        g.add_edge(i, (i + 1) % 4, rels[i])
    report = g.optimize()
    assert report.final_residual <= 1e-6
    for i, p in enumerate(corners):
        assert g.keyframes[i].pose.distance_to(p) <= 1e-3


def test_optimize_requires_an_anchor():
    g = PoseGraph()
    g.add_keyframe("r1", 0.0, Pose2D(0, 0, 0), dummy_scan())
    g.add_keyframe("r1", 1.0, Pose2D(1, 0, 0), dummy_scan())
    g.add_edge(0, 1, Pose2D(1, 0, 0))
    with pytest.raises(ValueError):
        g.optimize()


def test_edge_endpoints_validated():
    g = PoseGraph()
    g.add_keyframe("r1", 0.0, Pose2D(0, 0, 0), dummy_scan(), anchor=True)
    with pytest.raises(ValueError):
        g.add_edge(0, 3, Pose2D(1, 0, 0))
    with pytest.raises(ValueError):
        g.add_edge(0, 0, Pose2D(0, 0, 0))


def test_loop_candidates_respect_gap_and_radius():
    g = PoseGraph()
    for i in range(15):
        # walk out and come back near the start
        x = i * 0.4 if i <= 7 else (14 - i) * 0.4
        g.add_keyframe("r1", float(i), Pose2D(x, 0.0, 0.0), dummy_scan(), anchor=(i == 0))
    last = g.keyframes[-1]          # back at x = 0
    ids = {kf.node_id for kf in g.loop_candidates(last)}
    assert 0 in ids and 1 in ids and 2 in ids
    assert all(last.node_id - i >= 10 for i in ids)
    assert all(g.keyframes[i].pose.distance_to(last.pose) <= 1.0 for i in ids)


# ---------- stream merging & rebuild ----------

def scan_stream(world, cfg, poses, t0=0.0, dt=0.5):
    out = []
    for k, pose in enumerate(poses):
        scan = simulate_scan(world, pose, cfg, rng=None)
        out.append((t0 + k * dt, pose, scan))
    return out


def test_rebuild_matches_incremental_integration():
    world = box_world(4.0)
    cfg = ScanConfig()
    poses = [Pose2D(1.0 + 0.3 * k, 1.0, 0.0) for k in range(5)]
    g = PoseGraph()
    for i, (t, pose, scan) in enumerate(scan_stream(world, cfg, poses)):
        g.add_keyframe("r1", t, pose, scan, anchor=(i == 0))
    rebuilt = rebuild_grid(g, 0.05, range_max=cfg.range_max)
    manual = OccupancyGrid(0.05, origin_x=poses[0].x - 1.6, origin_y=poses[0].y - 1.6)
    for t, pose, scan in scan_stream(world, cfg, poses):
        integrate_scan(manual, pose, scan, range_max=cfg.range_max)
    assert rebuilt.logodds.shape == manual.logodds.shape
    assert np.array_equal(rebuilt.logodds, manual.logodds)
    assert rebuilt.origin_x == manual.origin_x


def test_merge_interleaves_by_stamp_and_anchors_each_robot_once():
    world = box_world(4.0)
    cfg = ScanConfig()
    a = [KeyframeCandidate("r1", t, p, s) for t, p, s in
         scan_stream(world, cfg, [Pose2D(1.0 + 0.3 * k, 1.2, 0.0) for k in range(4)], t0=0.0)]
    b = [KeyframeCandidate("r2", t, p, s) for t, p, s in
         scan_stream(world, cfg, [Pose2D(2.8 - 0.3 * k, 2.8, math.pi) for k in range(4)], t0=0.25)]
    regs = {
        "r1": StreamRegistration("r1", Pose2D(0, 0, 0), 0.0),
        "r2": StreamRegistration("r2", Pose2D(0, 0, 0), 0.0),
    }
    graph, grid, rejected = merge_streams({"r1": a, "r2": b}, regs)
    assert not rejected
    assert [kf.robot for kf in graph.keyframes] == ["r1", "r2"] * 4
    stamps = [kf.stamp for kf in graph.keyframes]
    assert stamps == sorted(stamps)
    anchored_robots = {graph.keyframes[i].robot for i in graph.anchors}
    assert anchored_robots == {"r1", "r2"}
    assert len(graph.anchors) == 2
    # edges never cross robots
    for e in graph.edges:
        assert graph.keyframes[e.i].robot == graph.keyframes[e.j].robot
    assert (grid.classification() != UNKNOWN).sum() > 0


def test_merge_rejects_unregistered_robots():
    world = box_world(4.0)
    cfg = ScanConfig()
    b = [KeyframeCandidate("r2", t, p, s) for t, p, s in
         scan_stream(world, cfg, [Pose2D(2.0, 2.0, 0.0)])]
    graph, grid, rejected = merge_streams({"r2": b}, {})
    assert len(graph.keyframes) == 0
    assert len(rejected) == 1
    assert rejected[0].reason == "robot frame not registered"


def test_merge_rejects_keyframes_before_registration_time():
    world = box_world(4.0)
    cfg = ScanConfig()
    b = [KeyframeCandidate("r2", t, p, s) for t, p, s in
         scan_stream(world, cfg, [Pose2D(2.0, 2.0, 0.0)] * 5, t0=0.0, dt=1.0)]
    regs = {"r2": StreamRegistration("r2", Pose2D(0, 0, 0), registered_at=2.5)}
    graph, grid, rejected = merge_streams({"r2": b}, regs)
    assert len(graph.keyframes) == 2          # stamps 3.0 and 4.0
    assert len(rejected) == 3
    assert {r.reason for r in rejected} == {"before localization convergence"}


def test_merge_applies_frame_registration_transform():
    world = box_world(4.0)
    cfg = ScanConfig()
    true_pose = Pose2D(2.0, 2.0, 0.5)
    scan = simulate_scan(world, true_pose, cfg, rng=None)
    odom_pose = Pose2D(0.0, 0.0, 0.0)          # robot thinks it is at its own origin
    reg = StreamRegistration("r2", true_pose, 0.0)   # shared = reg ∘ odom
    graph, grid, rejected = merge_streams(
        {"r2": [KeyframeCandidate("r2", 1.0, odom_pose, scan)]}, {"r2": reg})
    assert not rejected
    assert graph.keyframes[0].pose.distance_to(true_pose) <= 1e-12


# ---------- export ----------

def test_pgm_export_all_unknown_two_by_two():
    grid = OccupancyGrid(0.05, width=2, height=2)
    data, meta = export_pgm(grid)
    assert data == b"P5\n2 2\n255\n" + bytes([205, 205, 205, 205])
    assert "resolution: 0.05" in meta


def test_pgm_round_trip_preserves_classification():
    rng = np.random.default_rng(5)
    grid = OccupancyGrid(0.1, origin_x=-1.5, origin_y=2.0, width=16, height=8)
    grid.logodds[:] = rng.uniform(-4, 4, size=grid.logodds.shape).astype(np.float32)
    grid.revision += 1
    data, meta = export_pgm(grid)
    cls, res, origin = load_pgm(data, meta)
    assert np.array_equal(cls, grid.classification())
    assert res == pytest.approx(0.1)
    assert origin == (pytest.approx(-1.5), pytest.approx(2.0))


def test_pgm_top_row_is_highest_y():
    grid = OccupancyGrid(0.05, width=2, height=2)
    grid.logodds[1, 0] = 4.0        # occupied at high y, low x
    grid.revision += 1
    data, _ = export_pgm(grid)
    pixels = data[len(b"P5\n2 2\n255\n"):]
    assert pixels[0] == 0           # first byte of the file is the top-left
    assert pixels[2] == 205
