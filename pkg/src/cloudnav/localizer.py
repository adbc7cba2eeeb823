"""Monte-Carlo localization against a cloud-built occupancy grid.

The likelihood field treats unknown cells as neutral rather than empty, so a
partially built map neither attracts nor repels particles that fall outside
the explored region; they only die once real evidence contradicts them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from .mapper import FREE, OCCUPIED, UNKNOWN, OccupancyGrid
from .world import LaserScan, Pose2D, norm_angle

DEFAULT_PARTICLES = 500
BEAM_SUBSAMPLE = 4
SUPPORT_MIN_OVERLAP = 0.25   # beams that must land on mapped cells to judge a view


@dataclass(frozen=True)
class MotionNoise:
    """Per-update particle diffusion: proportional terms track odometry error,
    the floors keep a stationary filter from collapsing onto a point.

    Defaults run a few times above the wheel odometry error model; much wider
    diffusion smears scan endpoints past the likelihood width and caps the
    filter's attainable accuracy."""
    trans: float = 0.06          # position std per metre moved
    rot: float = 0.05            # heading std per radian turned
    floor_trans: float = 0.004   # position std per update, metres
    floor_rot: float = 0.004     # heading std per update, radians


@dataclass(frozen=True)
class ConvergenceCriteria:
    pos_std: float = 0.15        # largest admissible position std, metres
    rot_std: float = 0.20        # largest admissible heading stddev, radians


@dataclass
class ParticleSet:
    poses: np.ndarray            # (N, 3): x, y, theta
    weights: np.ndarray          # (N,) normalized

    @property
    def size(self) -> int:
        return len(self.weights)

    def copy(self) -> ParticleSet:
        return ParticleSet(self.poses.copy(), self.weights.copy())


class LikelihoodField:
    """Distance-to-nearest-obstacle likelihood, one value per grid cell.

    Known cells score floor + (1 - floor) * exp(-d^2 / (2 sigma^2)); occupied
    cells are maximal. Unknown cells (and points off the grid) score a fixed
    neutral value.
    """

    def __init__(self, grid: OccupancyGrid, sigma_hit: float = 0.1,
                 floor: float = 0.05, unknown_value: float = 0.5) -> None:
        if not (0.0 < floor < 1.0 and 0.0 < unknown_value <= 1.0 and sigma_hit > 0):
            raise ValueError("bad likelihood field parameters")
        cls = grid.classification()
        occupied = cls == OCCUPIED
        if occupied.any():
            d_cells = distance_transform_edt(~occupied)
        else:
            d_cells = np.full(cls.shape, np.inf)
        d = d_cells * grid.resolution
        gauss = np.exp(-0.5 * (d / sigma_hit) ** 2)
        field = floor + (1.0 - floor) * gauss
        field[cls != FREE] = np.where(occupied[cls != FREE], 1.0, unknown_value)
        self.field = field
        self.known = cls != UNKNOWN
        self.unknown_value = unknown_value
        self.resolution = grid.resolution
        self.origin_x = grid.origin_x
        self.origin_y = grid.origin_y
        self.revision = grid.revision

    def value_at(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        rows = np.floor((ys - self.origin_y) / self.resolution).astype(np.int64)
        cols = np.floor((xs - self.origin_x) / self.resolution).astype(np.int64)
        h, w = self.field.shape
        inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        out = np.full(np.shape(xs), self.unknown_value, dtype=float)
        out[inside] = self.field[rows[inside], cols[inside]]
        return out

    def known_at(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """True where a point lands on a mapped (non-unknown) cell."""
        rows = np.floor((ys - self.origin_y) / self.resolution).astype(np.int64)
        cols = np.floor((xs - self.origin_x) / self.resolution).astype(np.int64)
        h, w = self.field.shape
        inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        out = np.zeros(np.shape(xs), dtype=bool)
        out[inside] = self.known[rows[inside], cols[inside]]
        return out


def free_cell_centers(grid: OccupancyGrid) -> np.ndarray:
    """(M, 2) world coordinates of all currently free cells."""
    rows, cols = np.nonzero(grid.classification() == FREE)
    xs = grid.origin_x + (cols + 0.5) * grid.resolution
    ys = grid.origin_y + (rows + 0.5) * grid.resolution
    return np.stack([xs, ys], axis=1)


def init_uniform(grid: OccupancyGrid, n: int, rng: np.random.Generator) -> ParticleSet:
    """Particles spread uniformly over the free cells with random headings."""
    centers = free_cell_centers(grid)
    if len(centers) == 0:
        raise ValueError("grid has no free cells to sample from")
    picks = rng.integers(0, len(centers), size=n)
    jitter = rng.uniform(-0.5, 0.5, size=(n, 2)) * grid.resolution
    poses = np.empty((n, 3))
    poses[:, :2] = centers[picks] + jitter
    poses[:, 2] = rng.uniform(-math.pi, math.pi, size=n)
    return ParticleSet(poses, np.full(n, 1.0 / n))


def predict(ps: ParticleSet, delta: Pose2D, noise: MotionNoise,
            rng: np.random.Generator) -> None:
    """Advance every particle by the odometry increment plus sampled noise."""
    ds = math.hypot(delta.x, delta.y)
    std_xy = noise.trans * ds + noise.floor_trans
    std_th = noise.rot * abs(delta.theta) + noise.floor_rot
    n = ps.size
    dx = delta.x + rng.normal(0.0, std_xy, size=n)
    dy = delta.y + rng.normal(0.0, std_xy, size=n)
    dth = delta.theta + rng.normal(0.0, std_th, size=n)
    c = np.cos(ps.poses[:, 2])
    s = np.sin(ps.poses[:, 2])
    ps.poses[:, 0] += c * dx - s * dy
    ps.poses[:, 1] += s * dx + c * dy
    ps.poses[:, 2] = np.arctan2(np.sin(ps.poses[:, 2] + dth),
                                np.cos(ps.poses[:, 2] + dth))


def update_weights(ps: ParticleSet, field: LikelihoodField, scan: LaserScan,
                   subsample: int = BEAM_SUBSAMPLE) -> bool:
    """Reweight particles against the scan. Returns False when every weight
    underflowed and the set was reset to uniform."""
    angles = scan.beam_angles()[::subsample]
    ranges = scan.ranges[::subsample]
    finite = np.isfinite(ranges)
    if not finite.any():
        return True          # nothing to condition on
    a = angles[finite]
    r = ranges[finite]
    theta = ps.poses[:, 2][:, None] + a[None, :]
    ex = ps.poses[:, 0][:, None] + r[None, :] * np.cos(theta)
    ey = ps.poses[:, 1][:, None] + r[None, :] * np.sin(theta)
    per_beam = field.value_at(ex, ey)
    ps.weights *= per_beam.prod(axis=1)
    peak = ps.weights.max()
    if not np.isfinite(peak) or peak <= 0.0:
        ps.weights[:] = 1.0 / ps.size
        return False
    ps.weights /= peak            # guard against progressive underflow
    ps.weights /= ps.weights.sum()
    return True


def effective_sample_size(ps: ParticleSet) -> float:
    return float(1.0 / np.square(ps.weights).sum())


def resample_systematic(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Low-variance systematic resampling; keeps the population size."""
    n = ps.size
    positions = (rng.uniform() + np.arange(n)) / n
    cumulative = np.cumsum(ps.weights)
    cumulative[-1] = 1.0
    idx = np.searchsorted(cumulative, positions)
    return ParticleSet(ps.poses[idx].copy(), np.full(n, 1.0 / n))


def inject_uniform(ps: ParticleSet, grid: OccupancyGrid, fraction: float,
                   rng: np.random.Generator) -> int:
    """Replace the lowest-weight slice with fresh uniform draws over the
    currently free cells; the global-localization escape hatch."""
    k = int(round(fraction * ps.size))
    if k <= 0:
        return 0
    centers = free_cell_centers(grid)
    if len(centers) == 0:
        return 0
    order = np.argsort(ps.weights)[:k]
    picks = rng.integers(0, len(centers), size=k)
    jitter = rng.uniform(-0.5, 0.5, size=(k, 2)) * grid.resolution
    ps.poses[order, :2] = centers[picks] + jitter
    ps.poses[order, 2] = rng.uniform(-math.pi, math.pi, size=k)
    mean_w = 1.0 / ps.size
    ps.weights[order] = mean_w
    ps.weights /= ps.weights.sum()
    return k


def scan_scores(poses: np.ndarray, field: LikelihoodField, scan: LaserScan,
                subsample: int = BEAM_SUBSAMPLE) -> np.ndarray:
    """Mean field value at the projected finite endpoints, one per pose row.

    Poses whose view has no finite beam score 1.0: no evidence, no penalty.
    """
    a = scan.beam_angles()[::subsample]
    r = scan.ranges[::subsample]
    finite = np.isfinite(r)
    if not finite.any():
        return np.ones(len(poses))
    a, r = a[finite], r[finite]
    theta = poses[:, 2][:, None] + a[None, :]
    ex = poses[:, 0][:, None] + r[None, :] * np.cos(theta)
    ey = poses[:, 1][:, None] + r[None, :] * np.sin(theta)
    return field.value_at(ex, ey).mean(axis=1)


def scan_consistency(pose: Pose2D, field: LikelihoodField, scan: LaserScan,
                     subsample: int = BEAM_SUBSAMPLE) -> float:
    """How well one pose explains the scan, in [0, 1]."""
    return float(scan_scores(np.array([[pose.x, pose.y, pose.theta]]),
                             field, scan, subsample)[0])


def scan_support(pose: Pose2D, field: LikelihoodField, scan: LaserScan,
                 subsample: int = BEAM_SUBSAMPLE) -> tuple[float, float]:
    """(consistency, overlap) of a pose judged only where the map has an
    opinion.

    Consistency is the mean field value over finite beams whose endpoints
    land on mapped cells; overlap is the fraction of finite beams that do.
    A view staring into unexplored space gets overlap ~0 and should simply
    not be judged, rather than scored neutral.
    """
    a = scan.beam_angles()[::subsample]
    r = scan.ranges[::subsample]
    finite = np.isfinite(r)
    if not finite.any():
        return 1.0, 0.0
    a, r = a[finite], r[finite]
    theta = pose.theta + a
    ex = pose.x + r * np.cos(theta)
    ey = pose.y + r * np.sin(theta)
    known = field.known_at(ex, ey)
    overlap = float(known.mean())
    if not known.any():
        return 1.0, 0.0
    consistency = float(field.value_at(ex[known], ey[known]).mean())
    return consistency, overlap


def inject_scored(ps: ParticleSet, grid: OccupancyGrid, field: LikelihoodField,
                  scan: LaserScan, k: int, rng: np.random.Generator,
                  n_positions: int = 128, n_headings: int = 8) -> int:
    """Replace the lowest-weight particles with the best of a batch of fresh
    candidates scored against the current scan.

    Uniform draws almost never land inside the narrow basin around the true
    pose; scoring a candidate batch against the live scan turns every
    distinctive view into a recovery opportunity.
    """
    if k <= 0:
        return 0
    centers = free_cell_centers(grid)
    if len(centers) == 0:
        return 0
    picks = rng.integers(0, len(centers), size=n_positions)
    jitter = rng.uniform(-0.5, 0.5, size=(n_positions, 2)) * grid.resolution
    pos = centers[picks] + jitter
    base = rng.uniform(-math.pi, math.pi, size=n_positions)
    cand = np.empty((n_positions * n_headings, 3))
    for h in range(n_headings):
        sl = slice(h * n_positions, (h + 1) * n_positions)
        cand[sl, :2] = pos
        ang = base + h * 2.0 * math.pi / n_headings
        cand[sl, 2] = np.arctan2(np.sin(ang), np.cos(ang))
    score = scan_scores(cand, field, scan)
    top = np.argsort(score)[-k:]
    order = np.argsort(ps.weights)[:k]
    ps.poses[order] = cand[top]
    ps.weights[order] = 1.0 / ps.size
    ps.weights /= ps.weights.sum()
    return k


class ConvergenceTracker:
    """Declares convergence only when the particle cloud is tight AND the
    estimate has kept explaining the scans for a whole window of updates.

    The covariance test alone is fooled by a tight cluster sitting in the
    wrong place; demanding sustained scan consistency across a window that
    spans a full look-around closes that hole.
    """

    def __init__(self, criteria: ConvergenceCriteria = ConvergenceCriteria(),
                 consistency_min: float = 0.80, window: int = 12) -> None:
        self.criteria = criteria
        self.consistency_min = consistency_min
        self.window = window
        self.updates = 0
        self.recent: list[float] = []

    def observe(self, cov: np.ndarray, consistency: float) -> bool:
        self.updates += 1
        self.recent.append(consistency)
        if len(self.recent) > self.window:
            self.recent.pop(0)
        if self.updates < self.window:
            return False
        if min(self.recent) < self.consistency_min:
            return False
        return has_converged(cov, self.criteria)


def estimate(ps: ParticleSet,
             criteria: ConvergenceCriteria = ConvergenceCriteria(),
             ) -> tuple[Pose2D, np.ndarray, bool]:
    """Weighted mean pose (circular in heading), 3x3 covariance, and whether
    the cloud is tight enough to call the pose estimated."""
    w = ps.weights
    mx = float(w @ ps.poses[:, 0])
    my = float(w @ ps.poses[:, 1])
    sin_m = float(w @ np.sin(ps.poses[:, 2]))
    cos_m = float(w @ np.cos(ps.poses[:, 2]))
    mth = math.atan2(sin_m, cos_m)
    dx = ps.poses[:, 0] - mx
    dy = ps.poses[:, 1] - my
    dth = np.arctan2(np.sin(ps.poses[:, 2] - mth), np.cos(ps.poses[:, 2] - mth))
    cov = np.zeros((3, 3))
    cov[0, 0] = float(w @ (dx * dx))
    cov[0, 1] = cov[1, 0] = float(w @ (dx * dy))
    cov[1, 1] = float(w @ (dy * dy))
    cov[0, 2] = cov[2, 0] = float(w @ (dx * dth))
    cov[1, 2] = cov[2, 1] = float(w @ (dy * dth))
    cov[2, 2] = float(w @ (dth * dth))
    pose = Pose2D(mx, my, norm_angle(mth))
    return pose, cov, has_converged(cov, criteria)


def has_converged(cov: np.ndarray,
                  criteria: ConvergenceCriteria = ConvergenceCriteria()) -> bool:
    """Positional covariance eigenvalues below pos_std^2 and heading stddev
    below rot_std."""
    eig = np.linalg.eigvalsh(cov[:2, :2])
    return bool(eig.max() < criteria.pos_std ** 2
                and cov[2, 2] < criteria.rot_std ** 2)
