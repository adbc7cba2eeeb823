"""Cloud-side mapping: log-odds occupancy grid, scan matching, pose graph.

The grid is rebuilt from keyframes, so the keyframe graph is the source of
truth and the live grid is just its incremental projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .world import LaserScan, Pose2D, norm_angle

L_HIT = 0.85
L_MISS = -0.4
L_CLAMP = 4.0
P_OCCUPIED = 0.65
P_FREE = 0.25

FREE, OCCUPIED, UNKNOWN = 0, 1, 2

_L_OCC_THRESH = math.log(P_OCCUPIED / (1.0 - P_OCCUPIED))
_L_FREE_THRESH = math.log(P_FREE / (1.0 - P_FREE))

KEYFRAME_TRANS_GATE = 0.3   # metres
KEYFRAME_ROT_GATE = 0.3     # radians
LOOP_RADIUS = 1.0           # metres
LOOP_MIN_ID_GAP = 10


# ---------- occupancy grid ----------

class OccupancyGrid:
    """Axis-aligned log-odds grid that grows by doubling when rays leave it."""

    def __init__(self, resolution: float, origin_x: float = 0.0, origin_y: float = 0.0,
                 width: int = 64, height: int = 64) -> None:
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.resolution = resolution
        self.origin_x = origin_x
        self.origin_y = origin_y
        self.logodds = np.zeros((height, width), dtype=np.float32)
        self.revision = 0
        self._class_cache: tuple[int, np.ndarray] | None = None
        self._prob_cache: tuple[int, np.ndarray] | None = None
        self._dist_cache: tuple[int, np.ndarray] | None = None

    @property
    def height(self) -> int:
        return self.logodds.shape[0]

    @property
    def width(self) -> int:
        return self.logodds.shape[1]

    def world_to_cell(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the containing cell; may lie outside the current array."""
        return (int(math.floor((y - self.origin_y) / self.resolution)),
                int(math.floor((x - self.origin_x) / self.resolution)))

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin_x + (col + 0.5) * self.resolution,
                self.origin_y + (row + 0.5) * self.resolution)

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def ensure_contains(self, xs, ys, margin: float = 0.2) -> None:
        """Grow (by doubling, preserving world coordinates) until all points fit."""
        res = self.resolution
        c0 = int(math.floor((min(xs) - margin - self.origin_x) / res))
        c1 = int(math.floor((max(xs) + margin - self.origin_x) / res))
        r0 = int(math.floor((min(ys) - margin - self.origin_y) / res))
        r1 = int(math.floor((max(ys) + margin - self.origin_y) / res))
        if r0 >= 0 and c0 >= 0 and r1 < self.height and c1 < self.width:
            return
        col_lo, col_hi = min(0, c0), max(self.width - 1, c1)
        row_lo, row_hi = min(0, r0), max(self.height - 1, r1)
        new_w, new_h = self.width, self.height
        while new_w < col_hi - col_lo + 1:
            new_w *= 2
        while new_h < row_hi - row_lo + 1:
            new_h *= 2
        off_c = -col_lo + (new_w - (col_hi - col_lo + 1)) // 2
        off_r = -row_lo + (new_h - (row_hi - row_lo + 1)) // 2
        fresh = np.zeros((new_h, new_w), dtype=np.float32)
        fresh[off_r:off_r + self.height, off_c:off_c + self.width] = self.logodds
        self.logodds = fresh
        self.origin_x -= off_c * self.resolution
        self.origin_y -= off_r * self.resolution
        self.revision += 1

    def classification(self) -> np.ndarray:
        """int8 array of FREE / OCCUPIED / UNKNOWN per cell."""
        if self._class_cache is None or self._class_cache[0] != self.revision:
            out = np.full(self.logodds.shape, UNKNOWN, dtype=np.int8)
            out[self.logodds > _L_OCC_THRESH] = OCCUPIED
            out[self.logodds < _L_FREE_THRESH] = FREE
            self._class_cache = (self.revision, out)
        return self._class_cache[1]

    def probability(self) -> np.ndarray:
        if self._prob_cache is None or self._prob_cache[0] != self.revision:
            lo = self.logodds.astype(np.float64)
            self._prob_cache = (self.revision, 1.0 / (1.0 + np.exp(-lo)))
        return self._prob_cache[1]

    def occupied_distances(self) -> np.ndarray:
        """Metres from each cell centre to the nearest occupied cell centre;
        +inf everywhere when nothing is occupied yet."""
        if self._dist_cache is None or self._dist_cache[0] != self.revision:
            occupied = self.classification() == OCCUPIED
            if occupied.any():
                dist = ndimage.distance_transform_edt(~occupied) * self.resolution
            else:
                dist = np.full(self.logodds.shape, np.inf)
            self._dist_cache = (self.revision, dist)
        return self._dist_cache[1]

    def observed_fraction_of(self, mask_cells: int) -> float:
        known = int((self.classification() != UNKNOWN).sum())
        return known / mask_cells if mask_cells else 0.0


def _bresenham(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    cells = []
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        cells.append((r, c))
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr
    return cells


def integrate_scan(grid: OccupancyGrid, pose: Pose2D, scan: LaserScan,
                   range_max: float = 3.0) -> None:
    """Fold one scan taken at `pose` into the grid.

    Each cell is updated at most once per scan; endpoint evidence wins over
    pass-through evidence when beams disagree.
    """
    angles = pose.theta + scan.beam_angles()
    ranges = scan.ranges
    finite = np.isfinite(ranges)
    # push hit endpoints half a cell along the beam so the evidence lands
    # inside the struck cell, not on its boundary
    reach = np.where(finite, ranges + 0.5 * grid.resolution, range_max)
    ex = pose.x + reach * np.cos(angles)
    ey = pose.y + reach * np.sin(angles)

    grid.ensure_contains([pose.x, float(ex.min()), float(ex.max())],
                         [pose.y, float(ey.min()), float(ey.max())])
    r0, c0 = grid.world_to_cell(pose.x, pose.y)

    free: set[tuple[int, int]] = set()
    hits: set[tuple[int, int]] = set()
    for k in range(len(ranges)):
        r1, c1 = grid.world_to_cell(float(ex[k]), float(ey[k]))
        ray = _bresenham(r0, c0, r1, c1)
        if finite[k]:
            hits.add(ray[-1])
            free.update(ray[:-1])
        else:
            free.update(ray)   # no return: observed empty out to range_max
    free -= hits

    lo = grid.logodds
    for r, c in free:
        lo[r, c] = max(lo[r, c] + L_MISS, -L_CLAMP)
    for r, c in hits:
        lo[r, c] = min(lo[r, c] + L_HIT, L_CLAMP)
    grid.revision += 1


# ---------- correlative scan matching ----------

@dataclass(frozen=True)
class ScanMatchResult:
    corrected: Pose2D
    score: float
    prior_score: float
    accepted: bool


MATCH_WINDOW_XY = 0.25      # metres, each side of the prior
MATCH_WINDOW_THETA = 0.15   # radians, each side
MATCH_ROT_STEP = 0.01
MATCH_SCORE_MIN = 0.55
MATCH_IMPROVEMENT_MIN = 0.02


def _endpoints_body(scan: LaserScan, push: float) -> np.ndarray:
    """Finite-beam endpoints in the sensor frame, pushed `push` along the beam
    to match the convention used by integrate_scan."""
    angles = scan.beam_angles()
    finite = np.isfinite(scan.ranges)
    r = scan.ranges[finite] + push
    a = angles[finite]
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def match_scan(grid: OccupancyGrid, scan: LaserScan, prior: Pose2D,
               window_xy: float = MATCH_WINDOW_XY,
               window_theta: float = MATCH_WINDOW_THETA) -> ScanMatchResult:
    """Exhaustive correlative search around the prior.

    Score is the mean occupancy probability under the projected endpoints;
    translation is searched on the grid lattice, rotation at a fixed step.
    The result is accepted only when it clearly beats the prior.
    """
    pts = _endpoints_body(scan, 0.5 * grid.resolution)
    if len(pts) == 0:
        return ScanMatchResult(prior, 0.0, 0.0, False)

    prob = grid.probability()
    res = grid.resolution

    def score_at(pose: Pose2D) -> float:
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        wx = pose.x + pts[:, 0] * c - pts[:, 1] * s
        wy = pose.y + pts[:, 0] * s + pts[:, 1] * c
        rows = np.floor((wy - grid.origin_y) / res).astype(np.int64)
        cols = np.floor((wx - grid.origin_x) / res).astype(np.int64)
        inside = (rows >= 0) & (rows < grid.height) & (cols >= 0) & (cols < grid.width)
        vals = np.full(len(rows), 0.5)
        vals[inside] = prob[rows[inside], cols[inside]]
        return float(vals.mean())

    prior_score = score_at(prior)
    n_t = int(round(window_xy / res))
    n_r = int(round(window_theta / MATCH_ROT_STEP))
    if n_t < 1 or n_r < 1:
        return ScanMatchResult(prior, prior_score, prior_score, False)

    shifts = np.arange(-n_t, n_t + 1)
    best_pose = prior
    best_score = -1.0
    best_key = None
    for k in range(-n_r, n_r + 1):
        dtheta = k * MATCH_ROT_STEP
        theta = prior.theta + dtheta
        c, s = math.cos(theta), math.sin(theta)
        wx = prior.x + pts[:, 0] * c - pts[:, 1] * s
        wy = prior.y + pts[:, 0] * s + pts[:, 1] * c
        base_rows = np.floor((wy - grid.origin_y) / res).astype(np.int64)
        base_cols = np.floor((wx - grid.origin_x) / res).astype(np.int64)
        for di in shifts:
            rows = base_rows + di
            for dj in shifts:
                cols = base_cols + dj
                inside = (rows >= 0) & (rows < grid.height) & (cols >= 0) & (cols < grid.width)
                if inside.all():
                    score = float(prob[rows, cols].mean())
                else:
                    vals = np.full(len(rows), 0.5)
                    vals[inside] = prob[rows[inside], cols[inside]]
                    score = float(vals.mean())
                key = (-score, abs(k), abs(di) + abs(dj), k, di, dj)
                if best_key is None or key < best_key:
                    best_key = key
                    best_score = score
                    best_pose = Pose2D(prior.x + dj * res, prior.y + di * res, theta)

    accepted = (best_score >= MATCH_SCORE_MIN
                and best_score - prior_score >= MATCH_IMPROVEMENT_MIN)
    return ScanMatchResult(best_pose, best_score, prior_score, accepted)


def should_add_keyframe(last: Pose2D | None, pose: Pose2D) -> bool:
    if last is None:
        return True
    return (last.distance_to(pose) >= KEYFRAME_TRANS_GATE
            or abs(norm_angle(pose.theta - last.theta)) >= KEYFRAME_ROT_GATE)


# ---------- pose graph ----------

@dataclass
class Keyframe:
    node_id: int
    robot: str
    stamp: float
    pose: Pose2D
    scan: LaserScan


@dataclass(frozen=True)
class GraphEdge:
    i: int
    j: int
    measurement: Pose2D                      # pose_j expressed in pose_i's frame
    weight: tuple[float, float, float] = (100.0, 100.0, 400.0)


@dataclass
class OptimizeReport:
    iterations: int
    residuals: list[float]

    @property
    def initial_residual(self) -> float:
        return self.residuals[0]

    @property
    def final_residual(self) -> float:
        return self.residuals[-1]


class PoseGraph:
    def __init__(self) -> None:
        self.keyframes: list[Keyframe] = []
        self.edges: list[GraphEdge] = []
        self.anchors: set[int] = set()

    def add_keyframe(self, robot: str, stamp: float, pose: Pose2D, scan: LaserScan,
                     anchor: bool = False) -> Keyframe:
        kf = Keyframe(node_id=len(self.keyframes), robot=robot, stamp=stamp,
                      pose=pose, scan=scan)
        self.keyframes.append(kf)
        if anchor:
            self.anchors.add(kf.node_id)
        return kf

    def add_edge(self, i: int, j: int, measurement: Pose2D,
                 weight: tuple[float, float, float] = (100.0, 100.0, 400.0)) -> None:
        n = len(self.keyframes)
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ValueError(f"edge endpoints out of range: {i}->{j}")
        self.edges.append(GraphEdge(i, j, measurement, weight))

    def loop_candidates(self, kf: Keyframe) -> list[Keyframe]:
        """Older keyframes this one might close a loop against."""
        out = []
        for old in self.keyframes:
            if kf.node_id - old.node_id >= LOOP_MIN_ID_GAP and \
                    old.pose.distance_to(kf.pose) <= LOOP_RADIUS:
                out.append(old)
        return out

    def _edge_residual(self, edge: GraphEdge) -> np.ndarray:
        xi = self.keyframes[edge.i].pose
        xj = self.keyframes[edge.j].pose
        rel = xi.delta_to(xj)
        d = edge.measurement.delta_to(rel)
        return np.array([d.x, d.y, d.theta])

    def residual(self) -> float:
        total = 0.0
        for e in self.edges:
            r = self._edge_residual(e)
            w = e.weight
            total += w[0] * r[0] ** 2 + w[1] * r[1] ** 2 + w[2] * r[2] ** 2
        return total

    def optimize(self, max_iters: int = 50, rel_tol: float = 1e-6) -> OptimizeReport:
        """Gauss-Newton over non-anchored poses with a backtracking step.

        The residual sequence is non-increasing: a step that would raise the
        residual is halved until it helps, or the solve stops.
        """
        if not self.anchors:
            raise ValueError("pose graph needs at least one anchored node")
        free_ids = [kf.node_id for kf in self.keyframes if kf.node_id not in self.anchors]
        slot = {nid: k for k, nid in enumerate(free_ids)}
        residuals = [self.residual()]
        if not free_ids or not self.edges:
            return OptimizeReport(iterations=0, residuals=residuals)

        iters = 0
        for _ in range(max_iters):
            m = 3 * len(free_ids)
            H = np.zeros((m, m))
            b = np.zeros(m)
            for e in self.edges:
                xi = self.keyframes[e.i].pose
                xj = self.keyframes[e.j].pose
                ci, si = math.cos(xi.theta), math.sin(xi.theta)
                cz, sz = math.cos(e.measurement.theta), math.sin(e.measurement.theta)
                RiT = np.array([[ci, si], [-si, ci]])
                dRiT = np.array([[-si, ci], [-ci, -si]])
                RzT = np.array([[cz, sz], [-sz, cz]])
                dt = np.array([xj.x - xi.x, xj.y - xi.y])
                r = self._edge_residual(e)
                A = np.zeros((3, 3))
                A[:2, :2] = -RzT @ RiT
                A[:2, 2] = RzT @ (dRiT @ dt)
                A[2, 2] = -1.0
                B = np.zeros((3, 3))
                B[:2, :2] = RzT @ RiT
                B[2, 2] = 1.0
                W = np.diag(e.weight)
                for (nid, J) in ((e.i, A), (e.j, B)):
                    if nid not in slot:
                        continue
                    si_ = 3 * slot[nid]
                    b[si_:si_ + 3] += J.T @ W @ r
                    for (njd, Jj) in ((e.i, A), (e.j, B)):
                        if njd not in slot:
                            continue
                        sj_ = 3 * slot[njd]
                        H[si_:si_ + 3, sj_:sj_ + 3] += J.T @ W @ Jj
            H += np.eye(m) * 1e-9
            try:
                delta = np.linalg.solve(H, -b)
            except np.linalg.LinAlgError:
                break

            before = residuals[-1]
            saved = [self.keyframes[nid].pose for nid in free_ids]
            alpha = 1.0
            improved = False
            for _ in range(12):
                for k, nid in enumerate(free_ids):
                    p = saved[k]
                    self.keyframes[nid].pose = Pose2D(p.x + alpha * delta[3 * k],
                                                      p.y + alpha * delta[3 * k + 1],
                                                      p.theta + alpha * delta[3 * k + 2])
                after = self.residual()
                if after <= before + 1e-15:
                    improved = True
                    break
                alpha *= 0.5
            if not improved:
                for k, nid in enumerate(free_ids):
                    self.keyframes[nid].pose = saved[k]
                break
            iters += 1
            residuals.append(after)
            if before > 0 and (before - after) / before < rel_tol:
                break
            if after == 0.0:
                break
        return OptimizeReport(iterations=iters, residuals=residuals)


def rebuild_grid(graph: PoseGraph, resolution: float, range_max: float = 3.0) -> OccupancyGrid:
    """Project every keyframe at its current pose into a fresh grid."""
    if graph.keyframes:
        k0 = graph.keyframes[0]
        grid = OccupancyGrid(resolution, origin_x=k0.pose.x - 1.6, origin_y=k0.pose.y - 1.6)
    else:
        grid = OccupancyGrid(resolution)
    for kf in graph.keyframes:
        integrate_scan(grid, kf.pose, kf.scan, range_max=range_max)
    return grid


# ---------- multi-robot stream merging ----------

@dataclass(frozen=True)
class KeyframeCandidate:
    robot: str
    stamp: float
    odom_pose: Pose2D      # in the robot's own odometry frame
    scan: LaserScan


@dataclass(frozen=True)
class StreamRegistration:
    robot: str
    odom_to_shared: Pose2D   # shared_pose = odom_to_shared ∘ odom_pose
    registered_at: float


@dataclass(frozen=True)
class RejectedKeyframe:
    candidate: KeyframeCandidate
    reason: str


def merge_streams(streams: dict[str, list[KeyframeCandidate]],
                  registrations: dict[str, StreamRegistration],
                  resolution: float = 0.05,
                  range_max: float = 3.0) -> tuple[PoseGraph, OccupancyGrid, list[RejectedKeyframe]]:
    """Build one shared graph from per-robot keyframe streams.

    Keyframes interleave by timestamp. A robot contributes only once its frame
    is registered in the shared frame, and only from that moment on; everything
    else is rejected with a reason.
    """
    ordered: list[KeyframeCandidate] = []
    for robot in sorted(streams):
        ordered.extend(streams[robot])
    ordered.sort(key=lambda c: (c.stamp, c.robot))

    graph = PoseGraph()
    rejected: list[RejectedKeyframe] = []
    last_node: dict[str, Keyframe] = {}
    for cand in ordered:
        reg = registrations.get(cand.robot)
        if reg is None:
            rejected.append(RejectedKeyframe(cand, "robot frame not registered"))
            continue
        if cand.stamp < reg.registered_at:
            rejected.append(RejectedKeyframe(cand, "before localization convergence"))
            continue
        pose = reg.odom_to_shared.compose(cand.odom_pose)
        prev = last_node.get(cand.robot)
        kf = graph.add_keyframe(cand.robot, cand.stamp, pose, cand.scan,
                                anchor=prev is None)
        if prev is not None:
            graph.add_edge(prev.node_id, kf.node_id, prev.pose.delta_to(pose))
        last_node[cand.robot] = kf
    grid = rebuild_grid(graph, resolution, range_max=range_max)
    return graph, grid, rejected


# ---------- map export ----------

PGM_FREE = 255
PGM_OCCUPIED = 0
PGM_UNKNOWN = 205


def export_pgm(grid: OccupancyGrid) -> tuple[bytes, str]:
    """(P5 image bytes, sidecar metadata text). Top image row is the largest y."""
    cls = grid.classification()
    img = np.full(cls.shape, PGM_UNKNOWN, dtype=np.uint8)
    img[cls == FREE] = PGM_FREE
    img[cls == OCCUPIED] = PGM_OCCUPIED
    img = img[::-1, :]   # row 0 of the file is the top of the map
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    meta = (f"image: map.pgm\n"
            f"resolution: {grid.resolution}\n"
            f"origin: [{grid.origin_x}, {grid.origin_y}, 0.0]\n"
            f"occupied_thresh: {P_OCCUPIED}\n"
            f"free_thresh: {P_FREE}\n")
    return header + img.tobytes(), meta


def load_pgm(data: bytes, meta: str) -> tuple[np.ndarray, float, tuple[float, float]]:
    """Inverse of export_pgm: classification array, resolution, origin."""
    if not data.startswith(b"P5\n"):
        raise ValueError("not a binary PGM")
    rest = data[3:]
    dims, rest = rest.split(b"\n", 1)
    maxval, rest = rest.split(b"\n", 1)
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255:
        raise ValueError("expected 8-bit PGM")
    img = np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w)[::-1, :]
    cls = np.full(img.shape, UNKNOWN, dtype=np.int8)
    cls[img == PGM_FREE] = FREE
    cls[img == PGM_OCCUPIED] = OCCUPIED
    resolution = 0.0
    origin = (0.0, 0.0)
    for line in meta.splitlines():
        if line.startswith("resolution:"):
            resolution = float(line.split(":", 1)[1])
        elif line.startswith("origin:"):
            vals = line.split(":", 1)[1].strip().strip("[]").split(",")
            origin = (float(vals[0]), float(vals[1]))
    return cls, resolution, origin
