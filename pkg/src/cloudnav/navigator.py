"""Grid path planning and path following for the cloud controller.

Plans run on the mapped grid with obstacles inflated by the robot footprint
plus a safety margin; unknown cells are traversable at a cost penalty so
frontier goals on the map edge stay reachable without making blind shortcuts
free. Planned cell chains are shortcut to sparse waypoints with clear line
of sight.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .mapper import FREE, UNKNOWN, OccupancyGrid
from .world import Pose2D, norm_angle

FOOTPRINT_RADIUS = 0.18
SAFETY_MARGIN = 0.05
INFLATION_RADIUS = FOOTPRINT_RADIUS + SAFETY_MARGIN
UNKNOWN_STEP_FACTOR = 1.5
WAYPOINT_TOLERANCE = 0.15
GOAL_TOLERANCE = 0.15
DEVIATION_LIMIT = 1.0
SNAP_RADIUS = 0.6

_SQRT2 = math.sqrt(2.0)
_STEPS = [(-1, -1, _SQRT2), (-1, 0, 1.0), (-1, 1, _SQRT2),
          (0, -1, 1.0), (0, 1, 1.0),
          (1, -1, _SQRT2), (1, 0, 1.0), (1, 1, _SQRT2)]


def blocked_mask(grid: OccupancyGrid, radius: float = INFLATION_RADIUS) -> np.ndarray:
    """Cells a robot centre may not occupy: occupied cells and anything within
    the inflation radius of one."""
    return grid.occupied_distances() < radius


@dataclass(frozen=True)
class Path:
    cells: tuple[tuple[int, int], ...]       # full A* cell chain
    points: tuple[tuple[float, float], ...]  # shortcut waypoints, world coords
    cost: float                              # metres, including unknown penalty

    @property
    def total_length(self) -> float:
        return sum(math.hypot(b[0] - a[0], b[1] - a[1])
                   for a, b in zip(self.points, self.points[1:]))


def _snap_to_unblocked(grid: OccupancyGrid, blocked: np.ndarray,
                       cell: tuple[int, int], radius_m: float) -> tuple[int, int] | None:
    """Nearest cell (BFS over the full lattice) that is not blocked."""
    h, w = blocked.shape
    r0, c0 = cell
    r0 = min(max(r0, 0), h - 1)
    c0 = min(max(c0, 0), w - 1)
    if not blocked[r0, c0]:
        return (r0, c0)
    max_hops = int(math.ceil(radius_m / grid.resolution))
    seen = {(r0, c0)}
    queue = deque([((r0, c0), 0)])
    while queue:
        (r, c), hops = queue.popleft()
        if hops >= max_hops:
            continue
        for dr, dc, _ in _STEPS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and (rr, cc) not in seen:
                if not blocked[rr, cc]:
                    return (rr, cc)
                seen.add((rr, cc))
                queue.append(((rr, cc), hops + 1))
    return None


def _octile(a: tuple[int, int], b: tuple[int, int], res: float) -> float:
    dr = abs(a[0] - b[0])
    dc = abs(a[1] - b[1])
    return (min(dr, dc) * _SQRT2 + abs(dr - dc)) * res


def _line_cells(a: tuple[int, int], b: tuple[int, int]) -> list[tuple[int, int]]:
    """Every cell the segment between two cell centres passes through.

    Grid traversal stepping one lattice line at a time; an exact corner
    crossing conservatively includes both side cells as well.
    """
    (r0, c0), (r1, c1) = a, b
    if a == b:
        return [a]
    x0, y0 = c0 + 0.5, r0 + 0.5
    dx, dy = (c1 - c0), (r1 - r0)
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    dtx = math.inf if dx == 0 else abs(1.0 / dx)
    dty = math.inf if dy == 0 else abs(1.0 / dy)
    tx = math.inf if dx == 0 else ((c0 + (sx > 0)) - x0) / dx
    ty = math.inf if dy == 0 else ((r0 + (sy > 0)) - y0) / dy
    r, c = r0, c0
    cells = [(r0, c0)]
    for _ in range(2 * (abs(dx) + abs(dy)) + 4):
        if (r, c) == (r1, c1):
            break
        if abs(tx - ty) < 1e-12:
            cells.append((r, c + sx))
            cells.append((r + sy, c))
            c += sx
            r += sy
            tx += dtx
            ty += dty
        elif tx < ty:
            c += sx
            tx += dtx
        else:
            r += sy
            ty += dty
        cells.append((r, c))
    if cells[-1] != (r1, c1):
        cells.append((r1, c1))
    return cells


def plan_path(grid: OccupancyGrid, start_xy: tuple[float, float],
              goal_xy: tuple[float, float],
              inflation_radius: float = INFLATION_RADIUS) -> Path | None:
    """A* from start to goal in world coordinates; None when unreachable.

    Both endpoints snap to the nearest unblocked cell within a small radius,
    so a robot hugging a wall (or a goal placed against one) still plans.
    """
    blocked = blocked_mask(grid, inflation_radius)
    cls = grid.classification()
    start = _snap_to_unblocked(grid, blocked, grid.world_to_cell(*start_xy), SNAP_RADIUS)
    goal = _snap_to_unblocked(grid, blocked, grid.world_to_cell(*goal_xy), SNAP_RADIUS)
    if start is None or goal is None:
        return None
    res = grid.resolution
    h, w = blocked.shape

    g_cost: dict[tuple[int, int], float] = {start: 0.0}
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    open_heap: list[tuple[float, float, tuple[int, int]]] = []
    heapq.heappush(open_heap, (_octile(start, goal, res), 0.0, start))
    closed: set[tuple[int, int]] = set()
    found = False
    while open_heap:
        f, g, cell = heapq.heappop(open_heap)
        if cell in closed:
            continue
        if cell == goal:
            found = True
            break
        closed.add(cell)
        r, c = cell
        for dr, dc, base in _STEPS:
            rr, cc = r + dr, c + dc
            if not (0 <= rr < h and 0 <= cc < w) or blocked[rr, cc]:
                continue
            if dr != 0 and dc != 0 and (blocked[r, cc] or blocked[rr, c]):
                continue          # no slipping through touching corners
            step = base * res
            if cls[rr, cc] == UNKNOWN:
                step *= UNKNOWN_STEP_FACTOR
            ng = g + step
            if ng < g_cost.get((rr, cc), math.inf):
                g_cost[(rr, cc)] = ng
                parent[(rr, cc)] = cell
                heapq.heappush(open_heap, (ng + _octile((rr, cc), goal, res), ng, (rr, cc)))
    if not found:
        return None

    chain = [goal]
    while chain[-1] != start:
        chain.append(parent[chain[-1]])
    chain.reverse()

    # greedy shortcutting over free, unblocked line of sight
    def clear(a: tuple[int, int], b: tuple[int, int]) -> bool:
        for cell in _line_cells(a, b):
            if blocked[cell] or cls[cell] != FREE:
                return False
        return True

    idx = [0]
    i = 0
    while i < len(chain) - 1:
        j = len(chain) - 1
        while j > i + 1 and not clear(chain[i], chain[j]):
            j -= 1
        idx.append(j)
        i = j
    points = tuple(grid.cell_center(*chain[k]) for k in idx)
    return Path(cells=tuple(chain), points=points, cost=g_cost[goal])


def dijkstra_cost(grid: OccupancyGrid, start_xy: tuple[float, float],
                  goal_xy: tuple[float, float],
                  inflation_radius: float = INFLATION_RADIUS) -> float:
    """Reference uniform-cost search over the same move rules; +inf when
    unreachable. Used to cross-check the A* implementation."""
    blocked = blocked_mask(grid, inflation_radius)
    cls = grid.classification()
    start = _snap_to_unblocked(grid, blocked, grid.world_to_cell(*start_xy), SNAP_RADIUS)
    goal = _snap_to_unblocked(grid, blocked, grid.world_to_cell(*goal_xy), SNAP_RADIUS)
    if start is None or goal is None:
        return math.inf
    res = grid.resolution
    h, w = blocked.shape
    dist = {start: 0.0}
    heap = [(0.0, start)]
    done = set()
    while heap:
        g, cell = heapq.heappop(heap)
        if cell == goal:
            return g
        if cell in done:
            continue
        done.add(cell)
        r, c = cell
        for dr, dc, base in _STEPS:
            rr, cc = r + dr, c + dc
            if not (0 <= rr < h and 0 <= cc < w) or blocked[rr, cc]:
                continue
            if dr != 0 and dc != 0 and (blocked[r, cc] or blocked[rr, c]):
                continue
            step = base * res
            if cls[rr, cc] == UNKNOWN:
                step *= UNKNOWN_STEP_FACTOR
            ng = g + step
            if ng < dist.get((rr, cc), math.inf):
                dist[(rr, cc)] = ng
                heapq.heappush(heap, (ng, (rr, cc)))
    return math.inf


@dataclass
class FollowStatus:
    target: tuple[float, float]
    desired_heading: float
    reached: bool
    off_course: bool


class PathTracker:
    """Waypoint cursor over a planned path."""

    def __init__(self, path: Path) -> None:
        if not path.points:
            raise ValueError("path has no waypoints")
        self.path = path
        self.index = 0

    def follow(self, pose: Pose2D,
               waypoint_tol: float = WAYPOINT_TOLERANCE,
               goal_tol: float = GOAL_TOLERANCE,
               deviation_limit: float = DEVIATION_LIMIT) -> FollowStatus:
        pts = self.path.points
        while (self.index < len(pts) - 1
               and math.hypot(pts[self.index][0] - pose.x,
                              pts[self.index][1] - pose.y) <= waypoint_tol):
            self.index += 1
        tx, ty = pts[self.index]
        d_target = math.hypot(tx - pose.x, ty - pose.y)
        reached = self.index == len(pts) - 1 and d_target <= goal_tol
        heading = math.atan2(ty - pose.y, tx - pose.x) if d_target > 1e-9 else pose.theta
        off_course = self._distance_to_segment(pose) > deviation_limit
        return FollowStatus(target=(tx, ty), desired_heading=norm_angle(heading),
                            reached=reached, off_course=off_course)

    def _distance_to_segment(self, pose: Pose2D) -> float:
        pts = self.path.points
        bx, by = pts[self.index]
        if self.index == 0:
            return math.hypot(bx - pose.x, by - pose.y)
        ax, ay = pts[self.index - 1]
        vx, vy = bx - ax, by - ay
        L2 = vx * vx + vy * vy
        if L2 <= 1e-18:
            return math.hypot(bx - pose.x, by - pose.y)
        t = max(0.0, min(1.0, ((pose.x - ax) * vx + (pose.y - ay) * vy) / L2))
        px, py = ax + t * vx, ay + t * vy
        return math.hypot(px - pose.x, py - pose.y)
