"""Frontier detection and goal assignment for map exploration.

A frontier cell is a free cell touching unknown space; clusters of them are
candidate places to send robots. Assignment strategies range from greedy
nearest-frontier to a rank-based rule that spreads robots over the map by
sending each one to the frontier where it beats the fewest competitors.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .mapper import FREE, UNKNOWN, OccupancyGrid

MIN_CLUSTER_SIZE = 4

_NEIGH8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
_NEIGH4 = [(-1, 0), (1, 0), (0, -1), (0, 1)]


@dataclass(frozen=True)
class Frontier:
    cells: tuple[tuple[int, int], ...]   # row-major sorted cluster members
    centroid: tuple[int, int]            # member cell nearest the cluster mean

    @property
    def size(self) -> int:
        return len(self.cells)


def frontier_mask(grid: OccupancyGrid) -> np.ndarray:
    """Boolean mask of free cells with at least one unknown 8-neighbour."""
    cls = grid.classification()
    free = cls == FREE
    unknown = cls == UNKNOWN
    near_unknown = np.zeros_like(unknown)
    h, w = unknown.shape
    for dr, dc in _NEIGH8:
        src = unknown[max(dr, 0):h + min(dr, 0), max(dc, 0):w + min(dc, 0)]
        near_unknown[max(-dr, 0):h + min(-dr, 0), max(-dc, 0):w + min(-dc, 0)] |= src
    return free & near_unknown


def detect_frontiers(grid: OccupancyGrid,
                     min_size: int = MIN_CLUSTER_SIZE) -> list[Frontier]:
    """8-connected frontier clusters, largest first (ties row-major)."""
    mask = frontier_mask(grid)
    seen = np.zeros_like(mask)
    clusters: list[Frontier] = []
    rows, cols = np.nonzero(mask)
    h, w = mask.shape
    for r0, c0 in zip(rows.tolist(), cols.tolist()):
        if seen[r0, c0]:
            continue
        seen[r0, c0] = True
        queue = deque([(r0, c0)])
        cells = []
        while queue:
            r, c = queue.popleft()
            cells.append((r, c))
            for dr, dc in _NEIGH8:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not seen[rr, cc]:
                    seen[rr, cc] = True
                    queue.append((rr, cc))
        if len(cells) < min_size:
            continue
        cells.sort()
        mean_r = sum(r for r, _ in cells) / len(cells)
        mean_c = sum(c for _, c in cells) / len(cells)
        centroid = min(cells,
                       key=lambda rc: ((rc[0] - mean_r) ** 2 + (rc[1] - mean_c) ** 2,
                                       rc))
        clusters.append(Frontier(cells=tuple(cells), centroid=centroid))
    clusters.sort(key=lambda f: (-f.size, f.centroid))
    return clusters


def wavefront_distances(grid: OccupancyGrid,
                        sources: list[tuple[int, int]]) -> np.ndarray:
    """Multi-source BFS hop distances over free cells (4-connected).

    Unreachable or non-free cells hold +inf. Every source must be free.
    """
    cls = grid.classification()
    free = cls == FREE
    dist = np.full(cls.shape, np.inf)
    queue: deque[tuple[int, int]] = deque()
    for r, c in sources:
        if not (0 <= r < free.shape[0] and 0 <= c < free.shape[1]) or not free[r, c]:
            raise ValueError(f"wavefront source {(r, c)} is not a free cell")
        dist[r, c] = 0.0
        queue.append((r, c))
    h, w = free.shape
    while queue:
        r, c = queue.popleft()
        d = dist[r, c] + 1.0
        for dr, dc in _NEIGH4:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and free[rr, cc] and d < dist[rr, cc]:
                dist[rr, cc] = d
                queue.append((rr, cc))
    return dist


def exploration_complete(grid: OccupancyGrid,
                         min_size: int = MIN_CLUSTER_SIZE) -> bool:
    return len(detect_frontiers(grid, min_size)) == 0


def assign_nearest(grid: OccupancyGrid, robot_cell: tuple[int, int],
                   frontiers: list[Frontier]) -> Frontier | None:
    """Single robot: the frontier whose centroid is fewest wavefront hops away.

    Ties break by (size desc, centroid row-major) frontier order. Unreachable
    frontiers are skipped; None when nothing is reachable.
    """
    if not frontiers:
        return None
    dist = wavefront_distances(grid, [robot_cell])
    best = None
    best_d = np.inf
    for f in frontiers:
        d = dist[f.centroid]
        if d < best_d:
            best, best_d = f, d
    return best


def assign_multirobot_nearest(grid: OccupancyGrid,
                              robot_cells: dict[str, tuple[int, int]],
                              frontiers: list[Frontier]) -> dict[str, Frontier]:
    """Greedy first-arrival: repeatedly commit the globally shortest
    (robot, frontier) pair; distance ties go to the lower robot name."""
    if not frontiers or not robot_cells:
        return {}
    dists = {name: wavefront_distances(grid, [cell])
             for name, cell in sorted(robot_cells.items())}
    free_robots = sorted(robot_cells)
    remaining = list(frontiers)
    out: dict[str, Frontier] = {}
    while free_robots and remaining:
        best = None     # (distance, robot, frontier index)
        for name in free_robots:
            for idx, f in enumerate(remaining):
                d = dists[name][f.centroid]
                if not np.isfinite(d):
                    continue
                if best is None or (d, name, idx) < best:
                    best = (d, name, idx)
        if best is None:
            break
        d, name, idx = best
        out[name] = remaining.pop(idx)
        free_robots.remove(name)
    return out


def assign_minpos(grid: OccupancyGrid,
                  robot_cells: dict[str, tuple[int, int]],
                  frontiers: list[Frontier]) -> dict[str, Frontier]:
    """Rank-based assignment: for each robot and frontier, the rank is how
    many other robots sit strictly closer to that frontier. Each robot takes,
    independently, the frontier where its rank is lowest, breaking ties by
    distance and then frontier order.

    Robots with no reachable frontier are left out of the result.
    """
    if not frontiers or not robot_cells:
        return {}
    names = sorted(robot_cells)
    dists = {name: wavefront_distances(grid, [robot_cells[name]]) for name in names}
    d = np.array([[dists[name][f.centroid] for f in frontiers] for name in names])

    out: dict[str, Frontier] = {}
    for i, name in enumerate(names):
        best = None     # (rank, distance, frontier index)
        for j in range(len(frontiers)):
            if not np.isfinite(d[i, j]):
                continue
            rank = int((d[:, j] < d[i, j]).sum())
            if best is None or (rank, d[i, j], j) < best:
                best = (rank, d[i, j], j)
        if best is not None:
            out[name] = frontiers[best[2]]
    return out
