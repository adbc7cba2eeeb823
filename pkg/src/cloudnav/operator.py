"""Reactive obstacle avoidance: motion primitives scored on the shared map.

Runs cloud-side like the rest of the processing chain, so its commands ride
the downlink and feel network latency. Each tick it sweeps a small set of
constant-twist arcs across the latest grid snapshot, drops the ones whose
footprint would touch an occupied cell, and picks the cheapest blend of
goal alignment, clearance, and speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mapper import OccupancyGrid
from .world import Pose2D, RobotParams, Twist, norm_angle

HORIZON = 1.0            # seconds simulated per primitive
ARC_STEP = 0.05          # metres between collision samples along an arc
ALIGN_WEIGHT = 1.0
CLEARANCE_WEIGHT = 0.2
SPEED_WEIGHT = 0.5
CLEARANCE_CAP = 3.0      # clearance beyond this stops paying off
N_SPEEDS = 2
N_TURN_RATES = 5


@dataclass(frozen=True)
class MotionPrimitive:
    v: float
    w: float


@dataclass(frozen=True)
class PrimitiveEvaluation:
    primitive: MotionPrimitive
    feasible: bool
    cost: float  # +inf when infeasible


def generate_primitives(params: RobotParams = RobotParams(),
                        n_v: int = N_SPEEDS,
                        n_w: int = N_TURN_RATES) -> tuple[MotionPrimitive, ...]:
    """Forward arcs over a speed/turn-rate lattice plus two in-place turns.

    Ordering is fixed: cost ties resolve to the earliest primitive.
    """
    if n_v < 1 or n_w < 3:
        raise ValueError("need at least one speed and three turn rates")
    out = []
    for k in range(1, n_v + 1):
        v = params.v_max * k / n_v
        for w in np.linspace(-params.w_max, params.w_max, n_w):
            out.append(MotionPrimitive(v, float(w)))
    out.append(MotionPrimitive(0.0, params.w_max))
    out.append(MotionPrimitive(0.0, -params.w_max))
    return tuple(out)


def arc_points(v: float, w: float, horizon: float = HORIZON,
               step: float = ARC_STEP) -> np.ndarray:
    """Robot-frame (x, y) samples along a constant-twist arc, at most `step`
    metres apart, excluding the origin. Empty for in-place turns."""
    if v <= 0.0:
        return np.empty((0, 2))
    n = max(1, int(math.ceil(v * horizon / step)))
    t = np.arange(1, n + 1) * (horizon / n)
    if abs(w) < 1e-9:
        return np.column_stack([v * t, np.zeros(n)])
    radius = v / w
    return np.column_stack([radius * np.sin(w * t), radius * (1.0 - np.cos(w * t))])


def _sample_clearances(grid: OccupancyGrid, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Distance from each world point to the nearest occupied cell centre,
    read off the containing cell; +inf outside the mapped area."""
    dist = grid.occupied_distances()
    rows = np.floor((ys - grid.origin_y) / grid.resolution).astype(int)
    cols = np.floor((xs - grid.origin_x) / grid.resolution).astype(int)
    inside = (rows >= 0) & (rows < grid.height) & (cols >= 0) & (cols < grid.width)
    out = np.full(len(xs), np.inf)
    out[inside] = dist[rows[inside], cols[inside]]
    return out


def evaluate(grid: OccupancyGrid, pose: Pose2D, primitive: MotionPrimitive,
             desired_heading: float, horizon: float = HORIZON,
             params: RobotParams = RobotParams()) -> PrimitiveEvaluation:
    """Score one primitive on the grid snapshot.

    Infeasible if any arc sample puts the footprint in contact with an
    occupied cell (in-place turns are judged at the robot's own cell: a disc
    turning does not move). Cost blends the heading error left at the end of
    the arc, inverse clearance, and how far below top speed the arc runs.
    """
    body = arc_points(primitive.v, primitive.w, horizon)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    if len(body) == 0:
        xs = np.array([pose.x])
        ys = np.array([pose.y])
    else:
        xs = pose.x + c * body[:, 0] - s * body[:, 1]
        ys = pose.y + s * body[:, 0] + c * body[:, 1]
    clearance = float(_sample_clearances(grid, xs, ys).min()) - params.footprint_radius
    if clearance <= 0.0:
        return PrimitiveEvaluation(primitive, False, math.inf)
    align = abs(norm_angle(desired_heading - (pose.theta + primitive.w * horizon)))
    cost = (ALIGN_WEIGHT * align
            + CLEARANCE_WEIGHT / min(clearance, CLEARANCE_CAP)
            + SPEED_WEIGHT * (params.v_max - primitive.v))
    return PrimitiveEvaluation(primitive, True, cost)


def select_command(evaluations: list[PrimitiveEvaluation] | tuple[PrimitiveEvaluation, ...],
                   heading_error: float = 0.0, estop: bool = False,
                   params: RobotParams = RobotParams()) -> Twist:
    """Emergency stop wins over everything; otherwise the cheapest feasible
    primitive; with nothing feasible, turn in place toward the goal."""
    if estop:
        return Twist(0.0, 0.0)
    best: PrimitiveEvaluation | None = None
    for ev in evaluations:
        if ev.feasible and (best is None or ev.cost < best.cost):
            best = ev
    if best is None:
        return Twist(0.0, math.copysign(params.w_max, heading_error))
    return Twist(best.primitive.v, best.primitive.w)


def drive_command(grid: OccupancyGrid, pose: Pose2D, desired_heading: float,
                  estop: bool = False,
                  params: RobotParams = RobotParams()) -> Twist:
    """One generate/evaluate/select pass: the per-tick entry point."""
    evals = [evaluate(grid, pose, p, desired_heading, params=params)
             for p in generate_primitives(params)]
    return select_command(evals, norm_angle(desired_heading - pose.theta),
                          estop=estop, params=params)
