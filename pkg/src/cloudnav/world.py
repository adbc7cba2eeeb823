"""Ground-truth world: static grid map, unicycle robots, simulated range sensing.

Everything here is the simulation's substrate. Nothing in this module knows
about mapping, planning, or the network; those live cloud-side and only see
what the robots publish.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage


def norm_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


# ---------- poses and commands ----------

@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "theta", norm_angle(self.theta))

    def compose(self, other: Pose2D) -> Pose2D:
        """Pose of `other`, given in this pose's frame, expressed in the parent frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(self.x + c * other.x - s * other.y,
                      self.y + s * other.x + c * other.y,
                      self.theta + other.theta)

    def inverse(self) -> Pose2D:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def delta_to(self, other: Pose2D) -> Pose2D:
        """Relative pose self^-1 ∘ other."""
        return self.inverse().compose(other)

    def distance_to(self, other: Pose2D) -> float:
        return math.hypot(other.x - self.x, other.y - self.y)


@dataclass(frozen=True)
class Twist:
    v: float = 0.0
    w: float = 0.0


@dataclass(frozen=True)
class RobotParams:
    v_max: float = 0.65
    w_max: float = 1.0
    footprint_radius: float = 0.18
    odom_noise_trans: float = 0.01   # drift stddev after one meter travelled
    odom_noise_rot: float = 0.02     # drift stddev after one radian turned

    def __post_init__(self) -> None:
        if self.v_max <= 0 or self.w_max <= 0 or self.footprint_radius <= 0:
            raise ValueError("robot limits must be positive")
        if self.odom_noise_trans < 0 or self.odom_noise_rot < 0:
            raise ValueError("noise levels must be non-negative")

    def clamp(self, cmd: Twist) -> Twist:
        return Twist(min(max(cmd.v, -self.v_max), self.v_max),
                     min(max(cmd.w, -self.w_max), self.w_max))


@dataclass(frozen=True)
class ScanConfig:
    fov: float = 1.0
    beam_count: int = 64
    range_min: float = 0.45
    range_max: float = 3.0
    rate_hz: float = 10.0
    range_noise: float = 0.01

    def __post_init__(self) -> None:
        if self.beam_count < 2:
            raise ValueError("beam_count must be at least 2")
        if not (0 < self.range_min < self.range_max):
            raise ValueError("need 0 < range_min < range_max")
        if self.fov <= 0 or self.rate_hz <= 0 or self.range_noise < 0:
            raise ValueError("invalid scan config")

    @property
    def angle_min(self) -> float:
        return -self.fov / 2.0

    @property
    def angle_increment(self) -> float:
        return self.fov / (self.beam_count - 1)


@dataclass(frozen=True)
class LaserScan:
    stamp: float
    frame: str
    angle_min: float
    angle_increment: float
    ranges: np.ndarray  # finite values in [range_min, range_max]; +inf = no return

    @property
    def beam_count(self) -> int:
        return len(self.ranges)

    def beam_angles(self) -> np.ndarray:
        """Beam angles in the sensor frame."""
        return self.angle_min + self.angle_increment * np.arange(len(self.ranges))


@dataclass
class RobotState:
    name: str
    true_pose: Pose2D
    odom_pose: Pose2D
    twist: Twist = Twist()
    distance_travelled: float = 0.0


def make_robot(name: str, spawn: Pose2D) -> RobotState:
    """Fresh robot with odometry aligned to its spawn pose."""
    return RobotState(name=name, true_pose=spawn, odom_pose=spawn)


# ---------- the static world ----------

@dataclass
class GroundTruthWorld:
    resolution: float
    origin: Pose2D
    occ: np.ndarray                       # bool (H, W); row 0 at origin.y, growing +y
    spawns: dict[str, Pose2D] = field(default_factory=dict)
    clearance_m: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.occ.ndim != 2 or self.occ.dtype != bool:
            raise ValueError("occupancy must be a 2-D bool array")
        # distance from each cell centre to the nearest occupied cell centre
        self.clearance_m = ndimage.distance_transform_edt(~self.occ) * self.resolution

    @property
    def height(self) -> int:
        return self.occ.shape[0]

    @property
    def width(self) -> int:
        return self.occ.shape[1]

    def cell_of(self, x: float, y: float) -> tuple[int, int] | None:
        """(row, col) containing the point, or None when outside the grid."""
        col = int(math.floor((x - self.origin.x) / self.resolution))
        row = int(math.floor((y - self.origin.y) / self.resolution))
        if 0 <= row < self.height and 0 <= col < self.width:
            return row, col
        return None

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin.x + (col + 0.5) * self.resolution,
                self.origin.y + (row + 0.5) * self.resolution)

    def is_free(self, x: float, y: float) -> bool:
        cell = self.cell_of(x, y)
        return cell is not None and not self.occ[cell]

    def clearance(self, x: float, y: float) -> float:
        """Approximate distance to the nearest obstacle, cell-quantised."""
        cell = self.cell_of(x, y)
        if cell is None:
            return 0.0
        return float(self.clearance_m[cell])

    def collides(self, x: float, y: float, radius: float) -> bool:
        cell = self.cell_of(x, y)
        if cell is None:
            return True
        return self.clearance_m[cell] < radius + 0.5 * self.resolution


class WorldFormatError(ValueError):
    pass


def parse_world(text: str, source: str = "<string>") -> GroundTruthWorld:
    """Parse the plain-text world format: header lines, then an ASCII bitmap."""
    resolution: float | None = None
    origin = Pose2D(0.0, 0.0, 0.0)
    spawns: dict[str, Pose2D] = {}
    bitmap: list[str] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not bitmap:
            if not line:
                continue
            if line.startswith("resolution:"):
                resolution = float(line.split(":", 1)[1])
                continue
            if line.startswith("origin:"):
                parts = line.split(":", 1)[1].split()
                if len(parts) != 3:
                    raise WorldFormatError(f"{source}:{lineno}: origin needs three values")
                origin = Pose2D(float(parts[0]), float(parts[1]), float(parts[2]))
                continue
            if line.startswith("spawn "):
                head, _, rest = line.partition(":")
                name = head[len("spawn "):].strip()
                parts = rest.split()
                if not name or len(parts) != 3:
                    raise WorldFormatError(f"{source}:{lineno}: spawn needs a name and three values")
                spawns[name] = Pose2D(float(parts[0]), float(parts[1]), float(parts[2]))
                continue
        if line and set(line) <= {"#", "."}:
            bitmap.append(line)
            continue
        if not line and bitmap:
            continue
        raise WorldFormatError(f"{source}:{lineno}: unrecognised line {raw!r}")

    if resolution is None:
        raise WorldFormatError(f"{source}: missing resolution header")
    if resolution <= 0:
        raise WorldFormatError(f"{source}: resolution must be positive")
    if not bitmap:
        raise WorldFormatError(f"{source}: no bitmap rows")
    width = len(bitmap[0])
    if any(len(row) != width for row in bitmap):
        raise WorldFormatError(f"{source}: bitmap rows must all have the same width")

    # first bitmap line is the top of the map (largest y)
    occ = np.array([[ch == "#" for ch in row] for row in reversed(bitmap)], dtype=bool)
    if not (occ[0, :].all() and occ[-1, :].all() and occ[:, 0].all() and occ[:, -1].all()):
        raise WorldFormatError(f"{source}: world not closed")

    world = GroundTruthWorld(resolution=resolution, origin=origin, occ=occ, spawns=spawns)
    for name, pose in spawns.items():
        if not world.is_free(pose.x, pose.y):
            raise WorldFormatError(f"{source}: spawn {name!r} is not in free space")
    return world


def load_world(path: str | Path) -> GroundTruthWorld:
    path = Path(path)
    return parse_world(path.read_text(), source=str(path))


def bundled_world_path(name: str = "corridor") -> Path:
    """Path of a world file shipped with the package."""
    return Path(__file__).parent / "data" / f"{name}.world"


# ---------- kinematics ----------

def step_robot(world: GroundTruthWorld, state: RobotState, params: RobotParams,
               cmd: Twist, dt: float, rng: np.random.Generator | None = None) -> RobotState:
    """Advance one fixed step of unicycle kinematics.

    The true pose moves exactly as commanded unless the new footprint would
    collide, in which case the translation is dropped for this step (v forced
    to zero) and only the rotation is applied. Odometry tracks the executed
    motion plus Gaussian drift that accumulates with distance and rotation.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cmd = params.clamp(cmd)
    v, w = cmd.v, cmd.w

    pose = state.true_pose
    nx = pose.x + v * math.cos(pose.theta) * dt
    ny = pose.y + v * math.sin(pose.theta) * dt
    if v != 0.0 and world.collides(nx, ny, params.footprint_radius):
        v = 0.0
        nx, ny = pose.x, pose.y
    new_true = Pose2D(nx, ny, pose.theta + w * dt)

    ds = v * dt
    dtheta = w * dt
    if rng is not None:
        eps_t = rng.normal(0.0, 1.0) * params.odom_noise_trans * math.sqrt(abs(ds))
        eps_r = rng.normal(0.0, 1.0) * params.odom_noise_rot * math.sqrt(abs(dtheta))
    else:
        eps_t = eps_r = 0.0
    new_odom = state.odom_pose.compose(Pose2D(ds + eps_t, 0.0, dtheta + eps_r))

    return RobotState(name=state.name, true_pose=new_true, odom_pose=new_odom,
                      twist=Twist(v, w),
                      distance_travelled=state.distance_travelled + abs(ds))


# ---------- range sensing ----------

@njit(cache=True)
def _cast_rays(occ: np.ndarray, ox: float, oy: float, res: float,
               px: float, py: float, angles: np.ndarray, range_max: float) -> np.ndarray:
    """Grid traversal (DDA) for a batch of rays; returns distance to the first
    occupied cell boundary, or +inf when nothing is hit within range_max."""
    n = angles.shape[0]
    out = np.empty(n)
    height, width = occ.shape
    for i in range(n):
        dx = math.cos(angles[i])
        dy = math.sin(angles[i])
        col = int(math.floor((px - ox) / res))
        row = int(math.floor((py - oy) / res))
        if col < 0 or col >= width or row < 0 or row >= height or occ[row, col]:
            out[i] = 0.0
            continue
        big = 1e30
        step_c = 1 if dx > 0 else (-1 if dx < 0 else 0)
        step_r = 1 if dy > 0 else (-1 if dy < 0 else 0)
        if dx > 0:
            tmax_x = ((col + 1) * res + ox - px) / dx
        elif dx < 0:
            tmax_x = (col * res + ox - px) / dx
        else:
            tmax_x = big
        if dy > 0:
            tmax_y = ((row + 1) * res + oy - py) / dy
        elif dy < 0:
            tmax_y = (row * res + oy - py) / dy
        else:
            tmax_y = big
        tdelta_x = res / abs(dx) if dx != 0.0 else big
        tdelta_y = res / abs(dy) if dy != 0.0 else big

        hit = np.inf
        t = 0.0
        while t <= range_max:
            if tmax_x < tmax_y:
                t = tmax_x
                tmax_x += tdelta_x
                col += step_c
            else:
                t = tmax_y
                tmax_y += tdelta_y
                row += step_r
            if col < 0 or col >= width or row < 0 or row >= height:
                break
            if occ[row, col]:
                if t <= range_max:
                    hit = t
                break
        out[i] = hit
    return out


def simulate_scan(world: GroundTruthWorld, pose: Pose2D, cfg: ScanConfig,
                  rng: np.random.Generator | None = None, stamp: float = 0.0,
                  frame: str = "scan") -> LaserScan:
    """Cast cfg.beam_count rays across the field of view from the given pose."""
    angles = pose.theta + cfg.angle_min + cfg.angle_increment * np.arange(cfg.beam_count)
    ranges = _cast_rays(world.occ, world.origin.x, world.origin.y, world.resolution,
                        pose.x, pose.y, angles, cfg.range_max)
    if rng is not None:
        noise = rng.normal(0.0, 1.0, size=cfg.beam_count) * cfg.range_noise
        finite = np.isfinite(ranges)
        ranges = np.where(finite, ranges + noise, ranges)
    ranges = np.where((ranges < cfg.range_min) | (ranges > cfg.range_max), np.inf, ranges)
    return LaserScan(stamp=stamp, frame=frame, angle_min=cfg.angle_min,
                     angle_increment=cfg.angle_increment, ranges=ranges)


def render_camera_strip(world: GroundTruthWorld, pose: Pose2D, cfg: ScanConfig,
                        columns: int) -> np.ndarray:
    """One-row depth render: per-column normalised depth in [0, 1].

    Column 0 is the left edge of the image (largest bearing); 1.0 means at or
    beyond range_max. Rendering is deterministic: no sensor noise is applied.
    """
    if columns < 1:
        raise ValueError("columns must be positive")
    bearings = np.linspace(cfg.fov / 2.0, -cfg.fov / 2.0, columns)
    ranges = _cast_rays(world.occ, world.origin.x, world.origin.y, world.resolution,
                        pose.x, pose.y, pose.theta + bearings, cfg.range_max)
    depths = np.where(np.isfinite(ranges), ranges, cfg.range_max) / cfg.range_max
    return np.clip(depths, 0.0, 1.0)
