"""Scenario orchestration: a fixed-step loop that streams robot sensors over
the modeled network to the cloud navigation stack and streams commands back,
then reports run metrics and map artifacts.

The cloud side owns all interpretation: occupancy mapping with scan-match
drift correction, particle-filter localization for robots that join an
existing map, frontier allocation, path planning, and the reactive drive
layer. Robots only sense and execute. One thread owns the loop; a live
console, when attached, exchanges messages only at tick boundaries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bus import (
    POSE_PAYLOAD_BYTES,
    PROFILES,
    BandwidthModel,
    CloudMaster,
    NodeName,
    depth_payload_bytes,
    scan_payload_bytes,
    video_payload_bytes,
)
from .explorer import (
    assign_minpos,
    assign_multirobot_nearest,
    assign_nearest,
    detect_frontiers,
    exploration_complete,
)
from .localizer import (
    SUPPORT_MIN_OVERLAP,
    LikelihoodField,
    MotionNoise,
    ParticleSet,
    effective_sample_size,
    estimate,
    init_uniform,
    inject_scored,
    predict,
    resample_systematic,
    scan_support,
    update_weights,
)
from .mapper import (
    FREE,
    UNKNOWN,
    OCCUPIED,
    OccupancyGrid,
    PoseGraph,
    export_pgm,
    integrate_scan,
    match_scan,
    should_add_keyframe,
)
from .navigator import PathTracker, plan_path
from .operator import drive_command
from .rng import seeded_stream
from .world import (
    GroundTruthWorld,
    LaserScan,
    Pose2D,
    RobotParams,
    RobotState,
    ScanConfig,
    Twist,
    load_world,
    make_robot,
    norm_angle,
    simulate_scan,
    step_robot,
)

KINDS = ("manual", "auto-single", "auto-multi")
STRATEGIES = ("nearest", "mr-nearest", "minpos")

TWIST_PAYLOAD_BYTES = 24     # stamped velocity command
REASSIGN_PERIOD = 5.0        # seconds between frontier re-allocations
SWEEP_ANGLE = 2.0 * math.pi  # initial look-around before exploring

# global localization protocol for robots joining an existing map: scored
# injection searches while the map offers competing explanations, then stops
# so the surviving cluster can tighten; declaration additionally demands a
# streak of well-supported, scan-consistent updates
MCL_PARTICLES = 1500
MCL_GATE_TRANS = 0.2         # metres of motion per filter update
MCL_GATE_ROT = 0.5           # radians per filter update
MCL_INJECT_UPDATES = 15
MCL_MIN_UPDATES = 18
MCL_STREAK = 3
MCL_CONSISTENCY_MIN = 0.8
MCL_RETRY_UPDATES = 45       # reset the filter if still lost after this many
MCL_MIN_FREE_CELLS = 300     # map content needed before the filter can seed

# serving a frontier means looking at it, not standing on it: the scanner has
# a dead zone under the robot and a narrow cone, so the robot stops short,
# turns toward the cluster, and holds while one scan is forced into the map
# grazing beams leave speck clusters along wall faces; they are worth a look
# eventually, but only once no substantial rim of unknown space is left
TARGET_MIN_CLUSTER = 12      # cells a cluster needs to be targeted first

# a scan taken jammed against structure reads its surroundings as beyond-range
# blanks and would carve free space straight through mapped walls; the drive
# layer plans with a padded virtual footprint so the body never enters the
# sensor's blind radius, and keyframes wait for a pose with healthy clearance
KF_MIN_CLEARANCE = 0.5       # metres of map clearance required to integrate
PLAN_INFLATION = 0.6         # planner keep-out around known occupied cells
DRIVE_SAFETY_RADIUS = 0.45   # virtual footprint for reactive drive selection

# the correlative match is lattice-quantised and its score plateaus across the
# wall thickness, so single corrections are coarse and noisy; they are applied
# as a rate-limited trim on top of odometry instead of being taken literally,
# and any component along a flat score axis (a featureless stretch of wall
# lets the match slide sideways freely) is dropped as unobservable
MATCH_STEP_TRANS = 0.05      # metres of correction applied per keyframe
MATCH_STEP_ROT = 0.02        # radians of correction applied per keyframe
MATCH_FLAT_EPS = 0.02        # score drop below this marks an axis as flat
REFINE_MIN_BEAMS = 10        # beams landing on mapped cells needed to refine

# a drive command that moves nothing for this long means an unmapped bump;
# the robot backs off and the frontier logic approaches from elsewhere
STALL_TICKS = 8
BLOCKED_TICKS = 45           # costmap-blocked ticks before giving a target up;
                             # longer than any honest turn-in-place alignment
SPIN_HOLD_TICKS = 10         # matcher heading votes stay muted this long
                             # after an in-place turn
RETREAT_TICKS = 5
STRIKE_LIMIT = 4             # failed services before a cluster is written off
IDLE_SWEEP_LIMIT = 3         # consecutive no-target sweeps that end exploration
STAGNATION_WINDOW = 40.0     # seconds without map growth that end exploration
GROWTH_EPS_CELLS = 15        # known-cell increase that counts as map growth
GOAL_CLEARANCE_MIN = 0.3     # centroids closer to ink than this are wall debris
APPROACH_DIST = 0.9          # within this of the goal, align before arcing
APPROACH_ALIGN = 0.6         # heading error that forces an in-place turn

COMPLETION_EVENTS = ("exploration_complete", "trace_end", "coverage_reached",
                     "finish")


# ---------- configuration and run records ----------

@dataclass(frozen=True)
class ScenarioConfig:
    kind: str
    world_path: str
    spawns: tuple[str, ...]
    strategy: str = "minpos"
    net: str = "lan"
    seed: int = 42
    dt: float = 0.1
    max_sim_time: float = 240.0
    coverage_stop: float = 0.95   # manual scenarios end at this coverage

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.net not in PROFILES:
            raise ValueError(f"unknown network profile {self.net!r}")
        if self.dt <= 0 or self.max_sim_time <= 0:
            raise ValueError("dt and max_sim_time must be positive")
        if self.kind == "auto-multi" and len(self.spawns) < 2:
            raise ValueError("auto-multi needs at least two spawns")
        if self.kind != "auto-multi" and len(self.spawns) != 1:
            raise ValueError(f"{self.kind} needs exactly one spawn")


@dataclass(frozen=True)
class TeleopTrace:
    """Replayable manual drive: (t, v, w) rows, zero-order hold between rows,
    full stop at the final timestamp."""
    records: tuple[tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        ts = [r[0] for r in self.records]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trace timestamps must be strictly increasing")
        if ts and ts[0] < 0.0:
            raise ValueError("trace cannot start before t=0")

    @classmethod
    def parse(cls, text: str) -> TeleopTrace:
        records = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            body = raw.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) != 3:
                raise ValueError(f"trace line {lineno}: expected 't v w'")
            t, v, w = (float(p) for p in parts)
            records.append((t, v, w))
        return cls(tuple(records))

    @classmethod
    def load(cls, path: str | Path) -> TeleopTrace:
        return cls.parse(Path(path).read_text())

    @property
    def end_time(self) -> float:
        return self.records[-1][0] if self.records else 0.0

    def command_at(self, t: float) -> Twist:
        cmd = Twist(0.0, 0.0)
        for rt, v, w in self.records:
            if rt <= t + 1e-9:
                cmd = Twist(v, w)
            else:
                break
        return cmd


@dataclass
class EventLog:
    records: list[tuple[float, str, str]] = field(default_factory=list)

    def log(self, t: float, source: str, event: str) -> None:
        if self.records and t < self.records[-1][0] - 1e-9:
            raise ValueError("event log time went backwards")
        self.records.append((t, source, event))

    def first(self, event: str) -> float | None:
        for t, _, e in self.records:
            if e == event:
                return t
        return None

    def render(self) -> str:
        return "".join(f"{t:.3f} {src} {event}\n"
                       for t, src, event in self.records)


@dataclass(frozen=True)
class ScenarioMetrics:
    completion_time: float
    travelled_distance: float
    data_transferred: int
    avg_speed: float
    map_accuracy: float


@dataclass(frozen=True)
class RobotTally:
    name: str
    distance: float
    moving_time: float

    @property
    def avg_speed(self) -> float:
        return self.distance / self.moving_time if self.moving_time > 0 else 0.0


def compute_metrics(log: EventLog, ledger, robots: list[RobotTally],
                    map_accuracy: float = 0.0) -> ScenarioMetrics:
    """Assemble the run summary from the event log, the traffic ledger, and
    per-robot odometer tallies.

    Completion is the first completion-class event, falling back to the last
    logged time. Data counts only robot-namespace publishes, so cloud-side
    command traffic never inflates the uplink figure. Average speed divides
    each robot's distance by its own moving time, then averages the robots.
    """
    completion = None
    for t, _, e in log.records:
        if e in COMPLETION_EVENTS:
            completion = t
            break
    if completion is None:
        completion = log.records[-1][0] if log.records else 0.0
    data = sum(n for ns, n in ledger.by_namespace.items() if ns != "/")
    distance = sum(r.distance for r in robots)
    speeds = [r.avg_speed for r in robots]
    avg_speed = sum(speeds) / len(speeds) if speeds else 0.0
    return ScenarioMetrics(completion_time=completion,
                           travelled_distance=distance,
                           data_transferred=data,
                           avg_speed=avg_speed,
                           map_accuracy=map_accuracy)


def _truth_aligned_view(grid: OccupancyGrid, world: GroundTruthWorld) -> np.ndarray | None:
    """Grid classification resampled onto the world lattice, or None when the
    two do not overlap. The grid may have grown, shifting its origin by whole
    cells, so the view is cut with an integer offset."""
    off_r = round((world.origin.y - grid.origin_y) / grid.resolution)
    off_c = round((world.origin.x - grid.origin_x) / grid.resolution)
    out = np.full((world.height, world.width), UNKNOWN, dtype=np.uint8)
    r0, c0 = max(off_r, 0), max(off_c, 0)
    r1 = min(off_r + world.height, grid.height)
    c1 = min(off_c + world.width, grid.width)
    if r1 <= r0 or c1 <= c0:
        return None
    cls = grid.classification()
    out[r0 - off_r:r1 - off_r, c0 - off_c:c1 - off_c] = cls[r0:r1, c0:c1]
    return out


def map_accuracy_vs_truth(grid: OccupancyGrid, world: GroundTruthWorld) -> float:
    """Fraction of observed cells whose class matches the ground truth."""
    view = _truth_aligned_view(grid, world)
    if view is None:
        return 0.0
    observed = view != UNKNOWN
    if not observed.any():
        return 0.0
    match = np.where(world.occ, view == OCCUPIED, view == FREE)
    return float(match[observed].mean())


def coverage_vs_truth(grid: OccupancyGrid, world: GroundTruthWorld) -> float:
    """Fraction of the ground-truth free cells the map has observed at all."""
    view = _truth_aligned_view(grid, world)
    if view is None:
        return 0.0
    free_truth = ~world.occ
    if not free_truth.any():
        return 0.0
    return float((view[free_truth] != UNKNOWN).mean())


# ---------- per-robot bookkeeping ----------

@dataclass
class _Harness:
    """Robot-side state: the simulated body plus its sensor streams."""
    name: str
    state: RobotState
    handle: object
    scan_rng: np.random.Generator
    odom_rng: np.random.Generator
    cmd: Twist = Twist()
    moving_time: float = 0.0
    rgb_emitted: int = 0
    depth_emitted: int = 0
    stall: int = 0                 # consecutive ticks commanded but not moving
    retreat: int = 0               # ticks left of backing away from a bump
    blocked: int = 0               # consecutive ticks the drive found no way
    spin_recent: int = 0           # ticks since an in-place turn ended


@dataclass
class _SlamTrack:
    """Cloud-side mapping state for one robot."""
    odom_to_map: Pose2D | None    # None until the robot's frame is registered
    last_odom: Pose2D
    last_kf_pose: Pose2D | None = None
    last_kf: object | None = None
    kf_count: int = 0


@dataclass
class _MclState:
    """Cloud-side global-localization state for a joining robot."""
    rng: np.random.Generator
    particles: ParticleSet | None = None
    fld: LikelihoodField | None = None
    fld_rev: int = -1
    acc: Pose2D = Pose2D(0.0, 0.0, 0.0)
    updates: int = 0
    streak: int = 0


@dataclass
class _Target:
    centroid: tuple[int, int] | None   # None for operator-issued goals
    goal_xy: tuple[float, float]
    tracker: PathTracker
    face_xy: tuple[float, float] | None = None


def _clip(value: float, bound: float) -> float:
    return max(-bound, min(bound, value))


def _nearest_free_cell(cls: np.ndarray, cell: tuple[int, int],
                       max_radius: int = 24) -> tuple[int, int] | None:
    """Closest FREE cell to `cell`, searching outward ring by ring."""
    h, w = cls.shape
    r0 = min(max(cell[0], 0), h - 1)
    c0 = min(max(cell[1], 0), w - 1)
    if cls[r0, c0] == FREE:
        return (r0, c0)
    for radius in range(1, max_radius + 1):
        rlo, rhi = max(r0 - radius, 0), min(r0 + radius, h - 1)
        clo, chi = max(c0 - radius, 0), min(c0 + radius, w - 1)
        for r in range(rlo, rhi + 1):
            for c in range(clo, chi + 1):
                if max(abs(r - r0), abs(c - c0)) == radius and cls[r, c] == FREE:
                    return (r, c)
    return None


# ---------- the scenario loop ----------

class ScenarioRun:
    """One configured scenario, stepped to completion by run()."""

    def __init__(self, cfg: ScenarioConfig, trace: TeleopTrace | None = None) -> None:
        self.cfg = cfg
        self.trace = trace
        self.world = load_world(cfg.world_path)
        self.scan_cfg = ScanConfig()
        self.params = RobotParams()
        self.drive_params = RobotParams(footprint_radius=DRIVE_SAFETY_RADIUS)
        self.bw = BandwidthModel()
        self.master = CloudMaster(PROFILES[cfg.net])
        self.events = EventLog()
        self.payloads: dict[tuple[str, int], object] = {}

        missing = [s for s in cfg.spawns if s not in self.world.spawns]
        if missing:
            raise ValueError(f"world has no spawn named {missing[0]!r}")

        self.harness: list[_Harness] = []
        for i, spawn_name in enumerate(cfg.spawns):
            name = f"robot{i + 1}"
            handle = self.master.register_node(NodeName(f"/{name}", "sensors"))
            for topic in ("scan", "odom", "camera", "depth"):
                handle.advertise(f"/{name}/{topic}")
            self.harness.append(_Harness(
                name=name,
                state=make_robot(name, self.world.spawns[spawn_name]),
                handle=handle,
                scan_rng=seeded_stream(cfg.seed, f"{name}-scan"),
                odom_rng=seeded_stream(cfg.seed, f"{name}-odom"),
            ))
        self.by_name = {h.name: h for h in self.harness}
        self.names = [h.name for h in self.harness]

        self.cloud = self.master.register_node(NodeName("/", "navstack"))
        for name in self.names:
            self.cloud.advertise(f"/{name}/cmd_vel")
        self.master.register_service("ping", lambda req: req)
        self.master.register_service("move_to", self._svc_move_to)
        self.master.register_service("relocalize", self._svc_relocalize)

        # cloud-side state: the first robot's odometry frame is adopted as the
        # shared map frame; every later robot must localize before it may map
        self.grid = OccupancyGrid(self.world.resolution,
                                  origin_x=self.world.origin.x,
                                  origin_y=self.world.origin.y,
                                  width=self.world.width,
                                  height=self.world.height)
        self.graph = PoseGraph()
        self.kf_total = 0
        self.tracks: dict[str, _SlamTrack] = {}
        self.phase: dict[str, str] = {}
        self.mcl: dict[str, _MclState] = {}
        self.sweep_acc: dict[str, float] = {}
        for i, h in enumerate(self.harness):
            anchor = i == 0
            self.tracks[h.name] = _SlamTrack(
                odom_to_map=Pose2D(0.0, 0.0, 0.0) if anchor else None,
                last_odom=h.state.odom_pose)
            if cfg.kind == "manual":
                self.phase[h.name] = "manual"
            elif anchor:
                self.phase[h.name] = "sweep"
                self.sweep_acc[h.name] = 0.0
            else:
                self.phase[h.name] = "localize"
                self.mcl[h.name] = _MclState(
                    rng=seeded_stream(cfg.seed, f"{h.name}-mcl"))

        self.targets: dict[str, _Target] = {}
        self.override_goal: dict[str, tuple[float, float]] = {}
        self.force_kf: set[str] = set()
        self._fld: LikelihoodField | None = None
        self._fld_rev = -1
        self.last_target: dict[str, tuple[int, int] | None] = {}
        self.strikes: dict[tuple[int, int], int] = {}
        self.idle_sweeps = 0
        self.known_watermark = 0
        self.last_growth_t = 0.0
        self.next_assign = 0.0
        self.need_assign = False
        self.estop: dict[str, bool] = {n: False for n in self.names}
        self.teleop_cmd: dict[str, Twist] = {}
        self.finish_requested = False
        self.complete = False
        self.sim_time = 0.0

    # -- services (invoked by the console gateway at tick boundaries) --

    def _svc_move_to(self, req: dict) -> dict:
        name = req.get("robot")
        if name not in self.by_name or self.phase.get(name) not in ("explore", "sweep"):
            return {"ok": False, "reason": "robot not navigating autonomously"}
        goal = (float(req["x"]), float(req["y"]))
        est = self._est(name)
        path = plan_path(self.grid, (est.x, est.y), goal,
                         inflation_radius=PLAN_INFLATION)
        if path is None:
            return {"ok": False, "reason": "no path"}
        self.phase[name] = "explore"
        self.override_goal[name] = goal
        self.targets[name] = _Target(None, goal, PathTracker(path))
        return {"ok": True}

    def _svc_relocalize(self, req: dict) -> dict:
        name = req.get("robot")
        if name not in self.mcl:
            return {"ok": False, "reason": "robot has no localization filter"}
        st = self.mcl[name]
        st.particles = None
        st.updates = 0
        st.streak = 0
        st.acc = Pose2D(0.0, 0.0, 0.0)
        self.tracks[name].odom_to_map = None
        self.tracks[name].last_kf_pose = None
        self.tracks[name].last_kf = None
        self.phase[name] = "localize"
        self.targets.pop(name, None)
        self.override_goal.pop(name, None)
        return {"ok": True}

    # -- robot side --

    def _publish_sensors(self, t: float) -> None:
        beams = scan_payload_bytes(self.scan_cfg.beam_count)
        for h in self.harness:
            scan = simulate_scan(self.world, h.state.true_pose, self.scan_cfg,
                                 rng=h.scan_rng, stamp=t, frame=h.name)
            env = h.handle.publish(f"/{h.name}/scan", beams, t)
            self.payloads[(env.publisher.fqn, env.seq)] = (scan, h.state.odom_pose)
            h.handle.publish(f"/{h.name}/odom", POSE_PAYLOAD_BYTES, t)
            rgb_due = int(math.floor(self.bw.rgb_rate_hz * (t + self.cfg.dt) + 1e-9))
            if rgb_due > h.rgb_emitted:
                h.handle.publish(f"/{h.name}/camera",
                                 video_payload_bytes(self.bw, rgb_due - h.rgb_emitted), t)
                h.rgb_emitted = rgb_due
            depth_due = int(math.floor(self.bw.depth_rate_hz * (t + self.cfg.dt) + 1e-9))
            if depth_due > h.depth_emitted:
                h.handle.publish(f"/{h.name}/depth",
                                 depth_payload_bytes(self.bw, depth_due - h.depth_emitted), t)
                h.depth_emitted = depth_due

    def _step_robots(self) -> None:
        for h in self.harness:
            before = h.state.odom_pose
            h.state = step_robot(self.world, h.state, self.params, h.cmd,
                                 self.cfg.dt, rng=h.odom_rng)
            if abs(h.state.twist.v) > 1e-9:
                h.moving_time += self.cfg.dt
            # odometry is the robot's own account of executed motion: a
            # drive command that produces none means the body is pressed
            # against something the map has not seen yet
            moved = before.distance_to(h.state.odom_pose)
            if abs(h.cmd.v) > 0.05 and moved < 0.2 * abs(h.cmd.v) * self.cfg.dt:
                h.stall += 1
            else:
                h.stall = 0
            if abs(h.cmd.w) > 0.3 and abs(h.cmd.v) < 0.2:
                h.spin_recent = SPIN_HOLD_TICKS
            elif h.spin_recent > 0:
                h.spin_recent -= 1

    # -- bus routing --

    def _route(self, envelopes, t: float) -> None:
        for env in envelopes:
            parts = env.topic.split("/")
            name, kind = parts[1], parts[-1]
            if kind == "scan":
                scan, odom = self.payloads.pop((env.publisher.fqn, env.seq))
                self._process_bundle(name, env.sent_at, scan, odom, t)
            elif kind == "cmd_vel":
                self.by_name[name].cmd = self.payloads.pop(
                    (env.publisher.fqn, env.seq))

    # -- cloud side: perception --

    def _est(self, name: str) -> Pose2D:
        track = self.tracks[name]
        base = track.odom_to_map if track.odom_to_map is not None else Pose2D(0, 0, 0)
        return base.compose(track.last_odom)

    def _process_bundle(self, name: str, stamp: float, scan: LaserScan,
                        odom: Pose2D, t_now: float) -> None:
        track = self.tracks[name]
        delta = track.last_odom.delta_to(odom)
        track.last_odom = odom
        ph = self.phase[name]
        if ph == "sweep":
            self.sweep_acc[name] += abs(delta.theta)
            if self.sweep_acc[name] >= SWEEP_ANGLE:
                self.phase[name] = "explore"
                self.need_assign = True
                self.events.log(t_now, name, "sweep_complete")
        elif ph == "localize":
            self._mcl_step(name, delta, scan, odom, t_now)
        if self.tracks[name].odom_to_map is not None:
            force = name in self.force_kf
            if force:
                self.force_kf.discard(name)
            self._slam_step(name, stamp, scan, odom, force=force)

    def _map_clearance(self, pose: Pose2D) -> float:
        r, c = self.grid.world_to_cell(pose.x, pose.y)
        if not (0 <= r < self.grid.height and 0 <= c < self.grid.width):
            return math.inf
        return float(self.grid.occupied_distances()[r, c])

    def _field(self) -> LikelihoodField:
        if self._fld is None or self._fld_rev != self.grid.revision:
            self._fld = LikelihoodField(self.grid)
            self._fld_rev = self.grid.revision
        return self._fld

    def _refine_pose(self, scan: LaserScan, pose: Pose2D) -> Pose2D:
        """Subcell trim of a pose against the likelihood field.

        The lattice matcher is blind inside one cell; the field is smooth
        there, so a small pattern search recovers the fraction the lattice
        cannot see. Only beams landing on mapped cells vote, and the search
        radius keeps the result inside the cell the matcher picked.
        """
        finite = np.isfinite(scan.ranges)
        if not finite.any():
            return pose
        # half-cell inset so endpoints aim at cell centers, matching the
        # convention the lattice matcher scores with; without it every
        # refinement pulls the pose a few millimetres toward the wall
        r = scan.ranges[finite] + 0.5 * self.grid.resolution
        a = scan.beam_angles()[finite]
        fld = self._field()

        def score(px: float, py: float, pth: float) -> float:
            ang = pth + a
            ex = px + r * np.cos(ang)
            ey = py + r * np.sin(ang)
            known = fld.known_at(ex, ey)
            # beams grazing already-mapped walls carry the signal even when
            # most of the view points into unexplored space, so the gate is
            # a count of voters, not a fraction of the scan
            if int(known.sum()) < REFINE_MIN_BEAMS:
                return -1.0
            return float(fld.value_at(ex[known], ey[known]).mean())

        best = (pose.x, pose.y, pose.theta)
        best_score = score(*best)
        if best_score < 0.0:
            return pose
        step_t, step_r = 0.02, 0.01
        bound_t, bound_r = 0.06, 0.03
        for _ in range(3):
            improved = True
            while improved:
                improved = False
                x, y, th = best
                for cand in ((x + step_t, y, th), (x - step_t, y, th),
                             (x, y + step_t, th), (x, y - step_t, th),
                             (x, y, th + step_r), (x, y, th - step_r)):
                    if (abs(cand[0] - pose.x) > bound_t
                            or abs(cand[1] - pose.y) > bound_t
                            or abs(cand[2] - pose.theta) > bound_r):
                        continue
                    s = score(*cand)
                    if s > best_score + 1e-9:
                        best, best_score = cand, s
                        improved = True
            step_t *= 0.5
            step_r *= 0.5
        return Pose2D(*best)

    def _endpoint_score(self, scan: LaserScan, pose: Pose2D) -> float:
        """Mean mapped-occupancy probability under the scan's endpoints."""
        finite = np.isfinite(scan.ranges)
        if not finite.any():
            return 0.0
        r = scan.ranges[finite] + 0.5 * self.grid.resolution
        a = scan.beam_angles()[finite] + pose.theta
        wx = pose.x + r * np.cos(a)
        wy = pose.y + r * np.sin(a)
        prob = self.grid.probability()
        rows = np.floor((wy - self.grid.origin_y) / self.grid.resolution)
        cols = np.floor((wx - self.grid.origin_x) / self.grid.resolution)
        rows = rows.astype(np.int64)
        cols = cols.astype(np.int64)
        inside = ((rows >= 0) & (rows < self.grid.height)
                  & (cols >= 0) & (cols < self.grid.width))
        vals = np.full(len(rows), 0.5)
        vals[inside] = prob[rows[inside], cols[inside]]
        return float(vals.mean())

    def _constrained_correction(self, scan: LaserScan, prior: Pose2D,
                                matched: Pose2D,
                                allow_rot: bool = True) -> Pose2D:
        """Turn a raw match into a bounded trim of the odometric prior.

        Components along a flat score axis are dropped as unobservable,
        the rest is clamped to one lattice step of translation and a
        small rotation so a single noisy match can never yank the
        estimate, only steer it. Rotation votes are dropped entirely
        around turns in place: there the scan registers against ink the
        same turn just painted, and those votes ratchet the heading by a
        biased trickle that later converts to lateral drift at speed.
        """
        res = self.grid.resolution
        s0 = self._endpoint_score(scan, matched)
        x, y = matched.x, matched.y
        flat_x = min(
            s0 - self._endpoint_score(scan, Pose2D(x + res, y, matched.theta)),
            s0 - self._endpoint_score(scan, Pose2D(x - res, y, matched.theta)),
        ) < MATCH_FLAT_EPS
        flat_y = min(
            s0 - self._endpoint_score(scan, Pose2D(x, y + res, matched.theta)),
            s0 - self._endpoint_score(scan, Pose2D(x, y - res, matched.theta)),
        ) < MATCH_FLAT_EPS
        dx = 0.0 if flat_x else _clip(x - prior.x, MATCH_STEP_TRANS)
        dy = 0.0 if flat_y else _clip(y - prior.y, MATCH_STEP_TRANS)
        dth = 0.0
        if allow_rot:
            dth = _clip(norm_angle(matched.theta - prior.theta), MATCH_STEP_ROT)
        return Pose2D(prior.x + dx, prior.y + dy, prior.theta + dth)

    def _slam_step(self, name: str, stamp: float, scan: LaserScan,
                   odom: Pose2D, force: bool = False) -> None:
        track = self.tracks[name]
        prior = track.odom_to_map.compose(odom)
        if (not force and track.last_kf_pose is not None
                and not should_add_keyframe(track.last_kf_pose, prior)):
            return
        if self.kf_total > 0 and self._map_clearance(prior) < KF_MIN_CLEARANCE:
            return   # blind-radius pose, wait for a healthier viewpoint
        h = self.by_name[name]
        corrected = prior
        if self.kf_total > 0:
            result = match_scan(self.grid, scan, prior)
            if result.accepted:
                corrected = self._constrained_correction(
                    scan, prior, result.corrected,
                    allow_rot=h.spin_recent == 0)
            corrected = self._refine_pose(scan, corrected)
            track.odom_to_map = corrected.compose(odom.inverse())
        if h.stall == 0 and h.retreat == 0:
            # a body wedged against unmapped structure publishes blind,
            # poisonous scans; keep those out of the map
            integrate_scan(self.grid, corrected, scan,
                           range_max=self.scan_cfg.range_max)
        kf = self.graph.add_keyframe(name, stamp, corrected, scan,
                                     anchor=track.last_kf is None)
        if track.last_kf is not None:
            self.graph.add_edge(track.last_kf.node_id, kf.node_id,
                                track.last_kf.pose.delta_to(corrected))
        track.last_kf = kf
        track.last_kf_pose = corrected
        track.kf_count += 1
        self.kf_total += 1

    def _mcl_step(self, name: str, delta: Pose2D, scan: LaserScan,
                  odom: Pose2D, t_now: float) -> None:
        st = self.mcl[name]
        if st.particles is None:
            cls = self.grid.classification()
            if int(np.count_nonzero(cls == FREE)) < MCL_MIN_FREE_CELLS:
                return
            st.particles = init_uniform(self.grid, MCL_PARTICLES, st.rng)
            st.acc = Pose2D(0.0, 0.0, 0.0)
            st.updates = 0
            st.streak = 0
            return
        st.acc = st.acc.compose(delta)
        if (math.hypot(st.acc.x, st.acc.y) < MCL_GATE_TRANS
                and abs(st.acc.theta) < MCL_GATE_ROT):
            return
        if st.fld is None or st.fld_rev != self.grid.revision:
            st.fld = LikelihoodField(self.grid)
            st.fld_rev = self.grid.revision
        predict(st.particles, st.acc, MotionNoise(), st.rng)
        st.acc = Pose2D(0.0, 0.0, 0.0)
        update_weights(st.particles, st.fld, scan)
        est, cov, converged = estimate(st.particles)
        st.updates += 1
        consistency, overlap = scan_support(est, st.fld, scan)
        supported = (overlap >= SUPPORT_MIN_OVERLAP
                     and consistency >= MCL_CONSISTENCY_MIN)
        st.streak = st.streak + 1 if (supported and converged) else 0
        if (st.updates >= MCL_MIN_UPDATES and st.streak >= MCL_STREAK
                and self._pose_in_free_space(est)):
            track = self.tracks[name]
            track.odom_to_map = est.compose(odom.inverse())
            track.last_kf_pose = None
            self.phase[name] = "explore"
            self.need_assign = True
            self.events.log(t_now, name, "localization_converged")
            return
        if effective_sample_size(st.particles) < st.particles.size / 2:
            st.particles = resample_systematic(st.particles, st.rng)
        if st.updates < MCL_INJECT_UPDATES:
            inject_scored(st.particles, self.grid, st.fld, scan, k=50,
                          rng=st.rng)
        elif st.updates >= MCL_RETRY_UPDATES:
            self.events.log(t_now, name, "localization_restart")
            st.particles = None

    def _pose_in_free_space(self, pose: Pose2D) -> bool:
        cls = self.grid.classification()
        r, c = self.grid.world_to_cell(pose.x, pose.y)
        return (0 <= r < self.grid.height and 0 <= c < self.grid.width
                and cls[r, c] == FREE)

    # -- cloud side: control --

    def _cloud_control(self, t: float) -> None:
        # a map that knows no free space yet is immature, not explored
        cls = self.grid.classification() if self.kf_total > 0 else None
        if cls is not None and bool((cls == FREE).any()):
            if self.cfg.kind == "manual":
                if coverage_vs_truth(self.grid, self.world) >= self.cfg.coverage_stop:
                    self.events.log(t, "runner", "coverage_reached")
                    self.complete = True
                    return
            elif exploration_complete(self.grid):
                self.events.log(t, "explorer", "exploration_complete")
                self.complete = True
                return
            else:
                # pose drift can leave unresolvable slivers of unknown
                # pinched between displaced wall paint; when the map has
                # stopped growing the job is done even if such frontier
                # debris survives the cluster filter
                known = int((cls != UNKNOWN).sum())
                if known >= self.known_watermark + GROWTH_EPS_CELLS:
                    self.known_watermark = known
                    self.last_growth_t = t
                elif t - self.last_growth_t >= STAGNATION_WINDOW:
                    self.events.log(t, "explorer", "exploration_complete")
                    self.complete = True
                    return

        if self.cfg.kind != "manual":
            explorers = [n for n in self.names if self.phase[n] == "explore"]
            if explorers and (t >= self.next_assign or self.need_assign):
                candidates, assigned = self._reassign(explorers, t)
                self.next_assign = t + REASSIGN_PERIOD
                self.need_assign = False
                # frontier clusters may survive in map debris a physical
                # robot can never reach; exploration is over once nothing
                # serviceable is left for anybody, sustained a few sweeps
                if (assigned == 0 and not self.override_goal
                        and len(explorers) == len(self.names)):
                    self.idle_sweeps += 1
                    if self.idle_sweeps >= IDLE_SWEEP_LIMIT:
                        self.events.log(t, "explorer", "exploration_complete")
                        self.complete = True
                        return
                else:
                    self.idle_sweeps = 0

        for name in self.names:
            cmd = self._command_for(name, t)
            env = self.cloud.publish(f"/{name}/cmd_vel", TWIST_PAYLOAD_BYTES, t)
            self.payloads[(env.publisher.fqn, env.seq)] = cmd

    def _command_for(self, name: str, t: float) -> Twist:
        if self.estop[name]:
            return Twist(0.0, 0.0)
        ph = self.phase[name]
        if ph == "manual":
            if self.trace is not None:
                return self.trace.command_at(t)
            return self.teleop_cmd.get(name, Twist(0.0, 0.0))
        if ph in ("sweep", "localize"):
            return Twist(0.0, self.params.w_max)
        if ph == "explore":
            harness = self.by_name[name]
            if harness.retreat > 0:
                harness.retreat -= 1
                return Twist(-0.3, 0.0)
            if harness.stall >= STALL_TICKS:
                harness.stall = 0
                harness.retreat = RETREAT_TICKS
                target = self.targets.get(name)
                if target is not None:
                    if target.face_xy is not None:
                        # physically blocked short of the cluster; after a
                        # few such strikes stop chasing it, the map there
                        # does not describe anything the body can reach
                        bucket = self._service_bucket(*target.face_xy)
                        self.strikes[bucket] = self.strikes.get(bucket, 0) + 1
                    self._finish_target(name, target)
                return Twist(-0.3, 0.0)
            cmd = self._drive(name, t)
            target = self.targets.get(name)
            if target is not None and abs(cmd.v) < 0.05:
                # the reactive layer sees no safe motion at all; a costmap
                # jammed like this never clears by waiting, so give the
                # target up before the run dies parked
                harness.blocked += 1
                if harness.blocked >= BLOCKED_TICKS:
                    harness.blocked = 0
                    if target.face_xy is not None:
                        bucket = self._service_bucket(*target.face_xy)
                        self.strikes[bucket] = self.strikes.get(bucket, 0) + 1
                    self._finish_target(name, target)
            else:
                harness.blocked = 0
            return cmd
        return Twist(0.0, 0.0)

    def _finish_target(self, name: str, target: _Target) -> Twist:
        self.targets.pop(name)
        if target.centroid is None:
            self.override_goal.pop(name, None)
        self.need_assign = True
        return Twist(0.0, 0.0)

    def _drive(self, name: str, t: float) -> Twist:
        target = self.targets.get(name)
        if target is None:
            return Twist(0.0, 0.0)   # nothing reachable, wait for the map
        est = self._est(name)
        status = target.tracker.follow(est)
        if status.off_course:
            path = plan_path(self.grid, (est.x, est.y), target.goal_xy,
                             inflation_radius=PLAN_INFLATION)
            if path is None:
                # the map shifted and the goal fell off the costmap; that
                # counts against the cluster like any other failed service
                if target.face_xy is not None:
                    bucket = self._service_bucket(*target.face_xy)
                    self.strikes[bucket] = self.strikes.get(bucket, 0) + 1
                return self._finish_target(name, target)
            target.tracker = PathTracker(path)
            status = target.tracker.follow(est)
        if status.reached:
            if target.face_xy is not None:
                # arriving on top of a frontier normally dissolves it on
                # the way in; one that survives the visit is map debris
                # and must not monopolize the allocator
                bucket = self._service_bucket(*target.face_xy)
                self.strikes[bucket] = self.strikes.get(bucket, 0) + 1
            return self._finish_target(name, target)
        return drive_command(self.grid, est, status.desired_heading,
                             params=self.drive_params)

    def _reassign(self, explorers: list[str], t: float) -> tuple[int, int]:
        """Allocate frontier targets; returns (candidates, assigned)."""
        frontiers = [f for f in detect_frontiers(self.grid)
                     if self.strikes.get(
                         self._service_bucket(*self.grid.cell_center(*f.centroid)),
                         0) < STRIKE_LIMIT]
        # pose drift smears wall paint, and the slivers between the copies
        # read as frontiers hugging the wall face; clusters standing in the
        # open are the ones that actually lead anywhere, so while any exist
        # the wall-huggers wait
        dist = self.grid.occupied_distances()
        clear = [f for f in frontiers
                 if dist[f.centroid] >= GOAL_CLEARANCE_MIN]
        if clear:
            frontiers = clear
        big = [f for f in frontiers if f.size >= TARGET_MIN_CLUSTER]
        if big:
            frontiers = big
        free_robots = [n for n in explorers if n not in self.override_goal]
        # a robot already driving at a still-live frontier keeps going;
        # re-aiming mid-leg on every sweep turns routes into zigzags
        keep: set[str] = set()
        for n in free_robots:
            cur = self.targets.get(n)
            if cur is None or cur.face_xy is None:
                continue
            gx, gy = cur.goal_xy
            if any(math.hypot(cx - gx, cy - gy) <= 0.5
                   for cx, cy in (self.grid.cell_center(*f.centroid)
                                  for f in frontiers)):
                keep.add(n)
        free_robots = [n for n in free_robots if n not in keep]
        for n in free_robots:
            self.targets.pop(n, None)
        if not frontiers or not free_robots:
            return len(frontiers), len(keep)
        cls = self.grid.classification()
        cells = {}
        for n in free_robots:
            est = self._est(n)
            cell = _nearest_free_cell(cls, self.grid.world_to_cell(est.x, est.y))
            if cell is not None:
                cells[n] = cell
        if not cells:
            return len(frontiers), len(keep)
        if self.cfg.strategy == "nearest":
            assignment = {}
            for n in cells:
                f = assign_nearest(self.grid, cells[n], frontiers)
                if f is not None:
                    assignment[n] = f
        elif self.cfg.strategy == "mr-nearest":
            assignment = assign_multirobot_nearest(self.grid, cells, frontiers)
        else:
            assignment = assign_minpos(self.grid, cells, frontiers)
        assigned = len(keep)
        for n in free_robots:
            est = self._est(n)
            ordered = [assignment[n]] if n in assignment else []
            ordered += [f for f in frontiers if not ordered or f is not ordered[0]]
            for f in ordered:
                target = self._aim_at_frontier(n, est, f)
                if target is not None:
                    self.targets[n] = target
                    assigned += 1
                    if self.last_target.get(n) != f.centroid:
                        self.last_target[n] = f.centroid
                        self.events.log(t, n,
                                        f"target {f.centroid[0]} {f.centroid[1]}")
                    break
        return len(frontiers), assigned

    def _aim_at_frontier(self, name: str, est: Pose2D, f) -> _Target | None:
        """Plan straight at the cluster; traversal is what resolves it.

        The goal is the frontier centroid itself, pulled back toward the
        robot in steps when inflation makes the exact cell unplannable.
        """
        cx, cy = self.grid.cell_center(*f.centroid)
        dx, dy = est.x - cx, est.y - cy
        span = math.hypot(dx, dy)
        for pull in (0.0, 0.3, 0.6, 0.9):
            if span > pull:
                goal = (cx + dx / span * pull, cy + dy / span * pull)
            else:
                goal = (est.x, est.y)
            path = plan_path(self.grid, (est.x, est.y), goal,
                             inflation_radius=PLAN_INFLATION)
            if path is not None:
                if pull > 0.0:
                    # the cluster itself is unplannable and only gets a
                    # drive-by look; charge it now so it cannot soak up
                    # visit after visit
                    bucket = self._service_bucket(cx, cy)
                    self.strikes[bucket] = self.strikes.get(bucket, 0) + 1
                return _Target(f.centroid, goal, PathTracker(path),
                               face_xy=(cx, cy))
        return None

    @staticmethod
    def _service_bucket(cx: float, cy: float) -> tuple[int, int]:
        # world-frame 0.2 m buckets, immune to grid growth renumbering cells
        return (round(cx / 0.2), round(cy / 0.2))

    # -- the loop --

    def run(self, live=None) -> RunResult:
        if self.cfg.kind == "manual" and self.trace is None and live is None:
            raise ValueError("manual scenario needs a teleop trace or a live console")
        k = 0
        t = 0.0
        while True:
            t = k * self.cfg.dt
            self.sim_time = t
            if live is not None:
                live.apply(self, t)
            if self.finish_requested:
                self.events.log(t, "operator", "finish")
                break
            if (self.cfg.kind == "manual" and self.trace is not None
                    and t >= self.trace.end_time - 1e-9):
                self.events.log(t, "operator", "trace_end")
                break
            if t >= self.cfg.max_sim_time:
                self.events.log(t, "runner", "timeout")
                break
            self._publish_sensors(t)
            self._route(self.master.deliver_due(t), t)
            self._cloud_control(t)
            if self.complete:
                break
            self._route(self.master.deliver_due(t), t)
            self._step_robots()
            if live is not None:
                live.emit(self, t)
            k += 1
        return self._finalize(t)

    def _finalize(self, t_end: float) -> RunResult:
        self.events.log(t_end, "runner", "run_end")
        if self.kf_total > 1:
            report = self.graph.optimize()
            self.events.log(t_end, "mapper",
                            f"graph_residual {report.final_residual:.6f}")
        accuracy = map_accuracy_vs_truth(self.grid, self.world)
        tallies = [RobotTally(h.name, h.state.distance_travelled, h.moving_time)
                   for h in self.harness]
        metrics = compute_metrics(self.events, self.master.ledger, tallies,
                                  map_accuracy=accuracy)
        pgm, meta = export_pgm(self.grid)
        payload = {
            "completion_time": round(metrics.completion_time, 3),
            "travelled_distance": round(metrics.travelled_distance, 3),
            "data_transferred": metrics.data_transferred,
            "avg_speed": round(metrics.avg_speed, 4),
            "map_accuracy": round(metrics.map_accuracy, 4),
            "config": {
                "kind": self.cfg.kind,
                "world": str(self.cfg.world_path),
                "spawns": list(self.cfg.spawns),
                "strategy": self.cfg.strategy,
                "net": self.cfg.net,
                "seed": self.cfg.seed,
                "dt": self.cfg.dt,
            },
            "per_robot": {
                tally.name: {
                    "distance": round(tally.distance, 3),
                    "moving_time": round(tally.moving_time, 3),
                    "avg_speed": round(tally.avg_speed, 4),
                    "uplink_bytes": self.master.ledger.namespace_bytes(
                        f"/{tally.name}"),
                } for tally in tallies
            },
        }
        metrics_json = json.dumps(payload, sort_keys=True, indent=2) + "\n"
        return RunResult(metrics=metrics, metrics_json=metrics_json,
                         map_pgm=pgm, map_meta=meta,
                         events_text=self.events.render(),
                         grid=self.grid, events=self.events)


@dataclass
class RunResult:
    metrics: ScenarioMetrics
    metrics_json: str
    map_pgm: bytes
    map_meta: str
    events_text: str
    grid: OccupancyGrid
    events: EventLog


def run_scenario(cfg: ScenarioConfig, trace: TeleopTrace | None = None,
                 out_dir: str | Path | None = None, live=None) -> RunResult:
    """Run one scenario to completion, optionally writing artifacts."""
    result = ScenarioRun(cfg, trace).run(live)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(result.metrics_json)
        (out / "map.pgm").write_bytes(result.map_pgm)
        (out / "map.meta").write_text(result.map_meta)
        (out / "events.log").write_text(result.events_text)
    return result


def replay_trace(cfg: ScenarioConfig, trace: TeleopTrace,
                 out_dir: str | Path | None = None) -> RunResult:
    """Drive the manual scenario from a recorded teleop trace."""
    if cfg.kind != "manual":
        raise ValueError("replay_trace requires a manual scenario")
    return run_scenario(cfg, trace=trace, out_dir=out_dir)
