"""Message transport between robots and the cloud master.

Models what matters for offloaded navigation: one-way latency per published
message, request/reply round trips, and an exact ledger of bytes moved. It
deliberately does not model TCP dynamics, loss, or retransmission.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from heapq import heappop, heappush

import numpy as np


class BusError(Exception):
    pass


class NameConflictError(BusError):
    pass


class UnknownTopicError(BusError):
    pass


class UnknownServiceError(BusError):
    pass


# ---------- naming ----------

@dataclass(frozen=True)
class NodeName:
    namespace: str   # "/" for cloud-side nodes, "/<robot>" for robot-side ones
    name: str

    def __post_init__(self) -> None:
        if not self.namespace.startswith("/") or self.namespace.rstrip("/") != self.namespace and self.namespace != "/":
            raise ValueError(f"bad namespace {self.namespace!r}")
        if not self.name or "/" in self.name:
            raise ValueError(f"bad node name {self.name!r}")

    @property
    def fqn(self) -> str:
        if self.namespace == "/":
            return "/" + self.name
        return self.namespace + "/" + self.name


# ---------- network profiles ----------

@dataclass(frozen=True)
class NetworkProfile:
    label: str
    latency_ms: float            # one-way
    jitter_stddev_ms: float = 0.0


PROFILES: dict[str, NetworkProfile] = {
    "lan": NetworkProfile("lan", 1.0),
    "azure-uk-west": NetworkProfile("azure-uk-west", 115.0),
    "azure-north-europe": NetworkProfile("azure-north-europe", 126.0),
    "azure-west-europe": NetworkProfile("azure-west-europe", 136.0),
}


# ---------- envelopes and accounting ----------

@dataclass(frozen=True)
class Envelope:
    seq: int
    topic: str
    publisher: NodeName
    payload_bytes: int
    sent_at: float
    deliver_at: float


class TrafficLedger:
    """Byte totals per namespace and per topic, credited at publish time."""

    def __init__(self) -> None:
        self.by_namespace: dict[str, int] = {}
        self.by_topic: dict[str, int] = {}
        self.messages = 0

    def credit(self, namespace: str, topic: str, nbytes: int) -> None:
        self.by_namespace[namespace] = self.by_namespace.get(namespace, 0) + nbytes
        self.by_topic[topic] = self.by_topic.get(topic, 0) + nbytes
        self.messages += 1

    @property
    def total_bytes(self) -> int:
        return sum(self.by_namespace.values())

    def namespace_bytes(self, namespace: str) -> int:
        return self.by_namespace.get(namespace, 0)

    def report(self) -> dict:
        return {
            "total_bytes": self.total_bytes,
            "messages": self.messages,
            "by_namespace": dict(sorted(self.by_namespace.items())),
            "by_topic": dict(sorted(self.by_topic.items())),
        }


def scan_payload_bytes(beam_count: int) -> int:
    """Wire size of one scan: four bytes per beam plus a fixed header."""
    return beam_count * 4 + 32


def video_payload_bytes(model: BandwidthModel, frames: int) -> int:
    """Wire size of `frames` compressed camera frames."""
    per_frame = round(model.frame_pixels * model.rgb_bytes_per_pixel / model.compression_ratio)
    return frames * per_frame


def depth_payload_bytes(model: BandwidthModel, frames: int) -> int:
    """Wire size of `frames` compressed depth frames."""
    per_frame = round(model.frame_pixels * model.depth_bytes_per_pixel / model.compression_ratio)
    return frames * per_frame


POSE_PAYLOAD_BYTES = 48   # stamped 2-D pose


# ---------- the master ----------

@dataclass
class ServiceReply:
    value: object
    rtt_ms: float
    reply_at: float


class NodeHandle:
    def __init__(self, master: CloudMaster, node: NodeName) -> None:
        self._master = master
        self.node = node

    def advertise(self, topic: str) -> None:
        self._master.advertise(self, topic)

    def publish(self, topic: str, payload_bytes: int, now: float) -> Envelope:
        return self._master.publish(self, topic, payload_bytes, now)


class CloudMaster:
    """Registry, delayed pub/sub delivery, and request/reply services."""

    def __init__(self, profile: NetworkProfile = PROFILES["lan"],
                 rng: np.random.Generator | None = None) -> None:
        self.profile = profile
        self._rng = rng
        self._nodes: dict[str, NodeHandle] = {}
        self._advertised: dict[str, set[str]] = {}
        self._queue: list[tuple[float, str, int, Envelope]] = []
        self._seq: dict[str, int] = {}
        self._stream_floor: dict[tuple[str, str], float] = {}
        self._services: dict[str, tuple[object, float]] = {}
        self._last_deliver_now = -math.inf
        self.ledger = TrafficLedger()

    # -- registry --

    def register_node(self, node: NodeName) -> NodeHandle:
        if node.fqn in self._nodes:
            raise NameConflictError(f"node name already registered: {node.fqn}")
        handle = NodeHandle(self, node)
        self._nodes[node.fqn] = handle
        self._advertised[node.fqn] = set()
        return handle

    def lookup(self, fqn: str) -> NodeHandle:
        try:
            return self._nodes[fqn]
        except KeyError:
            raise BusError(f"unknown node: {fqn}") from None

    # -- pub/sub --

    def advertise(self, handle: NodeHandle, topic: str) -> None:
        if not topic.startswith("/"):
            raise UnknownTopicError(f"topic must be absolute: {topic!r}")
        self._advertised[handle.node.fqn].add(topic)

    def _one_way_s(self) -> float:
        jitter = 0.0
        if self.profile.jitter_stddev_ms > 0.0:
            if self._rng is None:
                raise BusError("jittered profile needs an rng")
            jitter = max(0.0, float(self._rng.normal(0.0, self.profile.jitter_stddev_ms)))
        return (self.profile.latency_ms + jitter) / 1000.0

    def publish(self, handle: NodeHandle, topic: str, payload_bytes: int, now: float) -> Envelope:
        fqn = handle.node.fqn
        if topic not in self._advertised.get(fqn, ()):
            raise UnknownTopicError(f"{fqn} has not advertised {topic!r}")
        if payload_bytes < 0:
            raise BusError("payload size cannot be negative")
        seq = self._seq.get(fqn, 0)
        self._seq[fqn] = seq + 1
        deliver_at = now + self._one_way_s()
        # jitter must never reorder a publisher's stream on one topic
        floor = self._stream_floor.get((fqn, topic), -math.inf)
        deliver_at = max(deliver_at, floor)
        self._stream_floor[(fqn, topic)] = deliver_at
        env = Envelope(seq=seq, topic=topic, publisher=handle.node,
                       payload_bytes=payload_bytes, sent_at=now, deliver_at=deliver_at)
        heappush(self._queue, (env.deliver_at, fqn, seq, env))
        self.ledger.credit(handle.node.namespace, topic, payload_bytes)
        return env

    def deliver_due(self, now: float) -> list[Envelope]:
        """Drain every message whose delivery time has arrived, in order."""
        if now < self._last_deliver_now:
            raise BusError("delivery clock moved backwards")
        self._last_deliver_now = now
        due: list[Envelope] = []
        while self._queue and self._queue[0][0] <= now + 1e-12:
            due.append(heappop(self._queue)[3])
        return due

    @property
    def pending_count(self) -> int:
        return len(self._queue)

    # -- services --

    def register_service(self, name: str, handler, processing_s: float = 0.0) -> None:
        if name in self._services:
            raise NameConflictError(f"service already registered: {name}")
        self._services[name] = (handler, processing_s)

    def has_service(self, name: str) -> bool:
        return name in self._services

    def call_service(self, name: str, request: object, now: float) -> ServiceReply:
        try:
            handler, processing_s = self._services[name]
        except KeyError:
            raise UnknownServiceError(f"unknown service: {name}") from None
        value = handler(request)
        rtt_s = self._one_way_s() + processing_s + self._one_way_s()
        return ServiceReply(value=value, rtt_ms=rtt_s * 1000.0, reply_at=now + rtt_s)


# ---------- sizing formulas ----------

@dataclass(frozen=True)
class ScanRateParams:
    detection_distance: float = 1.5   # farthest obstacle that must appear between scans, metres
    robot_speed: float = 0.65         # metres per second


@dataclass(frozen=True)
class ScanRateReport:
    interval_s: float
    rate_hz: float


def min_scan_rate(params: ScanRateParams = ScanRateParams()) -> ScanRateReport:
    """Largest scan interval that still catches an obstacle D metres out at speed V."""
    if params.detection_distance <= 0:
        raise ValueError("detection distance must be positive")
    if params.robot_speed <= 0:
        raise ValueError("robot speed must be positive")
    interval = params.detection_distance / params.robot_speed
    return ScanRateReport(interval_s=interval, rate_hz=1.0 / interval)


MB = 1048576   # binary megabyte


@dataclass(frozen=True)
class BandwidthModel:
    frame_pixels: int = 640 * 480
    rgb_bytes_per_pixel: int = 3
    depth_bytes_per_pixel: int = 1
    rgb_rate_hz: int = 30
    depth_rate_hz: int = 10
    compression_ratio: float = 23.0

    def __post_init__(self) -> None:
        if self.frame_pixels <= 0 or self.rgb_rate_hz <= 0 or self.depth_rate_hz <= 0:
            raise ValueError("bandwidth model values must be positive")
        if self.compression_ratio <= 0:
            raise ValueError("compression ratio must be positive")


@dataclass(frozen=True)
class BandwidthReport:
    raw_bytes_per_s: int
    raw_mb_per_s: float
    compressed_bytes_per_s: float
    compressed_mb_per_s: float


def required_bandwidth(model: BandwidthModel = BandwidthModel()) -> BandwidthReport:
    """Per-robot uplink demand for raw RGB plus depth frames, and after compression."""
    raw = model.frame_pixels * (model.rgb_rate_hz * model.rgb_bytes_per_pixel
                                + model.depth_rate_hz * model.depth_bytes_per_pixel)
    compressed = raw / model.compression_ratio
    return BandwidthReport(raw_bytes_per_s=raw,
                           raw_mb_per_s=raw / MB,
                           compressed_bytes_per_s=compressed,
                           compressed_mb_per_s=compressed / MB)
