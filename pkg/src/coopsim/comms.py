"""Typed inter-vehicle messages, byte accounting, and delivery.

Every message costs 16 header bytes plus a schema-defined payload:

    DescriptorRequest   16 + D*4
    ConfidenceMapMsg    16 + H*W      (values quantized to 8 bits)
    LocalFeatures       16 + K*(2*4 + d*4)
    SelectedDetections  16 + E*(4 + 6*4)
    PoseUpdate          16 + 3*4 + 6*4

Communication volume is reported as log2 of transmitted bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coop_slam import KeypointSet, PlaceDescriptor
from .geometry import Pose2
from .grids import ConfidenceMap

HEADER_BYTES = 16
BROADCAST = 0xFFFFFFFF

KIND_DESCRIPTOR_REQUEST = "descriptor_request"
KIND_CONFIDENCE_MAP = "confidence_map"
KIND_LOCAL_FEATURES = "local_features"
KIND_SELECTED_DETECTIONS = "selected_detections"
KIND_POSE_UPDATE = "pose_update"

CHANNEL_OF = {
    KIND_DESCRIPTOR_REQUEST: "slam",
    KIND_LOCAL_FEATURES: "slam",
    KIND_POSE_UPDATE: "slam",
    KIND_CONFIDENCE_MAP: "perception",
    KIND_SELECTED_DETECTIONS: "perception",
}


@dataclass
class PoseUpdatePayload:
    pose: Pose2
    covariance6: tuple = (0.0,) * 6  # upper triangle of the 3x3 covariance


@dataclass
class Message:
    sender: int
    receiver: int
    step: int
    kind: str
    payload: object

    @property
    def channel(self) -> str:
        return CHANNEL_OF[self.kind]


def quantize_map(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize_map(q: np.ndarray) -> np.ndarray:
    return q.astype(float) / 255.0


def encoded_size(m: Message) -> int:
    """Exact transmitted bytes for a message under the wire schema."""
    k = m.kind
    if k == KIND_DESCRIPTOR_REQUEST:
        desc: PlaceDescriptor = m.payload
        return HEADER_BYTES + len(desc.values) * 4
    if k == KIND_CONFIDENCE_MAP:
        cmap: ConfidenceMap = m.payload
        return HEADER_BYTES + cmap.grid.height_cells * cmap.grid.width_cells
    if k == KIND_LOCAL_FEATURES:
        kp: KeypointSet = m.payload
        n = len(kp.positions)
        d = kp.descriptors.shape[1] if n else 0
        return HEADER_BYTES + n * (2 * 4 + d * 4)
    if k == KIND_SELECTED_DETECTIONS:
        return HEADER_BYTES + len(m.payload) * (4 + 6 * 4)
    if k == KIND_POSE_UPDATE:
        return HEADER_BYTES + 3 * 4 + 6 * 4
    raise ValueError(f"unknown message kind {k!r}")


def comm_vol(total_bytes: int) -> tuple[float, bool]:
    """log2 of transmitted bytes; flag set when nothing was sent."""
    if total_bytes < 0:
        raise ValueError("byte count must be non-negative")
    if total_bytes == 0:
        return 0.0, True
    return math.log2(total_bytes), False


@dataclass
class LedgerEntry:
    step: int
    sender: int
    receiver: int
    kind: str
    bytes: int
    channel: str


class CommLedger:
    def __init__(self):
        self.entries: list[LedgerEntry] = []
        self.channel_totals = {"slam": 0, "perception": 0}

    def record(self, m: Message, size: int | None = None):
        size = encoded_size(m) if size is None else size
        e = LedgerEntry(m.step, m.sender, m.receiver, m.kind, size, m.channel)
        self.entries.append(e)
        self.channel_totals[e.channel] += size
        return e

    def total_bytes(self) -> int:
        return sum(self.channel_totals.values())

    def step_bytes(self, step: int) -> int:
        return sum(e.bytes for e in self.entries if e.step == step)

    def export_csv(self) -> str:
        lines = ["step,sender,receiver,kind,bytes,channel"]
        for e in self.entries:
            lines.append(f"{e.step},{e.sender},{e.receiver},{e.kind},"
                         f"{e.bytes},{e.channel}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class NetworkModel:
    pair_budget_bytes: float = math.inf
    max_comm_range: float = math.inf

    def __post_init__(self):
        if self.pair_budget_bytes < 0:
            raise ValueError("budget must be >= 0")


def deliver(outbox, net: NetworkModel, true_poses: dict,
            ledger: CommLedger | None = None,
            budget_state: dict | None = None):
    """Apply range gating and per-pair byte budgets, in message order.

    Broadcast messages reach every in-range vehicle and are ledgered once
    (shared-medium accounting, exempt from pair budgets). Targeted messages
    beyond the pair budget are deferred; out-of-range targets are dropped.
    Returns (delivered (receiver, message) pairs, deferred messages, entries).
    """
    delivered = []
    deferred = []
    entries = []
    budget_used = budget_state if budget_state is not None else {}
    for m in outbox:
        sp = true_poses[m.sender]
        if m.receiver == BROADCAST:
            reached = False
            for vid in sorted(true_poses):
                if vid == m.sender:
                    continue
                rp = true_poses[vid]
                if math.hypot(rp.x - sp.x, rp.y - sp.y) <= net.max_comm_range:
                    delivered.append((vid, m))
                    reached = True
            if reached and ledger is not None:
                entries.append(ledger.record(m))
            continue
        rp = true_poses.get(m.receiver)
        if rp is None or math.hypot(rp.x - sp.x, rp.y - sp.y) > net.max_comm_range:
            continue
        size = encoded_size(m)
        pair = (m.sender, m.receiver)
        used = budget_used.get(pair, 0)
        if used + size > net.pair_budget_bytes:
            deferred.append(m)
            continue
        budget_used[pair] = used + size
        delivered.append((m.receiver, m))
        if ledger is not None:
            entries.append(ledger.record(m, size))
    return delivered, deferred, entries


def handshake_round(ego: int, step: int, ego_descriptor, ego_map,
                    neighbor_replies: dict, slam_payloads: dict,
                    perception_payloads: dict):
    """Ordered three-phase message plan for one step.

    Phase 1: ego broadcasts its descriptor request and confidence map.
    Phase 2: each neighbor replies with its own descriptor and map.
    Phase 3: only selected neighbors send features/pose (SLAM channel)
    or selected detections (perception channel).
    """
    plan = []
    if ego_descriptor is not None:
        plan.append(Message(ego, BROADCAST, step, KIND_DESCRIPTOR_REQUEST,
                            ego_descriptor))
    if ego_map is not None:
        plan.append(Message(ego, BROADCAST, step, KIND_CONFIDENCE_MAP, ego_map))
    for vid in sorted(neighbor_replies):
        desc, cmap = neighbor_replies[vid]
        if desc is not None:
            plan.append(Message(vid, ego, step, KIND_DESCRIPTOR_REQUEST, desc))
        if cmap is not None:
            plan.append(Message(vid, ego, step, KIND_CONFIDENCE_MAP, cmap))
    for vid in sorted(slam_payloads):
        keypoints, pose_update = slam_payloads[vid]
        plan.append(Message(vid, ego, step, KIND_LOCAL_FEATURES, keypoints))
        plan.append(Message(vid, ego, step, KIND_POSE_UPDATE, pose_update))
    for vid in sorted(perception_payloads):
        plan.append(Message(vid, ego, step, KIND_SELECTED_DETECTIONS,
                            perception_payloads[vid]))
    return plan
