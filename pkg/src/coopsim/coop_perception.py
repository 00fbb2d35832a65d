"""Cooperative object detection: dynamic masks, complementarity-based
neighbor selection, critical-area selection, payload packing, warping,
and confidence-weighted oriented-box fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Pose2, Transform2, compose, inverse
from .grids import BinaryMask, ConfidenceMap, GridSpec
from .worldsim import Detection


@dataclass
class SelectionDecision:
    neighbor: int
    selected: bool
    complementarity_iou: float
    area_mask: BinaryMask


def dynamic_mask(c: ConfidenceMap, tau_d: float) -> BinaryMask:
    """Bit set where the confidence reaches the threshold."""
    if not 0.0 < tau_d < 1.0:
        raise ValueError("tau_d must be in (0, 1)")
    return BinaryMask(c.grid, (c.values >= tau_d).astype(np.uint8))


def request_map(c_e: ConfidenceMap) -> ConfidenceMap:
    """Complement map: high where the ego lacks object information."""
    return ConfidenceMap(c_e.grid, 1.0 - c_e.values, c_e.vehicle, c_e.stamp)


def decide_vehicle(d_e: BinaryMask, d_n: BinaryMask,
                   tau_c: float) -> tuple[bool, float]:
    """Complementarity decision from mask overlap.

    IoU of the two dynamic masks (0 when the union is empty); the neighbor
    is selected when overlap is at most ``tau_c`` and it covers at least
    one cell the ego does not.
    """
    if d_e.grid != d_n.grid:
        raise ValueError("masks must share a grid")
    inter = int(np.sum(d_e.bits & d_n.bits))
    union = int(np.sum(d_e.bits | d_n.bits))
    iou = inter / union if union else 0.0
    adds_new = bool(np.any(d_n.bits & ~d_e.bits))
    return (iou <= tau_c and adds_new), iou


def select_areas(c_n: ConfidenceMap, n_e: ConfidenceMap, delta: float,
                 budget: int) -> BinaryMask:
    """Critical cells: elementwise product score thresholded then capped.

    Keeps cells with score >= delta; if more than ``budget`` qualify, the
    highest scores win with ties broken by ascending (row, col).
    """
    if c_n.grid != n_e.grid:
        raise ValueError("maps must share a grid")
    score = c_n.values * n_e.values
    rows, cols = np.nonzero(score >= delta)
    bits = np.zeros_like(score, dtype=np.uint8)
    if len(rows) > budget:
        order = sorted(range(len(rows)),
                       key=lambda i: (-score[rows[i], cols[i]], rows[i], cols[i]))
        keep = order[:budget]
        bits[rows[keep], cols[keep]] = 1
    else:
        bits[rows, cols] = 1
    return BinaryMask(c_n.grid, bits)


def warp_confidence(c_n: ConfidenceMap, t_n_to_e: Transform2,
                    ego_grid: GridSpec) -> ConfidenceMap:
    """Resample a neighbor's map onto the ego grid (nearest cell, 0 outside)."""
    centers = ego_grid.cell_centers().reshape(-1, 2)
    in_n = t_n_to_e.inverse().apply(centers)
    local = inverse(c_n.grid.origin).apply(in_n)
    r = np.floor(local[:, 0] / c_n.grid.resolution).astype(int)
    c = np.floor(local[:, 1] / c_n.grid.resolution).astype(int)
    ok = ((r >= 0) & (r < c_n.grid.height_cells)
          & (c >= 0) & (c < c_n.grid.width_cells))
    out = np.zeros(len(centers))
    out[ok] = c_n.values[r[ok], c[ok]]
    return ConfidenceMap(ego_grid,
                         out.reshape(ego_grid.height_cells, ego_grid.width_cells),
                         c_n.vehicle, c_n.stamp)


def pack_selected(detections, mask: BinaryMask, t_n_to_e: Transform2):
    """Neighbor detections whose center falls in a kept ego-grid cell.

    Detections stay in the neighbor frame; the transform is only used to
    locate their center cell on the ego grid. Returns (cell index, Detection)
    pairs forming the message payload.
    """
    payload = []
    w = mask.grid.width_cells
    for d in detections:
        center_e = t_n_to_e.apply(np.array([d.pose_in_vehicle.x,
                                            d.pose_in_vehicle.y]))
        idx = mask.grid.cell_index(center_e)
        if idx is None:
            continue
        r, c = idx
        if mask.bits[r, c]:
            payload.append((r * w + c, d))
    return payload


def warp_to_ego(detections, t_n_to_e: Transform2):
    """Re-express neighbor-frame detections in the ego frame."""
    tp = t_n_to_e.as_pose()
    return [replace(d, pose_in_vehicle=compose(tp, d.pose_in_vehicle))
            for d in detections]


# ---------------------------------------------------------------------------
# Oriented-box geometry (Sutherland-Hodgman clipping + shoelace area)


def box_corners(cx: float, cy: float, yaw: float, length: float,
                width: float) -> np.ndarray:
    hl, hw = 0.5 * length, 0.5 * width
    # counter-clockwise so the clipper's left-of-edge test keeps the interior
    local = np.array([[hl, -hw], [hl, hw], [-hl, hw], [-hl, -hw]])
    return Pose2(cx, cy, yaw).apply(local)


def _clip_polygon(subject: np.ndarray, a, b) -> np.ndarray:
    # keep points on the left of edge a->b
    out = []
    n = len(subject)
    for i in range(n):
        p, q = subject[i], subject[(i + 1) % n]
        sp = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        sq = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
        if sp >= 0:
            out.append(p)
        if (sp > 0) != (sq > 0) and sp != sq:
            t = sp / (sp - sq)
            out.append(p + t * (q - p))
    return np.array(out) if out else np.zeros((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def oriented_iou(box_a, box_b) -> float:
    """IoU of two oriented boxes given as (cx, cy, yaw, length, width)."""
    pa = box_corners(*box_a)
    pb = box_corners(*box_b)
    clipped = pa
    for i in range(4):
        clipped = _clip_polygon(clipped, pb[i], pb[(i + 1) % 4])
        if len(clipped) == 0:
            return 0.0
    inter = _polygon_area(clipped)
    union = box_a[3] * box_a[4] + box_b[3] * box_b[4] - inter
    return inter / union if union > 0 else 0.0


def detection_box(d: Detection):
    p = d.pose_in_vehicle
    return (p.x, p.y, p.yaw, d.extent[0], d.extent[1])


def fuse_detections(ego, received, iou_nms: float):
    """Pool detections and merge overlaps by confidence-weighted averaging.

    Greedy confidence-descending NMS: boxes overlapping the current leader
    at IoU >= ``iou_nms`` merge into it; merged confidence composes as the
    complement of joint miss probability.
    """
    pool = list(ego)
    for lst in received:
        pool.extend(lst)
    order = sorted(range(len(pool)),
                   key=lambda i: (-pool[i].confidence, i))
    used = [False] * len(pool)
    fused = []
    for i in order:
        if used[i]:
            continue
        used[i] = True
        group = [pool[i]]
        bi = detection_box(pool[i])
        for j in order:
            if used[j]:
                continue
            if oriented_iou(bi, detection_box(pool[j])) >= iou_nms:
                used[j] = True
                group.append(pool[j])
        w = np.array([g.confidence for g in group])
        w = w / w.sum()
        ref_yaw = group[0].pose_in_vehicle.yaw
        x = sum(wi * g.pose_in_vehicle.x for wi, g in zip(w, group))
        y = sum(wi * g.pose_in_vehicle.y for wi, g in zip(w, group))
        dyaw = sum(wi * math.remainder(g.pose_in_vehicle.yaw - ref_yaw,
                                       2.0 * math.pi)
                   for wi, g in zip(w, group))
        ln = sum(wi * g.extent[0] for wi, g in zip(w, group))
        wd = sum(wi * g.extent[1] for wi, g in zip(w, group))
        conf = 1.0 - float(np.prod([1.0 - g.confidence for g in group]))
        oid = max(group, key=lambda g: g.confidence).object_id
        fused.append(Detection(Pose2(x, y, ref_yaw + dyaw), (ln, wd),
                               min(1.0, conf), group[0].stamp,
                               group[0].source_vehicle, oid))
    return fused
