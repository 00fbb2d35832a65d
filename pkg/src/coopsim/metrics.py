"""Evaluation metrics: pose accuracy, detection AP, MOTA, per-object RMSE,
and retrieval/matching precision-recall.

Metrics that are undefined on their input (e.g. AP with zero ground
truth) return None instead of a number.
"""

from __future__ import annotations

import math

import numpy as np

from .coop_perception import detection_box, oriented_iou
from .geometry import Pose2, wrap_angle

PLACE_POSITIVE_RANGE = 10.0  # meters; pair counts as positive within this


def ego_accuracy(estimates: dict, truth: dict):
    """(MEAN, RMSE) of translational error over common timestamps."""
    keys = sorted(set(estimates) & set(truth))
    if not keys:
        return None, None
    errs = np.array([math.hypot(estimates[k].x - truth[k].x,
                                estimates[k].y - truth[k].y) for k in keys])
    return float(errs.mean()), float(math.sqrt(np.mean(errs ** 2)))


def _average_precision(tp_flags, n_truth: int):
    """All-point interpolated area under the precision-recall curve."""
    if n_truth == 0:
        return None
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(1 - np.asarray(tp_flags))
    recall = tp / n_truth
    precision = tp / np.maximum(tp + fp, 1)
    # envelope: precision at recall >= r
    prec = precision.copy()
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, prec):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def ap_at_iou(detections_per_frame, truth_per_frame, iou_thresholds=(0.3, 0.5, 0.7)):
    """Average precision of oriented boxes at each IoU threshold.

    Detections and truths are per-frame lists of Detection-like objects in
    a shared frame. Matching is confidence-descending greedy, one
    detection per truth box.
    """
    pool = []
    for frame, dets in enumerate(detections_per_frame):
        for d in dets:
            pool.append((d.confidence, frame, d))
    pool.sort(key=lambda t: (-t[0], t[1]))
    n_truth = sum(len(t) for t in truth_per_frame)
    out = []
    for thr in iou_thresholds:
        matched = [set() for _ in truth_per_frame]
        flags = []
        for conf, frame, d in pool:
            best_iou, best_j = 0.0, -1
            for j, g in enumerate(truth_per_frame[frame]):
                if j in matched[frame]:
                    continue
                iou = oriented_iou(detection_box(d), detection_box(g))
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_iou >= thr:
                matched[frame].add(best_j)
                flags.append(1)
            else:
                flags.append(0)
        out.append(_average_precision(flags, n_truth))
    return out


def mota(tracks_per_frame, truth_per_frame, iou_threshold: float = 0.5):
    """1 - (FN + FP + IDSW) / GT with greedy per-frame IoU assignment.

    Tracks and truths are per-frame lists of (id, Detection-like box).
    """
    n_truth = sum(len(t) for t in truth_per_frame)
    if n_truth == 0:
        return None
    fn = fp = idsw = 0
    last_match: dict = {}  # gt id -> track id
    for tracks, truths in zip(tracks_per_frame, truth_per_frame):
        pairs = []
        for ti, (tid, tb) in enumerate(tracks):
            for gi, (gid, gb) in enumerate(truths):
                iou = oriented_iou(detection_box(tb), detection_box(gb))
                if iou >= iou_threshold:
                    pairs.append((-iou, ti, gi))
        pairs.sort()
        used_t, used_g = set(), set()
        for _, ti, gi in pairs:
            if ti in used_t or gi in used_g:
                continue
            used_t.add(ti)
            used_g.add(gi)
            tid = tracks[ti][0]
            gid = truths[gi][0]
            if gid in last_match and last_match[gid] != tid:
                idsw += 1
            last_match[gid] = tid
        fn += len(truths) - len(used_g)
        fp += len(tracks) - len(used_t)
    return 1.0 - (fn + fp + idsw) / n_truth


def object_rmse(track, truth):
    """Per-object RMSE decomposed in the ground-truth heading frame.

    ``track``/``truth`` are aligned lists of (Pose2, speed). Returns
    (longitudinal, lateral, yaw, velocity) RMSEs or None when the track
    is shorter than two frames.
    """
    if len(track) < 2 or len(track) != len(truth):
        return None
    longs, lats, yaws, vels = [], [], [], []
    for (ep, ev), (gp, gv) in zip(track, truth):
        dx, dy = ep.x - gp.x, ep.y - gp.y
        c, s = math.cos(gp.yaw), math.sin(gp.yaw)
        longs.append(c * dx + s * dy)
        lats.append(-s * dx + c * dy)
        yaws.append(wrap_angle(ep.yaw - gp.yaw))
        vels.append(ev - gv)
    rmse = lambda v: float(math.sqrt(np.mean(np.asarray(v) ** 2)))
    return rmse(longs), rmse(lats), rmse(yaws), rmse(vels)


def recall_at_k(query_results, k: int):
    """Fraction of queries whose top-k candidates contain a positive.

    ``query_results`` is a list of candidate lists [(distance, positive)].
    """
    if not query_results:
        return None
    hits = 0
    for cands in query_results:
        top = sorted(cands, key=lambda t: t[0])[:k]
        if any(pos for _, pos in top):
            hits += 1
    return hits / len(query_results)


def pr_auc(pairs):
    """Area under the cumulative precision-recall curve from a distance sweep.

    ``pairs`` is a list of (distance, positive) over all query-candidate
    pairs; the threshold sweeps from tightest to loosest distance.
    """
    pairs = sorted(pairs, key=lambda t: t[0])
    n_pos = sum(1 for _, pos in pairs if pos)
    if n_pos == 0:
        return None
    flags = [1 if pos else 0 for _, pos in pairs]
    return _average_precision(flags, n_pos)


def match_pr(pred_pairs, true_pairs):
    """Precision and recall of predicted index pairs against ground truth."""
    pred = set(pred_pairs)
    true = set(true_pairs)
    if not true:
        return None, None
    tp = len(pred & true)
    precision = tp / len(pred) if pred else None
    recall = tp / len(true)
    return precision, recall
