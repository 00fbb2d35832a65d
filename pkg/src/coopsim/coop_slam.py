"""Cooperative SLAM front-end: place recognition, keypoint matching,
RANSAC relative pose, and the indirect ego pose construction.

Descriptors and keypoints are synthesized from scenario landmarks so the
selection and registration logic can run without any learned networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2, Transform2, between, compose, inverse


@dataclass
class PlaceDescriptor:
    values: np.ndarray
    frame: int
    vehicle: int
    degenerate: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)


@dataclass
class KeypointSet:
    positions: np.ndarray    # (K, 2) in the vehicle frame
    descriptors: np.ndarray  # (K, d)
    frame: int = 0
    landmark_ids: np.ndarray | None = None  # ground truth for evaluation

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=float)


@dataclass
class RelPoseResult:
    delta_t: Transform2
    inlier_count: int
    inlier_ratio: float
    covariance: np.ndarray
    inlier_mask: np.ndarray | None = None


@dataclass(frozen=True)
class DescriptorParams:
    dim: int = 64
    max_range: float = 50.0
    sigma_desc: float = 0.0
    bin_clamp: float = 4.0


def place_descriptor(vehicle: Pose2, landmarks: np.ndarray,
                     params: DescriptorParams,
                     rng: np.random.Generator | None = None,
                     frame: int = 0, vehicle_id: int = -1) -> PlaceDescriptor:
    """Ring histogram of visible landmarks binned by map-frame bearing.

    Bearings are heading-compensated so two vehicles at the same spot
    produce the same histogram regardless of orientation. Each sector
    accumulates 1/(1 + range), clamped, then optional Gaussian noise is
    added and the vector is L2-normalized.
    """
    hist = np.zeros(params.dim)
    lm = np.asarray(landmarks, dtype=float).reshape(-1, 2)
    if lm.size:
        rel = lm - np.array([vehicle.x, vehicle.y])
        rng_m = np.hypot(rel[:, 0], rel[:, 1])
        keep = rng_m <= params.max_range
        rel, rng_m = rel[keep], rng_m[keep]
        if rel.size:
            bearing = np.arctan2(rel[:, 1], rel[:, 0])  # [-pi, pi]
            bins = np.floor((bearing + math.pi) / (2.0 * math.pi) * params.dim)
            bins = np.clip(bins.astype(int), 0, params.dim - 1)
            np.add.at(hist, bins, 1.0 / (1.0 + rng_m))
            hist = np.minimum(hist, params.bin_clamp)
    degenerate = not np.any(hist > 0)
    if rng is not None and params.sigma_desc > 0:
        hist = hist + rng.normal(0.0, params.sigma_desc, size=params.dim)
    norm = np.linalg.norm(hist)
    if norm > 0:
        hist = hist / norm
    return PlaceDescriptor(hist, frame, vehicle_id, degenerate)


def sequence_descriptor(window) -> PlaceDescriptor:
    """Elementwise mean of a descriptor window, renormalized."""
    if not window:
        raise ValueError("sequence window must contain at least one descriptor")
    mean = np.mean([d.values for d in window], axis=0)
    norm = np.linalg.norm(mean)
    if norm > 0:
        mean = mean / norm
    last = window[-1]
    return PlaceDescriptor(mean, last.frame, last.vehicle,
                           degenerate=all(d.degenerate for d in window))


def descriptor_distance(a: PlaceDescriptor, b: PlaceDescriptor) -> float:
    return float(np.linalg.norm(a.values - b.values))


def match_place(query: PlaceDescriptor, candidates: dict, tau_pr: float):
    """Global argmin of descriptor distance over all neighbor candidates.

    ``candidates`` maps vehicle id to a list of descriptors. Returns
    (vehicle, frame, distance) or None when nothing clears the threshold.
    Ties break by (vehicle id, frame).
    """
    best = None
    for vid in sorted(candidates):
        for d in candidates[vid]:
            dist = descriptor_distance(query, d)
            key = (dist, vid, d.frame)
            if best is None or key < best:
                best = key
    if best is None or best[0] > tau_pr:
        return None
    return best[1], best[2], best[0]


def rank_place_matches(query: PlaceDescriptor, candidates: dict):
    """Per-vehicle best distance, sorted ascending: [(vid, frame, dist), ...]."""
    rows = []
    for vid in sorted(candidates):
        best = None
        for d in candidates[vid]:
            dist = descriptor_distance(query, d)
            if best is None or (dist, d.frame) < best:
                best = (dist, d.frame)
        if best is not None:
            rows.append((vid, best[1], best[0]))
    rows.sort(key=lambda r: (r[2], r[0], r[1]))
    return rows


_LM_DESC_CACHE: dict = {}


def _landmark_descriptor(lid: int, dim: int) -> np.ndarray:
    """Stable unit descriptor per landmark id, memoized across calls."""
    key = (lid, dim)
    d = _LM_DESC_CACHE.get(key)
    if d is None:
        base = np.random.default_rng(np.random.SeedSequence([97, lid]))
        d = base.normal(size=dim)
        d = d / np.linalg.norm(d)
        _LM_DESC_CACHE[key] = d
    return d


def synth_keypoints(vehicle: Pose2, landmarks: np.ndarray, max_range: float,
                    desc_dim: int = 32, sigma_desc: float = 0.0,
                    sigma_pos: float = 0.0,
                    rng: np.random.Generator | None = None,
                    frame: int = 0) -> KeypointSet:
    """Keypoints for landmarks in range; descriptors are stable per landmark."""
    lm = np.asarray(landmarks, dtype=float).reshape(-1, 2)
    rel = inverse(vehicle).apply(lm) if lm.size else lm
    keep = (np.hypot(rel[:, 0], rel[:, 1]) <= max_range) if lm.size else np.zeros(0, bool)
    ids = np.nonzero(keep)[0]
    positions = rel[keep] if lm.size else np.zeros((0, 2))
    descs = np.zeros((len(ids), desc_dim))
    for row, lid in enumerate(ids):
        descs[row] = _landmark_descriptor(int(lid), desc_dim)
    if rng is not None:
        if sigma_pos > 0 and len(ids):
            positions = positions + rng.normal(0.0, sigma_pos, size=positions.shape)
        if sigma_desc > 0 and len(ids):
            descs = descs + rng.normal(0.0, sigma_desc, size=descs.shape)
    return KeypointSet(positions, descs, frame, ids)


def match_keypoints(q: KeypointSet, c: KeypointSet, ratio: float = 0.8):
    """Mutual nearest neighbors passing the Lowe ratio test."""
    nq, nc = len(q.positions), len(c.positions)
    if nq == 0 or nc == 0:
        return []
    d2 = (np.sum(q.descriptors ** 2, axis=1)[:, None]
          + np.sum(c.descriptors ** 2, axis=1)[None, :]
          - 2.0 * q.descriptors @ c.descriptors.T)
    d2 = np.maximum(d2, 0.0)
    nn_c = np.argmin(d2, axis=1)
    nn_q = np.argmin(d2, axis=0)
    pairs = []
    for i in range(nq):
        j = nn_c[i]
        if nn_q[j] != i:
            continue
        if nc >= 2:
            row = np.sqrt(d2[i])
            order = np.partition(row, 1)
            if order[1] > 0 and order[0] / order[1] > ratio:
                continue
        pairs.append((i, int(j)))
    return pairs


def _rigid_from_pairs(src: np.ndarray, dst: np.ndarray) -> Transform2:
    """Least-squares 2D rigid transform (SVD / Kabsch) mapping src to dst."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, d]) @ u.T
    t = cd - r @ cs
    return Transform2(math.atan2(r[1, 0], r[0, 0]), t[0], t[1])


def ransac_transform(matches, iters: int, inlier_tol: float,
                     rng: np.random.Generator,
                     min_inliers: int = 5) -> RelPoseResult | None:
    """RANSAC over 2-point rigid hypotheses; best hypothesis refined by SVD.

    Returns None when there are fewer than two matches or the best
    hypothesis keeps fewer than ``min_inliers`` inliers.
    """
    n = len(matches)
    if n < 2:
        return None
    src = np.array([m[0] for m in matches], dtype=float)
    dst = np.array([m[1] for m in matches], dtype=float)
    best_mask = None
    best_count = -1
    for _ in range(iters):
        i, j = rng.choice(n, size=2, replace=False)
        if np.allclose(src[i], src[j]):
            continue
        hyp = _rigid_from_pairs(src[[i, j]], dst[[i, j]])
        resid = np.linalg.norm(hyp.apply(src) - dst, axis=1)
        mask = resid <= inlier_tol
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < max(2, min_inliers):
        return None
    refined = _rigid_from_pairs(src[best_mask], dst[best_mask])
    resid_vec = refined.apply(src[best_mask]) - dst[best_mask]
    m = best_count
    dof = max(1, 2 * m - 3)
    sigma2 = float(np.sum(resid_vec ** 2)) / dof
    # J_i = [I2 | R'(phi) p_i] per inlier pair
    c, s = math.cos(refined.rotation), math.sin(refined.rotation)
    rp = np.array([[-s, -c], [c, -s]])
    jtj = np.zeros((3, 3))
    for p in src[best_mask]:
        ji = np.hstack([np.eye(2), (rp @ p)[:, None]])
        jtj += ji.T @ ji
    cov = sigma2 * np.linalg.inv(jtj) + 1e-12 * np.eye(3)
    cov = 0.5 * (cov + cov.T)
    return RelPoseResult(refined, best_count, best_count / n, cov, best_mask)


def indirect_pose(delta_t: Transform2, x_n_k: Pose2,
                  x_e_map: Pose2) -> tuple[Transform2, Pose2]:
    """Indirect neighbor and ego poses from the frame-to-frame transform.

    First lifts the ego map pose through ``delta_t`` to get the neighbor
    pose in the ego map, derives the map-to-map transform, then inverts
    the chain to recover the ego pose through the neighbor's share.
    """
    dp = delta_t.as_pose()
    x_mn = compose(dp, x_e_map)
    t_en = Transform2.from_pose(compose(x_mn, inverse(x_n_k)))
    x_mn2 = compose(t_en.as_pose(), x_n_k)
    x_en = compose(inverse(dp), x_mn2)
    return t_en, x_en


def anchor_map_transform(x_e_est: Pose2, x_n_est: Pose2,
                         rel_n_in_e: Pose2) -> Transform2:
    """Map-to-map transform anchored at a place-recognition match.

    ``rel_n_in_e`` is the measured neighbor pose in the ego body frame.
    """
    x_mn = compose(x_e_est, rel_n_in_e)
    return Transform2.from_pose(compose(x_mn, inverse(x_n_est)))


def indirect_pose_tracked(t_map: Transform2, x_n_k: Pose2,
                          rel_n_in_e: Pose2) -> Pose2:
    """Ego pose through a stored map transform and a fresh relative measure."""
    x_mn = compose(t_map.as_pose(), x_n_k)
    return compose(x_mn, inverse(rel_n_in_e))
