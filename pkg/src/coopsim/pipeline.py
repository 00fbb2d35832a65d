"""Per-step orchestration: simulate, sense, handshake, select, fuse,
optimize, and account for every transmitted byte.

A run estimates from the first vehicle's (the ego's) perspective; the
other vehicles dead-reckon and serve sensor products on request.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import comms
from .comms import (CommLedger, NetworkModel, PoseUpdatePayload, deliver,
                    handshake_round)
from .coop_perception import (decide_vehicle, dynamic_mask, fuse_detections,
                              pack_selected, request_map, select_areas,
                              warp_confidence, warp_to_ego)
from .coop_slam import (DescriptorParams, match_keypoints, place_descriptor,
                        rank_place_matches, ransac_transform, sequence_descriptor,
                        synth_keypoints)
from .factor_graph import (OBJECT_POSE, OBJECT_VELOCITY, VEHICLE_POSE, Estimate,
                           FactorGraph, LMParams, MotionFactor,
                           ObjectPerceptionFactor, OdometryFactor, PriorFactor,
                           VariableId, VelocityFactor, virtualize_detection)
from .geometry import Pose2, Transform2, between, compose, inverse
from .grids import ConfidenceMap
from .worldsim import (Detection, ObjectState, WorldState, confidence_map,
                       detect_objects, generate_odometry, step_ctrv, stream_rng,
                       trace_line, visible_objects)

MODES = ("single_vehicle", "coop_slam_only", "coop_perception_only", "full",
         "full_broadcast")

# default factor noise models (configurable through RunConfig)
SIGMA_ODO = np.diag([0.05 ** 2, 0.05 ** 2, 0.01 ** 2])
EN_COV_FLOOR = np.array([0.02 ** 2, 0.02 ** 2, 0.005 ** 2])
SIGMA_OP = np.diag([0.3 ** 2, 0.3 ** 2, 0.1 ** 2])
SIGMA_MOV = np.diag([0.2 ** 2, 0.2 ** 2, 0.05 ** 2])
SIGMA_VEL = np.diag([0.5 ** 2, 0.1 ** 2])
PRIOR_INFO = np.diag([1e6, 1e6, 1e6])
GATE_MAHA2 = 9.21        # chi-square 99% at 2 dof
GATE_SIGMA = 0.7         # position gate scale, meters
BIRTH_FRAMES = 2
DEATH_FRAMES = 5
NULL_WEIGHT = 0.1
NULL_INFO_SCALE = 0.01


@dataclass
class RunConfig:
    scenario: str = "builtin:occlusion"
    seed: int = 0
    mode: str = "full"
    tau_pr: float = 0.3
    tau_c: float = 0.5
    tau_d: float = 0.3
    delta: float = 0.05
    budget_cells: int = 512
    k_collaborators: int = 1
    rank_only: bool = False          # take top-k by similarity, ignore tau_pr
    seq_window: int = 3
    desc_dim: int = 16
    desc_sigma: float = 0.01
    kp_desc_dim: int = 32
    kp_sigma_desc: float = 0.01
    kp_sigma_pos: float = 0.03
    kp_range: float = 40.0
    ransac_iters: int = 100
    ransac_tol: float = 0.3
    min_inliers: int = 5
    iou_nms: float = 0.15
    window_horizon: int = 8          # keyframes kept in the solver window
    pair_budget_bytes: float = math.inf
    max_comm_range: float = math.inf
    perfect_relative_pose: bool = False
    out_dir: str | None = None
    scenario_kwargs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; pick one of {MODES}")


@dataclass
class RunReport:
    ego_mean: float | None = None
    ego_rmse: float | None = None
    vehicle_accuracy: dict = field(default_factory=dict)
    object_errors: dict = field(default_factory=dict)
    ap: dict = field(default_factory=dict)
    mota: float | None = None
    fused_recall: float | None = None
    recall_at_1: float | None = None
    recall_at_3: float | None = None
    place_auc: float | None = None
    kp_precision: float | None = None
    kp_recall: float | None = None
    slam_bytes: int = 0
    perception_bytes: int = 0
    comm_vol_total: float = 0.0
    comm_vol_per_step: float = 0.0
    no_communication: bool = False
    steps: int = 0
    wall_clock: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "ego_mean": self.ego_mean,
            "ego_rmse": self.ego_rmse,
            "vehicle_accuracy": {str(k): list(v)
                                 for k, v in sorted(self.vehicle_accuracy.items())},
            "object_errors": {str(k): (list(v) if v is not None else None)
                              for k, v in sorted(self.object_errors.items())},
            "ap": {str(k): v for k, v in sorted(self.ap.items())},
            "mota": self.mota,
            "fused_recall": self.fused_recall,
            "recall_at_1": self.recall_at_1,
            "recall_at_3": self.recall_at_3,
            "place_auc": self.place_auc,
            "kp_precision": self.kp_precision,
            "kp_recall": self.kp_recall,
            "slam_bytes": self.slam_bytes,
            "perception_bytes": self.perception_bytes,
            "comm_vol_total": self.comm_vol_total,
            "comm_vol_per_step": self.comm_vol_per_step,
            "no_communication": self.no_communication,
            "steps": self.steps,
        }
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return d


@dataclass
class _Track:
    tid: int
    pose: Pose2              # world-frame estimate
    vel: tuple               # (v, omega)
    extent: tuple
    born_step: int
    misses: int = 0
    eval_votes: dict = field(default_factory=dict)
    pose_var: VariableId | None = None
    vel_var: VariableId | None = None
    history: dict = field(default_factory=dict)  # step -> (Pose2, v)

    def vote(self, oid: int):
        if oid >= 0:
            self.eval_votes[oid] = self.eval_votes.get(oid, 0) + 1

    @property
    def eval_oid(self) -> int:
        if not self.eval_votes:
            return -1
        return max(sorted(self.eval_votes), key=lambda k: self.eval_votes[k])


def _floor_cov(cov: np.ndarray, floor: np.ndarray) -> np.ndarray:
    out = np.array(cov, dtype=float)
    for i in range(3):
        out[i, i] = max(out[i, i], floor[i])
    return 0.5 * (out + out.T)


class Pipeline:
    """One deterministic simulation + estimation run."""

    def __init__(self, scenario, config: RunConfig):
        self.sc = scenario
        self.cfg = config
        self.world = WorldState(scenario)
        self.vids = sorted(v.vid for v in scenario.vehicles)
        self.ego = self.vids[0]
        self.neighbors = [v for v in self.vids if v != self.ego]
        self.ledger = CommLedger()
        self.net = NetworkModel(config.pair_budget_bytes, config.max_comm_range)
        self.desc_params = DescriptorParams(config.desc_dim,
                                            scenario.sensor.max_range,
                                            config.desc_sigma)
        self.info_odo = np.linalg.inv(SIGMA_ODO)
        self.info_mov = np.linalg.inv(SIGMA_MOV)
        self.info_vel = np.linalg.inv(SIGMA_VEL)
        self.info_op_nominal = np.linalg.inv(SIGMA_OP)
        # trace of raw sensor products, one line per (step, vehicle)
        self.trace_lines: list[str] = []
        self.ego_path: list[tuple] = []  # (step, gt Pose2, est Pose2)

    # -- helpers -----------------------------------------------------------

    def _slam_active(self) -> bool:
        return self.cfg.mode in ("coop_slam_only", "full", "full_broadcast")

    def _perception_active(self) -> bool:
        return self.cfg.mode in ("coop_perception_only", "full", "full_broadcast")

    def _rel_transform(self, est, frm: int, to: int) -> Transform2:
        """Relative pose of ``frm`` in ``to``'s frame, per config fidelity."""
        if self.cfg.perfect_relative_pose:
            a, b = self.truth[to], self.truth[frm]
        else:
            a, b = est[to], est[frm]
        return Transform2.from_pose(between(a, b))

    # -- main loop ---------------------------------------------------------

    def run(self) -> RunReport:
        t0 = time.perf_counter()
        cfg, sc = self.cfg, self.sc
        sensor = sc.sensor
        stride = sc.keyframe_stride
        seed = sc.seed if cfg.seed is None else cfg.seed

        est = {}                 # vid -> dead-reckoned Pose2 (current)
        est_cov = {}             # vid -> propagated dead-reckoning covariance
        odo_cov = np.diag(np.asarray(sensor.odom_noise, dtype=float) ** 2)
        # regularized version keeps factor information finite when noiseless
        odo_cov_f = odo_cov + np.diag([1e-6, 1e-6, 1e-7])
        prev_gt = {}
        # neighbor -> (ego est, neighbor-reported pose, measured relative pose)
        # snapshot at the latest successful registration
        reg_rel: dict = {}

        def current_rel(n: int) -> Transform2:
            """Best available neighbor-in-ego transform at this instant."""
            if self.cfg.perfect_relative_pose or n not in reg_rel:
                return self._rel_transform(est, n, self.ego)
            e_snap, n_snap, rel = reg_rel[n]
            inc_e = between(e_snap, est[self.ego])
            inc_n = between(n_snap, est[n])
            return Transform2.from_pose(
                compose(compose(inverse(inc_e), rel), inc_n))
        desc_window = {v: deque(maxlen=cfg.seq_window) for v in self.vids}
        nbr_desc_history = {v: deque(maxlen=12) for v in self.neighbors}

        graph = FactorGraph()
        values: dict = {}
        kf_steps: list[int] = []
        odom_since_kf = Pose2.identity()   # ego odometry composed since last kf
        kf_odom_accum = Pose2.identity()   # between previous and next keyframe
        last_estimate: Estimate | None = None
        # neighbor -> (latest graph variable, pose reported with it)
        nbr_chain: dict = {}

        tracks: dict = {}
        next_tid = 1
        pending: list = []                 # (step, world pose, extent, conf, oid)

        # metric accumulators
        ego_est_by_step, ego_gt_by_step = {}, {}
        nbr_est = {v: {} for v in self.neighbors}
        nbr_gt = {v: {} for v in self.neighbors}
        fused_frames, truth_frames = [], []
        track_frames, track_truth_frames = [], []
        place_queries, place_pairs = [], []
        kp_tp = kp_pred = kp_true = 0
        track_samples: dict = {}

        for t in range(sc.duration_steps):
            truth = {v: self.world.vehicle_pose(v, t) for v in self.vids}
            self.truth = truth
            obj_states = {o.oid: self.world.object_state(o.oid, t)
                          for o in sc.objects}
            obj_poses = {oid: s.pose for oid, s in obj_states.items()}

            # -- sense ----------------------------------------------------
            dets, cmaps, seq_desc, kps, odom_inc = {}, {}, {}, {}, {}
            for v in self.vids:
                if t == 0:
                    est[v] = truth[v]
                    est_cov[v] = np.zeros((3, 3))
                    odom_inc[v] = Pose2.identity()
                else:
                    inc = generate_odometry(between(prev_gt[v], truth[v]),
                                            sensor, stream_rng(seed, v, t, 0))
                    odom_inc[v] = inc
                    prev = est[v]
                    c, s = math.cos(prev.yaw), math.sin(prev.yaw)
                    j = np.array([[1.0, 0.0, -s * inc.x - c * inc.y],
                                  [0.0, 1.0, c * inc.x - s * inc.y],
                                  [0.0, 0.0, 1.0]])
                    est_cov[v] = j @ est_cov[v] @ j.T + odo_cov
                    est[v] = compose(prev, inc)
                vis = visible_objects(truth[v], sensor, obj_poses, sc.occluders)
                dv = detect_objects(truth[v], vis, obj_poses,
                                    self.world.object_extent, sensor,
                                    stream_rng(seed, v, t, 1), t, v)
                dets[v] = dv
                cmaps[v] = confidence_map(truth[v], dv, sc.grid, v, t)
                pd = place_descriptor(truth[v], sc.landmarks, self.desc_params,
                                      stream_rng(seed, v, t, 2), t, v)
                desc_window[v].append(pd)
                seq_desc[v] = sequence_descriptor(list(desc_window[v]))
                kps[v] = synth_keypoints(truth[v], sc.landmarks,
                                         min(sensor.max_range, cfg.kp_range),
                                         cfg.kp_desc_dim,
                                         cfg.kp_sigma_desc, cfg.kp_sigma_pos,
                                         stream_rng(seed, v, t, 3), t)
                self.trace_lines.append(trace_line(t, v, truth[v],
                                                   odom_inc[v], dv))

            is_kf = t % stride == 0
            kf_odom_accum = compose(kf_odom_accum, odom_inc[self.ego])
            odom_since_kf = compose(odom_since_kf, odom_inc[self.ego])

            # -- handshake phases 1-2 ------------------------------------
            # The ego's confidence map is the only map on the wire: it is
            # the request neighbors select against. Full-broadcast mode
            # instead has every vehicle broadcast its map and detections.
            budget_state: dict = {}
            recv_payloads: dict = {}
            if cfg.mode != "single_vehicle":
                ego_desc = seq_desc[self.ego] if (self._slam_active() and is_kf) else None
                replies = {}
                for n in self.neighbors:
                    if self._slam_active() and is_kf:
                        replies[n] = (seq_desc[n], None)
                if cfg.mode == "full_broadcast":
                    plan12 = handshake_round(self.ego, t, ego_desc, None,
                                             replies, {}, {})
                    for v in self.vids:
                        plan12.append(comms.Message(
                            v, comms.BROADCAST, t,
                            comms.KIND_CONFIDENCE_MAP, cmaps[v]))
                        plan12.append(comms.Message(
                            v, comms.BROADCAST, t,
                            comms.KIND_SELECTED_DETECTIONS,
                            [(0, d) for d in dets[v]]))
                else:
                    ego_map = cmaps[self.ego] if self._perception_active() else None
                    plan12 = handshake_round(self.ego, t, ego_desc, ego_map,
                                             replies, {}, {})
                delivered, _, _ = deliver(plan12, self.net, truth, self.ledger,
                                          budget_state)
                for rcv, m in delivered:
                    if rcv != self.ego:
                        continue
                    if m.kind == comms.KIND_DESCRIPTOR_REQUEST:
                        nbr_desc_history[m.sender].append(m.payload)
                    elif m.kind == comms.KIND_SELECTED_DETECTIONS:
                        recv_payloads[m.sender] = m.payload

            # -- selections ----------------------------------------------
            slam_selected: list[int] = []
            if self._slam_active() and is_kf and cfg.mode != "single_vehicle":
                cands = {n: list(nbr_desc_history[n]) for n in self.neighbors
                         if nbr_desc_history[n]}
                ranked = rank_place_matches(seq_desc[self.ego], cands)
                if cfg.rank_only:
                    slam_selected = [vid for vid, _, _ in
                                     ranked[:cfg.k_collaborators]]
                else:
                    slam_selected = [vid for vid, _, d in ranked
                                     if d <= cfg.tau_pr][:cfg.k_collaborators]
                # place-recognition bookkeeping against ground truth
                if ranked:
                    qres = []
                    for vid, frame, dist in ranked:
                        pos = math.hypot(
                            truth[self.ego].x - self.world.vehicle_pose(vid, frame).x,
                            truth[self.ego].y - self.world.vehicle_pose(vid, frame).y
                        ) <= 10.0
                        qres.append((dist, pos))
                        place_pairs.append((dist, pos))
                    place_queries.append(qres)

            # Each neighbor runs selection against the ego's request map;
            # the simulator evaluates that neighbor-side computation here.
            perception_sel: dict = {}
            rel_cache: dict = {}
            if self._perception_active() and cfg.mode != "full_broadcast":
                wire = comms.dequantize_map(
                    comms.quantize_map(cmaps[self.ego].values))
                c_e = ConfidenceMap(sc.grid, wire, self.ego, t)
                n_e = request_map(c_e)
                d_e = dynamic_mask(c_e, cfg.tau_d)
                ep = truth[self.ego]
                for n in self.neighbors:
                    np_ = truth[n]
                    if math.hypot(np_.x - ep.x, np_.y - ep.y) > self.net.max_comm_range:
                        continue
                    t_n_to_e = current_rel(n)
                    rel_cache[n] = t_n_to_e
                    warped = warp_confidence(cmaps[n], t_n_to_e, sc.grid)
                    d_n = dynamic_mask(warped, cfg.tau_d)
                    sel, _ = decide_vehicle(d_e, d_n, cfg.tau_c)
                    if not sel:
                        continue
                    mask = select_areas(warped, n_e, cfg.delta, cfg.budget_cells)
                    payload = pack_selected(dets[n], mask, t_n_to_e)
                    if payload:
                        perception_sel[n] = payload
            elif cfg.mode == "full_broadcast":
                for n in self.neighbors:
                    rel_cache[n] = current_rel(n)

            # -- handshake phase 3 ---------------------------------------
            recv_features: dict = {}
            if cfg.mode != "single_vehicle":
                slam_payloads = {}
                for n in slam_selected:
                    cv = est_cov[n]
                    pu = PoseUpdatePayload(est[n],
                                           (cv[0, 0], cv[0, 1], cv[0, 2],
                                            cv[1, 1], cv[1, 2], cv[2, 2]))
                    slam_payloads[n] = (kps[n], pu)
                plan3 = handshake_round(self.ego, t, None, None, {},
                                        slam_payloads, perception_sel)
                delivered, _, _ = deliver(plan3, self.net, truth, self.ledger,
                                          budget_state)
                for rcv, m in delivered:
                    if rcv != self.ego:
                        continue
                    if m.kind == comms.KIND_LOCAL_FEATURES:
                        recv_features.setdefault(m.sender, [None, None])[0] = m.payload
                    elif m.kind == comms.KIND_POSE_UPDATE:
                        recv_features.setdefault(m.sender, [None, None])[1] = m.payload
                    elif m.kind == comms.KIND_SELECTED_DETECTIONS:
                        recv_payloads[m.sender] = m.payload

            # -- backend keyframe bookkeeping ----------------------------
            if is_kf:
                k_var = VariableId(VEHICLE_POSE, self.ego, t)
                graph.add_variable(k_var)
                if not kf_steps:
                    values[k_var] = truth[self.ego].as_array()
                    graph.add_factor(PriorFactor(k_var,
                                                 truth[self.ego].as_array(),
                                                 PRIOR_INFO))
                else:
                    prev_var = VariableId(VEHICLE_POSE, self.ego, kf_steps[-1])
                    base = Pose2.from_array(values[prev_var])
                    values[k_var] = compose(base, kf_odom_accum).as_array()
                    gap_kf = max(1, t - kf_steps[-1])
                    graph.add_factor(OdometryFactor(
                        prev_var, k_var, kf_odom_accum,
                        np.linalg.inv(odo_cov_f * gap_kf)))
                kf_steps.append(t)
                kf_odom_accum = Pose2.identity()
                odom_since_kf = Pose2.identity()

            kf_var = VariableId(VEHICLE_POSE, self.ego, kf_steps[-1])
            backend_pose_kf = Pose2.from_array(values[kf_var])
            ego_backend_now = compose(backend_pose_kf, odom_since_kf)

            # -- inter-vehicle factors -----------------------------------
            if self._slam_active() and is_kf:
                for n in sorted(recv_features):
                    feat, pose_upd = recv_features[n]
                    if feat is None or pose_upd is None:
                        continue
                    pairs = match_keypoints(kps[self.ego], feat)
                    if kps[self.ego].landmark_ids is not None \
                            and feat.landmark_ids is not None:
                        q_ids = kps[self.ego].landmark_ids
                        c_ids = feat.landmark_ids
                        true_pairs = {(i, j) for i, qi in enumerate(q_ids)
                                      for j, cj in enumerate(c_ids) if qi == cj}
                        pred_pairs = set(pairs)
                        kp_tp += len(pred_pairs & true_pairs)
                        kp_pred += len(pred_pairs)
                        kp_true += len(true_pairs)
                    matches = [(kps[self.ego].positions[i], feat.positions[j])
                               for i, j in pairs]
                    rr = ransac_transform(matches, cfg.ransac_iters,
                                          cfg.ransac_tol,
                                          stream_rng(seed, self.ego, t, 100 + n),
                                          cfg.min_inliers)
                    if rr is None:
                        continue
                    rel_n_in_e = rr.delta_t.inverse().as_pose()
                    n_var = VariableId(VEHICLE_POSE, n, t)
                    graph.add_variable(n_var)
                    values[n_var] = compose(ego_backend_now,
                                            rel_n_in_e).as_array()
                    prev = nbr_chain.get(n)
                    if prev is not None and prev[0] in graph.variables:
                        prev_var, prev_pose = prev
                        gap = t - prev_var.stamp
                        inc = between(prev_pose, pose_upd.pose)
                        graph.add_factor(OdometryFactor(
                            prev_var, n_var, inc,
                            np.linalg.inv(odo_cov_f * gap)))
                    cov = _floor_cov(rr.covariance, EN_COV_FLOOR)
                    graph.add_factor(OdometryFactor(kf_var, n_var, rel_n_in_e,
                                                    np.linalg.inv(cov)))
                    nbr_chain[n] = (n_var, pose_upd.pose)
                    reg_rel[n] = (est[self.ego], pose_upd.pose, rel_n_in_e)

            # -- fuse detections -----------------------------------------
            received_lists = []
            for n in sorted(recv_payloads):
                rel = rel_cache.get(n) or current_rel(n)
                received_lists.append(
                    warp_to_ego([d for _, d in recv_payloads[n]], rel))
            if self._perception_active() and received_lists:
                fused = fuse_detections(dets[self.ego], received_lists,
                                        cfg.iou_nms)
            else:
                fused = list(dets[self.ego])

            # -- object tracking and factors -----------------------------
            dt = sc.dt
            det_world = [(d, compose(ego_backend_now, d.pose_in_vehicle))
                         for d in fused]
            # predict active tracks one step forward
            for tr in tracks.values():
                s = step_ctrv(ObjectState(tr.pose, tr.vel[0], tr.vel[1]), dt)
                tr.pose = s.pose

            claimed = set()
            for tid in sorted(tracks):
                tr = tracks[tid]
                gated = []
                for di, (d, wp) in enumerate(det_world):
                    dd = (wp.x - tr.pose.x) ** 2 + (wp.y - tr.pose.y) ** 2
                    if dd / GATE_SIGMA ** 2 <= GATE_MAHA2:
                        gated.append((di, d))
                # build this step's variables and factors
                o_var = VariableId(OBJECT_POSE, tid, t)
                v_var = VariableId(OBJECT_VELOCITY, tid, t)
                graph.add_variable(o_var)
                graph.add_variable(v_var)
                values[o_var] = tr.pose.as_array()
                values[v_var] = np.array(tr.vel, dtype=float)
                graph.add_factor(MotionFactor(tr.pose_var, tr.vel_var, o_var,
                                              dt, self.info_mov))
                graph.add_factor(VelocityFactor(tr.vel_var, v_var,
                                                self.info_vel))
                odom_chain = odom_since_kf
                mixture = []
                for di, d in gated:
                    z = virtualize_detection(d, odom_chain) \
                        if t != kf_steps[-1] else d
                    info = self.info_op_nominal * max(d.confidence, 0.05)
                    mixture.append((max(d.confidence, 0.05),
                                    z.pose_in_vehicle, info))
                    claimed.add(di)
                    tr.vote(d.object_id)
                # null component: agrees with the prediction, weak information
                z_null = between(Pose2.from_array(values[kf_var]), tr.pose)
                mixture.append((NULL_WEIGHT, z_null,
                                self.info_op_nominal * NULL_INFO_SCALE))
                graph.add_factor(ObjectPerceptionFactor(kf_var, o_var, mixture))
                tr.pose_var, tr.vel_var = o_var, v_var
                tr.misses = 0 if gated else tr.misses + 1

            # births from detections unclaimed two steps running
            new_pending = []
            for di, (d, wp) in enumerate(det_world):
                if di in claimed:
                    continue
                matched_prev = None
                for p in pending:
                    if p[0] == t - 1 and (wp.x - p[1].x) ** 2 \
                            + (wp.y - p[1].y) ** 2 <= GATE_MAHA2 * GATE_SIGMA ** 2:
                        matched_prev = p
                        break
                if matched_prev is not None:
                    vel0 = (math.hypot(wp.x - matched_prev[1].x,
                                       wp.y - matched_prev[1].y) / dt, 0.0)
                    tid = next_tid
                    next_tid += 1
                    o_var = VariableId(OBJECT_POSE, tid, t)
                    v_var = VariableId(OBJECT_VELOCITY, tid, t)
                    graph.add_variable(o_var)
                    graph.add_variable(v_var)
                    values[o_var] = wp.as_array()
                    values[v_var] = np.array(vel0)
                    info = self.info_op_nominal * max(d.confidence, 0.05)
                    graph.add_factor(PriorFactor(o_var, wp.as_array(), info))
                    graph.add_factor(PriorFactor(v_var, np.array(vel0),
                                                 np.diag([1.0, 4.0])))
                    tr = _Track(tid, wp, vel0, d.extent, t,
                                pose_var=o_var, vel_var=v_var)
                    tr.vote(d.object_id)
                    tracks[tid] = tr
                else:
                    new_pending.append((t, wp, d.extent, d.confidence,
                                        d.object_id))
            pending = new_pending

            # -- optimize at keyframes -----------------------------------
            if is_kf:
                est_in = Estimate({vid: np.array(values[vid], dtype=float)
                                   for vid in graph.variables})
                result = graph.optimize(est_in, LMParams(max_iterations=25))
                last_estimate = result
                for vid in graph.variables:
                    values[vid] = np.array(result.values[vid], dtype=float)
                backend_pose_kf = Pose2.from_array(values[kf_var])
                ego_backend_now = backend_pose_kf
                # refresh track state, count null selections at keyframes
                for tid in sorted(tracks):
                    tr = tracks[tid]
                    tr.pose = Pose2.from_array(values[tr.pose_var])
                    tr.vel = tuple(values[tr.vel_var])
                graph = graph.slide_window(result,
                                           cfg.window_horizon * stride)
                values = {vid: values[vid] for vid in graph.variables}

            # drop dead tracks
            for tid in [k for k, tr in tracks.items()
                        if tr.misses >= DEATH_FRAMES]:
                del tracks[tid]

            # -- record metrics ------------------------------------------
            ego_now = compose(Pose2.from_array(values[kf_var]), odom_since_kf)
            ego_est_by_step[t] = ego_now
            ego_gt_by_step[t] = truth[self.ego]
            self.ego_path.append((t, truth[self.ego], ego_now))
            for n in self.neighbors:
                nbr_est[n][t] = est[n]
                nbr_gt[n][t] = truth[n]

            inv_ego_true = inverse(truth[self.ego])
            truth_in_range = []
            for oid, s in obj_states.items():
                rel = compose(inv_ego_true, s.pose)
                if math.hypot(rel.x, rel.y) <= sensor.max_range:
                    truth_in_range.append(
                        Detection(rel, self.world.object_extent[oid], 1.0, t,
                                  self.ego, oid))
            fused_frames.append(fused)
            truth_frames.append(truth_in_range)

            frame_tracks = []
            for tid in sorted(tracks):
                tr = tracks[tid]
                if t - tr.born_step + 1 >= BIRTH_FRAMES:
                    frame_tracks.append(
                        (tid, Detection(tr.pose, tr.extent, 1.0, t, self.ego)))
                    tr.history[t] = (tr.pose, tr.vel[0])
                    track_samples.setdefault(tid, tr)
            track_frames.append(frame_tracks)
            track_truth_frames.append(
                [(oid, Detection(obj_states[oid].pose,
                                 self.world.object_extent[oid], 1.0, t, self.ego))
                 for oid, s in obj_states.items()
                 if math.hypot(s.pose.x - truth[self.ego].x,
                               s.pose.y - truth[self.ego].y) <= sensor.max_range])

            prev_gt = truth

        # -- report ----------------------------------------------------------
        from . import metrics as M

        report = RunReport()
        report.steps = sc.duration_steps
        report.ego_mean, report.ego_rmse = M.ego_accuracy(ego_est_by_step,
                                                          ego_gt_by_step)
        report.vehicle_accuracy[self.ego] = (report.ego_mean, report.ego_rmse)
        for n in self.neighbors:
            report.vehicle_accuracy[n] = M.ego_accuracy(nbr_est[n], nbr_gt[n])
        aps = M.ap_at_iou(fused_frames, truth_frames, (0.3, 0.5, 0.7))
        report.ap = {0.3: aps[0], 0.5: aps[1], 0.7: aps[2]}
        report.mota = M.mota(track_frames, track_truth_frames)
        report.fused_recall = _fused_recall(fused_frames, truth_frames)
        report.recall_at_1 = M.recall_at_k(place_queries, 1)
        report.recall_at_3 = M.recall_at_k(place_queries, 3)
        report.place_auc = M.pr_auc(place_pairs)
        report.kp_precision = kp_tp / kp_pred if kp_pred else None
        report.kp_recall = kp_tp / kp_true if kp_true else None
        report.slam_bytes = self.ledger.channel_totals["slam"]
        report.perception_bytes = self.ledger.channel_totals["perception"]
        cv, flag = comms.comm_vol(self.ledger.total_bytes())
        report.comm_vol_total = cv
        report.no_communication = flag
        per_step = self.ledger.total_bytes() / max(1, sc.duration_steps)
        report.comm_vol_per_step = math.log2(per_step) if per_step >= 1 else 0.0

        # per-object tracking errors, matched by dominant ground-truth id
        for tid, tr in sorted(track_samples.items()):
            oid = tr.eval_oid
            if oid < 0 or len(tr.history) < 2:
                continue
            steps_h = sorted(tr.history)
            track_seq = [tr.history[s] for s in steps_h]
            truth_seq = [(self.world.object_state(oid, s).pose,
                          self.world.object_state(oid, s).v) for s in steps_h]
            err = M.object_rmse(track_seq, truth_seq)
            prev = report.object_errors.get(oid)
            if prev is None or (err is not None and err[0] < prev[0]):
                report.object_errors[oid] = err

        report.wall_clock = time.perf_counter() - t0
        return report


def _fused_recall(fused_frames, truth_frames, iou_thr: float = 0.3) -> float | None:
    from .coop_perception import detection_box, oriented_iou
    total = matched = 0
    for dets, truths in zip(fused_frames, truth_frames):
        total += len(truths)
        for g in truths:
            hit = any(oriented_iou(detection_box(d), detection_box(g)) >= iou_thr
                      for d in dets)
            if hit:
                matched += 1
    if total == 0:
        return None
    return matched / total


def run(config: RunConfig) -> RunReport:
    """Execute a full run; writes report artifacts when out_dir is set."""
    from .scenarios import resolve_scenario
    sc = resolve_scenario(config.scenario, seed=config.seed,
                          **config.scenario_kwargs)
    pipe = Pipeline(sc, config)
    report = pipe.run()
    if config.out_dir:
        from .report import write_run_outputs
        write_run_outputs(config, pipe, report, config.out_dir)
    return report
