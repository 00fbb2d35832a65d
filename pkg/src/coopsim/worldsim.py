"""Synthetic world: ground-truth motion, sensing, and confidence maps.

Everything downstream consumes the products generated here: noisy odometry
increments, object detections with false positives, and BEV confidence
maps. The whole sensor stream is a pure function of (scenario, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .geometry import Pose2, between, compose, inverse, wrap_angle
from .grids import ConfidenceMap, GridSpec

OMEGA_EPS = 1e-6


@dataclass(frozen=True)
class ObjectState:
    pose: Pose2
    v: float = 0.0
    omega: float = 0.0


@dataclass(frozen=True)
class SensorModel:
    max_range: float = 50.0
    fov: float = 2.0 * math.pi
    detect_prob_visible: float = 1.0
    false_positive_rate: float = 0.0
    detection_noise: tuple = (0.0, 0.0, 0.0)   # (long m, lat m, yaw rad)
    odom_noise: tuple = (0.0, 0.0, 0.0)        # per-step std devs

    def __post_init__(self):
        if not 0.0 <= self.detect_prob_visible <= 1.0:
            raise ValueError("detect_prob_visible must be in [0, 1]")
        if self.false_positive_rate < 0:
            raise ValueError("false_positive_rate must be >= 0")
        if any(s < 0 for s in self.detection_noise + self.odom_noise):
            raise ValueError("noise std-devs must be >= 0")


@dataclass
class Detection:
    pose_in_vehicle: Pose2
    extent: tuple = (4.5, 2.0)
    confidence: float = 1.0
    stamp: int = 0
    source_vehicle: int = 0
    object_id: int = -1  # ground-truth id for evaluation; -1 for false positives

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ValueError("extent must be positive")


@dataclass
class MotionSegment:
    steps: int
    v: float
    omega: float


@dataclass
class VehicleTrack:
    vid: int
    start: Pose2
    motion: list  # of MotionSegment


@dataclass
class ObjectTrack:
    oid: int
    start: Pose2
    motion: list  # of MotionSegment
    extent: tuple = (4.5, 2.0)


@dataclass
class Scenario:
    duration_steps: int
    dt: float
    vehicles: list
    objects: list
    landmarks: np.ndarray            # (L, 2)
    occluders: list                  # of ((x1, y1), (x2, y2)) wall segments
    sensor: SensorModel = field(default_factory=SensorModel)
    grid: GridSpec = field(default_factory=lambda: GridSpec.centered(100, 252, 0.4, 2.0))
    seed: int = 0
    keyframe_stride: int = 2

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 2)


def step_ctrv(s: ObjectState, dt: float) -> ObjectState:
    """Closed-form constant turn rate and velocity update."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    p, v, w = s.pose, s.v, s.omega
    if abs(w) < OMEGA_EPS:
        x = p.x + v * dt * math.cos(p.yaw)
        y = p.y + v * dt * math.sin(p.yaw)
        yaw = p.yaw + w * dt
    else:
        yaw1 = p.yaw + w * dt
        x = p.x + v / w * (math.sin(yaw1) - math.sin(p.yaw))
        y = p.y - v / w * (math.cos(yaw1) - math.cos(p.yaw))
        yaw = yaw1
    return ObjectState(Pose2(x, y, yaw), v, w)


def rollout_track(start: Pose2, motion, dt: float, duration: int):
    """Ground-truth (pose, v, omega) per step for a piecewise CTRV track."""
    states = []
    s = ObjectState(start, motion[0].v if motion else 0.0,
                    motion[0].omega if motion else 0.0)
    seg_iter = iter(motion)
    seg = next(seg_iter, None)
    remaining = seg.steps if seg else 0
    for _ in range(duration):
        while seg is not None and remaining == 0:
            seg = next(seg_iter, None)
            remaining = seg.steps if seg else 0
        if seg is not None:
            s = ObjectState(s.pose, seg.v, seg.omega)
        states.append(s)
        s = step_ctrv(s, dt)
        if seg is not None:
            remaining -= 1
    return states


class WorldState:
    """Precomputed ground truth for every (vehicle, object, step)."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.vehicle_states = {
            v.vid: rollout_track(v.start, v.motion, scenario.dt, scenario.duration_steps)
            for v in scenario.vehicles
        }
        self.object_states = {
            o.oid: rollout_track(o.start, o.motion, scenario.dt, scenario.duration_steps)
            for o in scenario.objects
        }
        self.object_extent = {o.oid: tuple(o.extent) for o in scenario.objects}

    def vehicle_pose(self, vid: int, step: int) -> Pose2:
        return self.vehicle_states[vid][step].pose

    def object_state(self, oid: int, step: int) -> ObjectState:
        return self.object_states[oid][step]


def stream_rng(seed: int, vehicle: int, step: int, channel: int) -> np.random.Generator:
    """Independent, reproducible stream per (vehicle, step, channel)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, vehicle + 1,
                                 step + 1, channel])
    return np.random.default_rng(ss)


def generate_odometry(true_between: Pose2, model: SensorModel,
                      rng: np.random.Generator) -> Pose2:
    """Ground-truth relative pose perturbed by per-axis Gaussian noise."""
    n = rng.normal(0.0, 1.0, size=3) * np.asarray(model.odom_noise)
    return Pose2(true_between.x + n[0], true_between.y + n[1],
                 true_between.yaw + n[2])


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
        return True
    return False


def visible_objects(vehicle: Pose2, sensor: SensorModel,
                    object_poses: dict, occluders) -> set:
    """Ids of objects in range, inside the FOV, and not behind an occluder."""
    out = set()
    vp = (vehicle.x, vehicle.y)
    for oid, pose in object_poses.items():
        dx, dy = pose.x - vehicle.x, pose.y - vehicle.y
        rng_m = math.hypot(dx, dy)
        if rng_m > sensor.max_range:
            continue
        if sensor.fov < 2.0 * math.pi - 1e-12 and rng_m > 1e-9:
            bearing = wrap_angle(math.atan2(dy, dx) - vehicle.yaw)
            if abs(bearing) > 0.5 * sensor.fov:
                continue
        blocked = any(_segments_intersect(vp, (pose.x, pose.y), a, b)
                      for a, b in occluders)
        if not blocked:
            out.add(oid)
    return out


def detect_objects(vehicle: Pose2, visible: set, object_poses: dict,
                   object_extent: dict, model: SensorModel,
                   rng: np.random.Generator, stamp: int = 0,
                   source_vehicle: int = 0) -> list:
    """Noisy vehicle-frame detections plus Poisson false positives.

    Confidence falls linearly with range, floored at 0.05. False positives
    are placed uniformly in the sensor footprint with low confidence.
    """
    dets = []
    inv_v = inverse(vehicle)
    for oid in sorted(visible):
        if rng.random() >= model.detect_prob_visible:
            continue
        rel = compose(inv_v, object_poses[oid])
        rng_m = math.hypot(rel.x, rel.y)
        conf = min(1.0, max(0.05, 1.0 - rng_m / model.max_range))
        noise = rng.normal(0.0, 1.0, size=3) * np.asarray(model.detection_noise)
        # longitudinal/lateral noise in the detection's own heading frame
        c, s = math.cos(rel.yaw), math.sin(rel.yaw)
        noisy = Pose2(rel.x + c * noise[0] - s * noise[1],
                      rel.y + s * noise[0] + c * noise[1],
                      rel.yaw + noise[2])
        dets.append(Detection(noisy, object_extent.get(oid, (4.5, 2.0)), conf,
                              stamp, source_vehicle, oid))
    n_fp = rng.poisson(model.false_positive_rate)
    for _ in range(n_fp):
        r = model.max_range * math.sqrt(rng.random())
        half = 0.5 * min(model.fov, 2.0 * math.pi)
        b = rng.uniform(-half, half)
        yaw = rng.uniform(-math.pi, math.pi)
        conf = rng.uniform(0.05, 0.4)
        dets.append(Detection(Pose2(r * math.cos(b), r * math.sin(b), yaw),
                              (4.5, 2.0), conf, stamp, source_vehicle, -1))
    return dets


def confidence_map(vehicle: Pose2, detections, grid: GridSpec,
                   vehicle_id: int = -1, stamp: int = -1) -> ConfidenceMap:
    """Max over detections of confidence * Gaussian kernel on cell distance."""
    values = np.zeros((grid.height_cells, grid.width_cells))
    if detections:
        centers = grid.cell_centers().reshape(-1, 2)
        sig2 = 2.0 * grid.kernel_sigma ** 2
        for d in detections:
            dp = np.array([d.pose_in_vehicle.x, d.pose_in_vehicle.y])
            dist2 = np.sum((centers - dp) ** 2, axis=1)
            k = d.confidence * np.exp(-dist2 / sig2)
            values = np.maximum(values, k.reshape(values.shape))
    return ConfidenceMap(grid, np.clip(values, 0.0, 1.0), vehicle_id, stamp)


# ---------------------------------------------------------------------------
# Scenario files (YAML) and trace records


def _pose_from(v) -> Pose2:
    return Pose2(float(v[0]), float(v[1]), float(v[2]))


def _motion_from(items):
    return [MotionSegment(int(m["steps"]), float(m["v"]), float(m.get("omega", 0.0)))
            for m in items]


def scenario_from_dict(d: dict) -> Scenario:
    sensor = SensorModel(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in d.get("sensor", {}).items()})
    g = d.get("grid", {})
    grid = GridSpec.centered(int(g.get("height_cells", 100)),
                             int(g.get("width_cells", 252)),
                             float(g.get("resolution", 0.4)),
                             float(g.get("kernel_sigma", 2.0)))
    return Scenario(
        duration_steps=int(d["duration_steps"]),
        dt=float(d["dt"]),
        vehicles=[VehicleTrack(int(v["id"]), _pose_from(v["start"]),
                               _motion_from(v["motion"]))
                  for v in d.get("vehicles", [])],
        objects=[ObjectTrack(int(o["id"]), _pose_from(o["start"]),
                             _motion_from(o["motion"]),
                             tuple(o.get("extent", (4.5, 2.0))))
                 for o in d.get("objects", [])],
        landmarks=np.asarray(d.get("landmarks", []), dtype=float).reshape(-1, 2),
        occluders=[(tuple(map(float, seg[0])), tuple(map(float, seg[1])))
                   for seg in d.get("occluders", [])],
        sensor=sensor,
        grid=grid,
        seed=int(d.get("seed", 0)),
        keyframe_stride=int(d.get("keyframe_stride", 2)),
    )


def load_scenario(path: str) -> Scenario:
    with open(path) as f:
        return scenario_from_dict(yaml.safe_load(f))


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "duration_steps": sc.duration_steps,
        "dt": sc.dt,
        "seed": sc.seed,
        "keyframe_stride": sc.keyframe_stride,
        "sensor": {
            "max_range": sc.sensor.max_range,
            "fov": sc.sensor.fov,
            "detect_prob_visible": sc.sensor.detect_prob_visible,
            "false_positive_rate": sc.sensor.false_positive_rate,
            "detection_noise": list(sc.sensor.detection_noise),
            "odom_noise": list(sc.sensor.odom_noise),
        },
        "grid": {
            "height_cells": sc.grid.height_cells,
            "width_cells": sc.grid.width_cells,
            "resolution": sc.grid.resolution,
            "kernel_sigma": sc.grid.kernel_sigma,
        },
        "vehicles": [{"id": v.vid, "start": list(v.start.as_array()),
                      "motion": [{"steps": m.steps, "v": m.v, "omega": m.omega}
                                 for m in v.motion]} for v in sc.vehicles],
        "objects": [{"id": o.oid, "start": list(o.start.as_array()),
                     "extent": list(o.extent),
                     "motion": [{"steps": m.steps, "v": m.v, "omega": m.omega}
                                for m in o.motion]} for o in sc.objects],
        "landmarks": [list(map(float, p)) for p in sc.landmarks],
        "occluders": [[list(a), list(b)] for a, b in sc.occluders],
    }


def save_scenario(sc: Scenario, path: str):
    with open(path, "w") as f:
        yaml.safe_dump(scenario_to_dict(sc), f, sort_keys=False)


# Trace record: one line per (step, vehicle):
#   step vehicle gx gy gyaw ox oy oyaw ndet {x y yaw len wid conf oid}*
def trace_line(step: int, vid: int, gt: Pose2, odom: Pose2, detections) -> str:
    parts = [str(step), str(vid)]
    parts += [f"{v:.9f}" for v in gt.as_array()]
    parts += [f"{v:.9f}" for v in odom.as_array()]
    parts.append(str(len(detections)))
    for d in detections:
        parts += [f"{d.pose_in_vehicle.x:.9f}", f"{d.pose_in_vehicle.y:.9f}",
                  f"{d.pose_in_vehicle.yaw:.9f}", f"{d.extent[0]:.6f}",
                  f"{d.extent[1]:.6f}", f"{d.confidence:.6f}", str(d.object_id)]
    return " ".join(parts)


def parse_trace_line(line: str):
    tok = line.split()
    step, vid = int(tok[0]), int(tok[1])
    gt = Pose2(float(tok[2]), float(tok[3]), float(tok[4]))
    odom = Pose2(float(tok[5]), float(tok[6]), float(tok[7]))
    n = int(tok[8])
    dets = []
    i = 9
    for _ in range(n):
        x, y, yaw, ln, wd, conf = map(float, tok[i:i + 6])
        oid = int(tok[i + 6])
        dets.append(Detection(Pose2(x, y, yaw), (ln, wd), conf, step, vid, oid))
        i += 7
    return step, vid, gt, odom, dets
