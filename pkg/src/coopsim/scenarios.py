"""Built-in synthetic scenarios used by tests, sweeps, and the CLI.

``occlusion``: four vehicles around an intersection with a wall that hides
an object cluster from the ego vehicle; neighbors see behind it.

``collaborators``: one neighbor overlapping the ego's surroundings and two
far-away neighbors, for collaborator-count sweeps.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import Pose2
from .grids import GridSpec
from .worldsim import (MotionSegment, ObjectTrack, Scenario, SensorModel,
                       VehicleTrack)

DEFAULT_ODOM_NOISE = (0.05, 0.05, 0.004)
DEFAULT_DET_NOISE = (0.15, 0.15, 0.03)


def _landmark_field(rng: np.random.Generator, n: int, extent: float,
                    center=(0.0, 0.0)) -> np.ndarray:
    pts = rng.uniform(-extent, extent, size=(n, 2))
    return pts + np.asarray(center)


def occlusion_scenario(seed: int = 0, n_objects: int = 10,
                       duration_steps: int = 120, noisy: bool = True,
                       n_vehicles: int = 4) -> Scenario:
    """Intersection with a wall hiding the north-east object cluster."""
    rng = np.random.default_rng(np.random.SeedSequence([11, seed]))
    dt = 0.5
    cruise = [MotionSegment(duration_steps, 0.6, 0.0)]
    # vehicle 1 travels alongside the ego; 2 and 3 watch the far side
    vehicles = [
        VehicleTrack(0, Pose2(-40.0, 0.0, 0.0), list(cruise)),
        VehicleTrack(1, Pose2(-34.0, 8.0, 0.0), list(cruise)),
        VehicleTrack(2, Pose2(40.0, 5.0, math.pi), list(cruise)),
        VehicleTrack(3, Pose2(5.0, 40.0, -math.pi / 2), list(cruise)),
    ][:n_vehicles]

    objects = []
    n_far = n_objects // 2
    for i in range(n_objects):
        if i < n_far:  # cluster behind the wall, hidden from the ego
            x = 14.0 + 4.0 * (i % 3)
            y = 8.0 + 5.0 * (i // 3)
            yaw = math.pi if i % 2 else math.pi / 2
        else:
            j = i - n_far
            x = -16.0 - 4.0 * (j % 3)
            y = -10.0 + 5.0 * (j // 3)
            yaw = 0.0 if j % 2 else -math.pi / 2
        v = 0.2 + 0.05 * (i % 3)
        omega = 0.01 * ((i % 3) - 1)
        objects.append(ObjectTrack(100 + i, Pose2(x, y, yaw),
                                   [MotionSegment(duration_steps, v, omega)]))

    landmarks = _landmark_field(rng, 800, 60.0)
    occluders = [((5.0, 2.0), (5.0, 18.0))]
    sensor = SensorModel(
        max_range=60.0,
        fov=2.0 * math.pi,
        detect_prob_visible=0.95 if noisy else 1.0,
        false_positive_rate=0.1 if noisy else 0.0,
        detection_noise=DEFAULT_DET_NOISE if noisy else (0.0, 0.0, 0.0),
        odom_noise=DEFAULT_ODOM_NOISE if noisy else (0.0, 0.0, 0.0),
    )
    grid = GridSpec.centered(12, 12, 10.0, kernel_sigma=4.0)
    return Scenario(duration_steps, dt, vehicles, objects, landmarks,
                    occluders, sensor, grid, seed=seed, keyframe_stride=2)


def collaborators_scenario(seed: int = 0, duration_steps: int = 100) -> Scenario:
    """Ego plus one overlapping neighbor and two distant neighbors."""
    rng = np.random.default_rng(np.random.SeedSequence([13, seed]))
    dt = 0.5
    cruise = [MotionSegment(duration_steps, 0.6, 0.0)]
    vehicles = [
        VehicleTrack(0, Pose2(-20.0, 0.0, 0.0), list(cruise)),
        VehicleTrack(1, Pose2(-16.0, 6.0, 0.0), list(cruise)),
        VehicleTrack(2, Pose2(400.0, 400.0, math.pi), list(cruise)),
        VehicleTrack(3, Pose2(-420.0, 380.0, 0.0), list(cruise)),
    ]
    objects = [ObjectTrack(100, Pose2(15.0, -5.0, math.pi / 2),
                           [MotionSegment(duration_steps, 0.3, 0.0)])]
    near = _landmark_field(rng, 800, 60.0)
    far_a = _landmark_field(rng, 400, 40.0, center=(400.0, 400.0))
    far_b = _landmark_field(rng, 400, 40.0, center=(-420.0, 380.0))
    landmarks = np.vstack([near, far_a, far_b])
    sensor = SensorModel(
        max_range=60.0,
        detect_prob_visible=0.95,
        false_positive_rate=0.0,
        detection_noise=DEFAULT_DET_NOISE,
        odom_noise=DEFAULT_ODOM_NOISE,
    )
    grid = GridSpec.centered(12, 12, 10.0, kernel_sigma=4.0)
    return Scenario(duration_steps, dt, vehicles, objects, landmarks, [],
                    sensor, grid, seed=seed, keyframe_stride=2)


BUILTIN = {
    "occlusion": occlusion_scenario,
    "collaborators": collaborators_scenario,
}


def resolve_scenario(name_or_path: str, seed: int | None = None, **kwargs) -> Scenario:
    if name_or_path.startswith("builtin:"):
        builder = BUILTIN[name_or_path.split(":", 1)[1]]
        return builder(seed=seed or 0, **kwargs)
    from .worldsim import load_scenario
    sc = load_scenario(name_or_path)
    if seed is not None:
        sc.seed = seed
    return sc
