"""Factor graph backend: Jacobians, solver optimality, mixtures, and
marginalization."""

import math

import numpy as np
import pytest

from coopsim.factor_graph import (OBJECT_POSE, OBJECT_VELOCITY, VEHICLE_POSE,
                                  Estimate, FactorGraph, LMParams,
                                  MotionFactor, ObjectPerceptionFactor,
                                  OdometryFactor, PriorFactor, VariableId,
                                  VelocityFactor, max_mixture_residual,
                                  virtualize_detection)
from coopsim.geometry import Pose2, compose, wrap_angle
from coopsim.worldsim import Detection


def _rand_spd(rng, n):
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


def numeric_jacobians(factor, values, eps=1e-7):
    """Central finite differences of the factor residual."""
    r0, _, _ = factor.linearize(values)
    out = {}
    for vid in factor.variables:
        dim = len(values[vid])
        j = np.zeros((len(r0), dim))
        for k in range(dim):
            hi = {v: np.array(x, dtype=float) for v, x in values.items()}
            lo = {v: np.array(x, dtype=float) for v, x in values.items()}
            hi[vid][k] += eps
            lo[vid][k] -= eps
            rh, _, _ = factor.linearize(hi)
            rl, _, _ = factor.linearize(lo)
            diff = rh - rl
            if len(diff) == 3:
                diff[2] = wrap_angle(rh[2] - rl[2])
            j[:, k] = diff / (2.0 * eps)
        out[vid] = j
    return out


def _check_factor_jacobians(factor, values, tol=1e-5):
    _, jacs, _ = factor.linearize(values)
    num = numeric_jacobians(factor, values)
    for vid, j in jacs.items():
        np.testing.assert_allclose(j, num[vid], atol=tol,
                                   err_msg=f"jacobian mismatch for {vid}")


def test_prior_factor_jacobian():
    rng = np.random.default_rng(0)
    v = VariableId(VEHICLE_POSE, 0, 0)
    for _ in range(20):
        f = PriorFactor(v, rng.normal(size=3), _rand_spd(rng, 3))
        _check_factor_jacobians(f, {v: rng.normal(size=3)})


def test_odometry_factor_jacobian():
    rng = np.random.default_rng(1)
    a = VariableId(VEHICLE_POSE, 0, 0)
    b = VariableId(VEHICLE_POSE, 0, 2)
    for _ in range(20):
        f = OdometryFactor(a, b, Pose2(*rng.normal(size=3)), _rand_spd(rng, 3))
        _check_factor_jacobians(f, {a: rng.normal(size=3),
                                    b: rng.normal(size=3)})


def test_perception_factor_jacobian():
    rng = np.random.default_rng(2)
    x = VariableId(VEHICLE_POSE, 0, 0)
    o = VariableId(OBJECT_POSE, 1, 0)
    for _ in range(20):
        # single component so finite differences cannot switch modes
        f = ObjectPerceptionFactor(x, o, [(1.0, Pose2(*rng.normal(size=3)),
                                           _rand_spd(rng, 3))])
        _check_factor_jacobians(f, {x: rng.normal(size=3),
                                    o: rng.normal(size=3)})


def test_motion_factor_jacobian_both_turn_regimes():
    rng = np.random.default_rng(3)
    op = VariableId(OBJECT_POSE, 1, 0)
    vp = VariableId(OBJECT_VELOCITY, 1, 0)
    oc = VariableId(OBJECT_POSE, 1, 1)
    for w in (0.0, 5e-7, 0.4, -1.1):
        f = MotionFactor(op, vp, oc, 0.5, _rand_spd(rng, 3))
        values = {op: rng.normal(size=3),
                  vp: np.array([rng.uniform(0.1, 2.0), w]),
                  oc: rng.normal(size=3)}
        _check_factor_jacobians(f, values, tol=1e-4)


def test_velocity_factor_jacobian():
    rng = np.random.default_rng(4)
    a = VariableId(OBJECT_VELOCITY, 1, 0)
    b = VariableId(OBJECT_VELOCITY, 1, 1)
    f = VelocityFactor(a, b, _rand_spd(rng, 2))
    _check_factor_jacobians(f, {a: rng.normal(size=2), b: rng.normal(size=2)})


def test_linear_prior_factor_jacobian():
    # produced via marginalization on a small chain
    rng = np.random.default_rng(5)
    graph, values = _pose_chain(rng, 3)
    est = graph.optimize(Estimate(values))
    reduced = graph.marginalize(est, [VariableId(VEHICLE_POSE, 0, 0)])
    lin = [f for f in reduced.factors if f.kind == "linear_prior"]
    assert len(lin) == 1
    _check_factor_jacobians(lin[0], est.values)


# ---------------------------------------------------------------------------
# Solver optimality


def _pose_chain(rng, n, noise=0.1):
    graph = FactorGraph()
    values = {}
    vids = [VariableId(VEHICLE_POSE, 0, t) for t in range(n)]
    truth = Pose2(0.0, 0.0, 0.0)
    graph.add_variable(vids[0])
    values[vids[0]] = truth.as_array() + rng.normal(0, noise, 3)
    graph.add_factor(PriorFactor(vids[0], np.zeros(3), np.diag([1e4] * 3)))
    for t in range(1, n):
        meas = Pose2(1.0 + rng.normal(0, noise), rng.normal(0, noise),
                     rng.normal(0, 0.05))
        truth = compose(truth, meas)
        graph.add_variable(vids[t])
        values[vids[t]] = truth.as_array() + rng.normal(0, noise, 3)
        graph.add_factor(OdometryFactor(vids[t - 1], vids[t], meas,
                                        _rand_spd(rng, 3)))
    return graph, values


def _scipy_solution(graph, values):
    from scipy.optimize import least_squares

    order = sorted(graph.variables)
    offsets, total = {}, 0
    for vid in order:
        offsets[vid] = total
        total += vid.dim
    x0 = np.concatenate([values[vid] for vid in order])

    def unpack(x):
        return {vid: x[offsets[vid]:offsets[vid] + vid.dim] for vid in order}

    def residuals(x):
        vals = unpack(x)
        rows = []
        for f in graph.factors:
            r, _, info = f.linearize(vals)
            rows.append(np.linalg.cholesky(info).T @ r)
        return np.concatenate(rows)

    sol = least_squares(residuals, x0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return unpack(sol.x), 2.0 * sol.cost


def test_lm_matches_generic_least_squares_on_random_graphs():
    rng = np.random.default_rng(7)
    for trial in range(10):
        graph, values = _pose_chain(rng, int(rng.integers(2, 7)))
        ours = graph.optimize(Estimate({k: np.array(v) for k, v in
                                        values.items()}),
                              LMParams(max_iterations=200))
        ref_vals, ref_cost = _scipy_solution(graph, values)
        assert ours.cost <= ref_cost + 1e-6
        for vid in graph.variables:
            diff = ours.values[vid] - ref_vals[vid]
            diff[2] = wrap_angle(diff[2])
            assert np.max(np.abs(diff)) < 1e-6, f"trial {trial} var {vid}"


def test_linear_gaussian_graph_matches_weighted_least_squares():
    rng = np.random.default_rng(8)
    n = 5
    vids = [VariableId(OBJECT_VELOCITY, 1, t) for t in range(n)]
    graph = FactorGraph()
    rows_a, rows_b, infos = [], [], []
    offsets = {vid: 2 * i for i, vid in enumerate(vids)}
    for vid in vids:
        graph.add_variable(vid)
    values = {vid: rng.normal(size=2) for vid in vids}
    for vid in vids:
        meas = rng.normal(size=2)
        info = _rand_spd(rng, 2)
        graph.add_factor(PriorFactor(vid, meas, info))
        a = np.zeros((2, 2 * n))
        a[:, offsets[vid]:offsets[vid] + 2] = np.eye(2)
        rows_a.append(a)
        rows_b.append(meas)
        infos.append(info)
    for prev, cur in zip(vids, vids[1:]):
        info = _rand_spd(rng, 2)
        graph.add_factor(VelocityFactor(prev, cur, info))
        a = np.zeros((2, 2 * n))
        a[:, offsets[prev]:offsets[prev] + 2] = -np.eye(2)
        a[:, offsets[cur]:offsets[cur] + 2] = np.eye(2)
        rows_a.append(a)
        rows_b.append(np.zeros(2))
        infos.append(info)
    a = np.vstack(rows_a)
    b = np.concatenate(rows_b)
    w = np.zeros((len(b), len(b)))
    for i, info in enumerate(infos):
        w[2 * i:2 * i + 2, 2 * i:2 * i + 2] = info
    closed = np.linalg.solve(a.T @ w @ a, a.T @ w @ b)
    est = graph.optimize(Estimate(values), LMParams(max_iterations=100))
    got = np.concatenate([est.values[vid] for vid in vids])
    np.testing.assert_allclose(got, closed, atol=1e-10)


# ---------------------------------------------------------------------------
# Max-mixture selection


def _brute_force_best(cands):
    scores = []
    for w, r, info in cands:
        r = np.asarray(r, dtype=float)
        scores.append(float(r @ info @ r) - 2.0 * math.log(w)
                      - math.log(np.linalg.det(info)))
    return int(np.argmin(scores))


def test_max_mixture_matches_brute_force():
    rng = np.random.default_rng(9)
    for _ in range(500):
        n = int(rng.integers(1, 6))
        cands = [(float(rng.uniform(0.01, 1.0)), rng.normal(size=3),
                  _rand_spd(rng, 3)) for _ in range(n)]
        idx, r, info = max_mixture_residual(cands)
        assert idx == _brute_force_best(cands)
        np.testing.assert_array_equal(r, np.asarray(cands[idx][1]))
    with pytest.raises(ValueError):
        max_mixture_residual([])


def test_mixture_factor_reselects_component_by_state():
    x = VariableId(VEHICLE_POSE, 0, 0)
    o = VariableId(OBJECT_POSE, 1, 0)
    info = np.eye(3)
    f = ObjectPerceptionFactor(x, o, [(0.5, Pose2(5.0, 0.0, 0.0), info),
                                      (0.5, Pose2(-5.0, 0.0, 0.0), info)])
    f.linearize({x: np.zeros(3), o: np.array([5.0, 0.0, 0.0])})
    assert f.selected == 0
    f.linearize({x: np.zeros(3), o: np.array([-5.0, 0.0, 0.0])})
    assert f.selected == 1


# ---------------------------------------------------------------------------
# Marginalization


def test_marginalization_preserves_blanket_solution():
    rng = np.random.default_rng(11)
    graph, values = _pose_chain(rng, 6, noise=0.05)
    full = graph.optimize(Estimate(values), LMParams(max_iterations=200))
    marg_vars = [VariableId(VEHICLE_POSE, 0, 0), VariableId(VEHICLE_POSE, 0, 1)]
    reduced = graph.marginalize(full, marg_vars)
    assert all(v not in reduced.variables for v in marg_vars)
    re_est = reduced.optimize(
        Estimate({v: np.array(full.values[v]) for v in reduced.variables}),
        LMParams(max_iterations=200))
    for vid in reduced.variables:
        diff = re_est.values[vid] - full.values[vid]
        diff[2] = wrap_angle(diff[2])
        assert np.max(np.abs(diff)) < 1e-8


def test_slide_window_drops_old_stamps_only():
    rng = np.random.default_rng(12)
    graph, values = _pose_chain(rng, 8)
    est = graph.optimize(Estimate(values))
    slid = graph.slide_window(est, horizon=3)
    stamps = sorted(v.stamp for v in slid.variables)
    assert stamps == [5, 6, 7]
    with pytest.raises(ValueError):
        graph.slide_window(est, horizon=1)


def test_graph_validation_errors():
    graph = FactorGraph()
    v = VariableId(VEHICLE_POSE, 0, 0)
    with pytest.raises(KeyError):
        graph.add_factor(PriorFactor(v, np.zeros(3), np.eye(3)))
    graph.add_variable(v)
    graph.add_factor(PriorFactor(v, np.zeros(3), np.eye(3)))
    with pytest.raises(KeyError):
        graph.optimize(Estimate({}))


def test_virtualize_detection_shifts_frame():
    d = Detection(Pose2(3.0, 0.0, 0.0))
    out = virtualize_detection(d, Pose2(1.0, 0.0, 0.0))
    assert out.pose_in_vehicle.x == pytest.approx(4.0)
    with pytest.raises(ValueError):
        virtualize_detection(d, None)


def test_graph_dump_lists_variables_and_factors():
    rng = np.random.default_rng(13)
    graph, values = _pose_chain(rng, 2)
    text = graph.dump(Estimate(values))
    assert text.count("VAR ") == 2
    assert "FACTOR prior" in text and "FACTOR odometry" in text
