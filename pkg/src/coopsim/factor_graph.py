"""Joint nonlinear least-squares backend.

Variables are vehicle poses, object poses, and object velocities. Factors
cover priors, odometry, inter-vehicle agreement, object perception (with
optional max-mixture measurement components), object motion, and velocity
smoothness. Solving is damped Gauss-Newton (Levenberg-Marquardt) over a
sliding window; old state folds into a linearized Gaussian prior via
Schur-complement marginalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose2, between, compose, wrap_angle
from .worldsim import Detection, ObjectState, step_ctrv

VEHICLE_POSE = "vehicle_pose"
OBJECT_POSE = "object_pose"
OBJECT_VELOCITY = "object_velocity"

_DIMS = {VEHICLE_POSE: 3, OBJECT_POSE: 3, OBJECT_VELOCITY: 2}


@dataclass(frozen=True, order=True)
class VariableId:
    kind: str
    entity: int
    stamp: int

    @property
    def dim(self) -> int:
        return _DIMS[self.kind]


class OptimizeFailure(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class Estimate:
    values: dict
    cost: float = 0.0
    iterations: int = 0

    def pose(self, vid: VariableId) -> Pose2:
        return Pose2.from_array(self.values[vid])


# ---------------------------------------------------------------------------
# Residuals and Jacobians


def _between_residual(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    c, s = math.cos(a[2]), math.sin(a[2])
    dx, dy = b[0] - a[0], b[1] - a[1]
    return np.array([c * dx + s * dy, -s * dx + c * dy, wrap_angle(b[2] - a[2])])


def _between_jacobians(a: np.ndarray, b: np.ndarray):
    c, s = math.cos(a[2]), math.sin(a[2])
    dx, dy = b[0] - a[0], b[1] - a[1]
    ja = np.array([[-c, -s, -s * dx + c * dy],
                   [s, -c, -c * dx - s * dy],
                   [0.0, 0.0, -1.0]])
    jb = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return ja, jb


def _compose_pose_meas(x: np.ndarray, m: np.ndarray):
    """Composition a = x * m and its Jacobian wrt x."""
    c, s = math.cos(x[2]), math.sin(x[2])
    a = np.array([x[0] + c * m[0] - s * m[1],
                  x[1] + s * m[0] + c * m[1],
                  x[2] + m[2]])
    da_dx = np.array([[1.0, 0.0, -s * m[0] - c * m[1]],
                      [0.0, 1.0, c * m[0] - s * m[1]],
                      [0.0, 0.0, 1.0]])
    return a, da_dx


def residual_odometry(x_prev: Pose2, x_cur: Pose2, meas: Pose2) -> np.ndarray:
    """Zero iff x_cur = x_prev * meas."""
    a, _ = _compose_pose_meas(x_prev.as_array(), meas.as_array())
    return _between_residual(a, x_cur.as_array())


def residual_intervehicle(x_e: Pose2, x_en: Pose2) -> np.ndarray:
    """Zero iff the ego pose agrees with the indirect estimate."""
    return _between_residual(x_en.as_array(), x_e.as_array())


def residual_object_perception(x_e: Pose2, o_i: Pose2, z: Pose2) -> np.ndarray:
    """Zero iff o_i = x_e * z (landmark-style detection residual)."""
    a, _ = _compose_pose_meas(x_e.as_array(), z.as_array())
    return _between_residual(a, o_i.as_array())


def residual_motion(o_prev: Pose2, v_prev, o_cur: Pose2, dt: float) -> np.ndarray:
    pred = step_ctrv(ObjectState(o_prev, v_prev[0], v_prev[1]), dt).pose
    return _between_residual(pred.as_array(), o_cur.as_array())


def residual_velocity(v_prev, v_cur) -> np.ndarray:
    return np.array([v_cur[0] - v_prev[0], v_cur[1] - v_prev[1]])


def _ctrv_jacobians(state: np.ndarray, v: float, w: float, dt: float):
    """Prediction and its Jacobians wrt pose (3x3) and velocity (3x2)."""
    th = state[2]
    c0, s0 = math.cos(th), math.sin(th)
    if abs(w) < 1e-6:
        # first-order-in-w series keeps the Jacobian continuous at the switch
        pred = np.array([state[0] + v * dt * c0 - 0.5 * v * dt * dt * w * s0,
                         state[1] + v * dt * s0 + 0.5 * v * dt * dt * w * c0,
                         th + w * dt])
        dth = np.array([-v * dt * s0 - 0.5 * v * dt * dt * w * c0,
                        v * dt * c0 - 0.5 * v * dt * dt * w * s0])
        dv = np.array([dt * c0 - 0.5 * dt * dt * w * s0,
                       dt * s0 + 0.5 * dt * dt * w * c0])
        dw = np.array([-0.5 * v * dt * dt * s0, 0.5 * v * dt * dt * c0])
    else:
        th1 = th + w * dt
        c1, s1 = math.cos(th1), math.sin(th1)
        pred = np.array([state[0] + v / w * (s1 - s0),
                         state[1] - v / w * (c1 - c0),
                         th1])
        dth = np.array([v / w * (c1 - c0), v / w * (s1 - s0)])
        dv = np.array([(s1 - s0) / w, -(c1 - c0) / w])
        dw = np.array([-v / w ** 2 * (s1 - s0) + v * dt / w * c1,
                       v / w ** 2 * (c1 - c0) + v * dt / w * s1])
    jp = np.array([[1.0, 0.0, dth[0]], [0.0, 1.0, dth[1]], [0.0, 0.0, 1.0]])
    jv = np.array([[dv[0], dw[0]], [dv[1], dw[1]], [0.0, dt]])
    return pred, jp, jv


# ---------------------------------------------------------------------------
# Factors


@dataclass
class PriorFactor:
    kind = "prior"
    var: VariableId
    meas: np.ndarray
    information: np.ndarray

    def __post_init__(self):
        self.meas = np.asarray(self.meas, dtype=float)
        self.information = np.asarray(self.information, dtype=float)

    @property
    def variables(self):
        return (self.var,)

    def linearize(self, values):
        x = values[self.var]
        if self.var.kind == OBJECT_VELOCITY:
            return x - self.meas, {self.var: np.eye(2)}, self.information
        r = _between_residual(self.meas, x)
        _, jb = _between_jacobians(self.meas, x)
        return r, {self.var: jb}, self.information


@dataclass
class OdometryFactor:
    kind = "odometry"
    prev: VariableId
    cur: VariableId
    meas: Pose2
    information: np.ndarray

    @property
    def variables(self):
        return (self.prev, self.cur)

    def linearize(self, values):
        xp, xc = values[self.prev], values[self.cur]
        a, da_dxp = _compose_pose_meas(xp, self.meas.as_array())
        r = _between_residual(a, xc)
        ja, jb = _between_jacobians(a, xc)
        return r, {self.prev: ja @ da_dxp, self.cur: jb}, self.information


@dataclass
class InterVehicleFactor:
    kind = "inter_vehicle"
    var: VariableId
    meas: Pose2
    information: np.ndarray

    @property
    def variables(self):
        return (self.var,)

    def linearize(self, values):
        m = self.meas.as_array()
        x = values[self.var]
        r = _between_residual(m, x)
        _, jb = _between_jacobians(m, x)
        return r, {self.var: jb}, self.information


@dataclass
class ObjectPerceptionFactor:
    """Detection factor tying an ego pose to an object pose.

    ``mixture`` holds (weight, measurement pose, information) components;
    the best-scoring component is re-selected at every linearization.
    """

    kind = "object_perception"
    var_x: VariableId
    var_o: VariableId
    mixture: list
    selected: int = 0

    @property
    def variables(self):
        return (self.var_x, self.var_o)

    def _component_residual(self, values, z: Pose2):
        xe, o = values[self.var_x], values[self.var_o]
        a, da_dx = _compose_pose_meas(xe, z.as_array())
        r = _between_residual(a, o)
        ja, jb = _between_jacobians(a, o)
        return r, {self.var_x: ja @ da_dx, self.var_o: jb}

    def linearize(self, values):
        if not self.mixture:
            raise ValueError("mixture must have at least one component")
        cands = []
        for w, z, info in self.mixture:
            r, _ = self._component_residual(values, z)
            cands.append((w, r, info))
        idx, _, _ = max_mixture_residual(cands)
        self.selected = idx
        _, z, info = self.mixture[idx]
        r, jacs = self._component_residual(values, z)
        return r, jacs, info


@dataclass
class MotionFactor:
    kind = "motion"
    o_prev: VariableId
    v_prev: VariableId
    o_cur: VariableId
    dt: float
    information: np.ndarray

    @property
    def variables(self):
        return (self.o_prev, self.v_prev, self.o_cur)

    def linearize(self, values):
        op, vp, oc = values[self.o_prev], values[self.v_prev], values[self.o_cur]
        pred, jp, jv = _ctrv_jacobians(op, vp[0], vp[1], self.dt)
        r = _between_residual(pred, oc)
        ja, jb = _between_jacobians(pred, oc)
        return r, {self.o_prev: ja @ jp, self.v_prev: ja @ jv,
                   self.o_cur: jb}, self.information


@dataclass
class VelocityFactor:
    kind = "velocity"
    v_prev: VariableId
    v_cur: VariableId
    information: np.ndarray

    @property
    def variables(self):
        return (self.v_prev, self.v_cur)

    def linearize(self, values):
        r = values[self.v_cur] - values[self.v_prev]
        return r, {self.v_prev: -np.eye(2), self.v_cur: np.eye(2)}, self.information


@dataclass
class LinearPriorFactor:
    """Gaussian prior from marginalization: r = A (x [-] x0) + e0."""

    kind = "linear_prior"
    vars: tuple
    lin_point: dict
    a_blocks: dict
    e0: np.ndarray

    @property
    def variables(self):
        return self.vars

    def _delta(self, values, vid):
        d = values[vid] - self.lin_point[vid]
        if vid.kind != OBJECT_VELOCITY:
            d = d.copy()
            d[2] = wrap_angle(d[2])
        return d

    def linearize(self, values):
        r = self.e0.copy()
        for vid in self.vars:
            r = r + self.a_blocks[vid] @ self._delta(values, vid)
        return r, dict(self.a_blocks), np.eye(len(r))


def virtualize_detection(z: Detection, odom_kstar_to_k: Pose2) -> Detection:
    """Re-express a non-keyframe detection in the latest keyframe's frame."""
    if odom_kstar_to_k is None:
        raise ValueError("missing odometry link for virtualization")
    return replace(z, pose_in_vehicle=compose(odom_kstar_to_k, z.pose_in_vehicle))


def max_mixture_residual(candidates):
    """Best mixture component by negative-log Gaussian component score.

    Score is mahalanobis^2 - 2 ln(weight) - ln det(information); the
    smallest wins, ties to the lowest index.
    """
    if not candidates:
        raise ValueError("empty candidate list")
    best_idx, best_score = 0, None
    for i, (w, r, info) in enumerate(candidates):
        r = np.asarray(r, dtype=float)
        info = np.asarray(info, dtype=float)
        score = float(r @ info @ r) - 2.0 * math.log(w) \
            - math.log(np.linalg.det(info))
        if best_score is None or score < best_score - 1e-15:
            best_idx, best_score = i, score
    w, r, info = candidates[best_idx]
    return best_idx, np.asarray(r, dtype=float), np.asarray(info, dtype=float)


# ---------------------------------------------------------------------------
# Graph and solver


@dataclass
class LMParams:
    max_iterations: int = 100
    cost_tol: float = 1e-9
    step_tol: float = 1e-9
    lambda_init: float = 1e-6
    lambda_max: float = 1e10


class FactorGraph:
    def __init__(self):
        self.variables: dict = {}   # VariableId -> dim
        self.factors: list = []

    def add_variable(self, vid: VariableId):
        self.variables[vid] = vid.dim

    def add_factor(self, factor):
        for vid in factor.variables:
            if vid not in self.variables:
                raise KeyError(f"factor references unknown variable {vid}")
        self.factors.append(factor)

    def _ordering(self):
        order = sorted(self.variables)
        offsets = {}
        total = 0
        for vid in order:
            offsets[vid] = total
            total += vid.dim
        return order, offsets, total

    def _assemble(self, values, offsets, total):
        h = np.zeros((total, total))
        g = np.zeros(total)
        cost = 0.0
        for f in self.factors:
            r, jacs, info = f.linearize(values)
            cost += float(r @ info @ r)
            items = [(offsets[vid], j) for vid, j in jacs.items()]
            for oi, ji in items:
                wi = ji.T @ info
                g[oi:oi + ji.shape[1]] += wi @ r
                for oj, jj in items:
                    h[oi:oi + ji.shape[1], oj:oj + jj.shape[1]] += wi @ jj
        return h, g, cost

    def cost(self, values) -> float:
        return sum(float(np.asarray(r) @ info @ np.asarray(r))
                   for r, _, info in (f.linearize(values) for f in self.factors))

    def optimize(self, initial: Estimate, params: LMParams | None = None) -> Estimate:
        params = params or LMParams()
        for vid in self.variables:
            if vid not in initial.values:
                raise KeyError(f"variable {vid} has no initial value")
        order, offsets, total = self._ordering()
        values = {vid: np.array(initial.values[vid], dtype=float)
                  for vid in self.variables}
        lam = params.lambda_init
        h, g, cost = self._assemble(values, offsets, total)
        iterations = 0
        for _ in range(params.max_iterations):
            iterations += 1
            stepped = False
            while lam <= params.lambda_max:
                try:
                    delta = np.linalg.solve(h + lam * np.eye(total), -g)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                trial = {}
                for vid in order:
                    o = offsets[vid]
                    d = delta[o:o + vid.dim]
                    v = values[vid] + d
                    if vid.kind != OBJECT_VELOCITY:
                        v[2] = wrap_angle(v[2])
                    trial[vid] = v
                h_t, g_t, cost_t = self._assemble(trial, offsets, total)
                if cost_t <= cost + 1e-15:
                    improvement = cost - cost_t
                    values, h, g, cost = trial, h_t, g_t, cost_t
                    lam = max(lam / 3.0, 1e-12)
                    stepped = True
                    step_norm = float(np.linalg.norm(delta))
                    break
                lam *= 10.0
            if not stepped:
                if not np.all(np.isfinite(h)) or not np.all(np.isfinite(g)):
                    raise OptimizeFailure(
                        "non-finite normal equations",
                        {"cost": cost, "lambda": lam})
                break
            if improvement < params.cost_tol or step_norm < params.step_tol:
                break
        return Estimate(values, cost, iterations)

    # -- sliding window ----------------------------------------------------

    def slide_window(self, estimate: Estimate, horizon: int) -> "FactorGraph":
        """Marginalize vehicle-pose stamps older than the horizon.

        Every variable stamped before (newest keyframe stamp - horizon + 1)
        is removed; its effect folds into a linear Gaussian prior on its
        Markov blanket.
        """
        if horizon < 2:
            raise ValueError("horizon must cover at least two keyframes")
        stamps = [vid.stamp for vid in self.variables if vid.kind == VEHICLE_POSE]
        if not stamps:
            return self
        cutoff = max(stamps) - horizon + 1
        marg = sorted(v for v in self.variables if v.stamp < cutoff)
        if not marg:
            return self
        return self.marginalize(estimate, marg)

    def marginalize(self, estimate: Estimate, marg_vars) -> "FactorGraph":
        marg = set(marg_vars)
        touching = [f for f in self.factors if any(v in marg for v in f.variables)]
        touching_ids = {id(f) for f in touching}
        blanket = sorted({v for f in touching for v in f.variables} - marg)
        marg_order = sorted(marg)

        order = marg_order + blanket
        offsets = {}
        total = 0
        for vid in order:
            offsets[vid] = total
            total += vid.dim
        h = np.zeros((total, total))
        g = np.zeros(total)
        values = estimate.values
        for f in touching:
            r, jacs, info = f.linearize(values)
            items = [(offsets[vid], j) for vid, j in jacs.items()]
            for oi, ji in items:
                wi = ji.T @ info
                g[oi:oi + ji.shape[1]] += wi @ r
                for oj, jj in items:
                    h[oi:oi + ji.shape[1], oj:oj + jj.shape[1]] += wi @ jj
        nm = sum(v.dim for v in marg_order)
        hmm = h[:nm, :nm] + 1e-12 * np.eye(nm)
        hmb = h[:nm, nm:]
        hbb = h[nm:, nm:]
        gm, gb = g[:nm], g[nm:]
        sol = np.linalg.solve(hmm, np.hstack([hmb, gm[:, None]]))
        s = hbb - hmb.T @ sol[:, :-1]
        ghat = gb - hmb.T @ sol[:, -1]
        s = 0.5 * (s + s.T)
        w, v = np.linalg.eigh(s)
        keep = w > max(1e-10, 1e-12 * max(w.max(), 1.0))
        a = (np.sqrt(w[keep])[:, None] * v[:, keep].T)
        e0 = (v[:, keep].T @ ghat) / np.sqrt(w[keep])

        out = FactorGraph()
        for vid in self.variables:
            if vid not in marg:
                out.add_variable(vid)
        for f in self.factors:
            if id(f) not in touching_ids:
                out.factors.append(f)
        if blanket and a.size:
            a_blocks = {}
            col = 0
            for vid in blanket:
                a_blocks[vid] = a[:, col:col + vid.dim]
                col += vid.dim
            lin_point = {vid: np.array(values[vid], dtype=float) for vid in blanket}
            out.factors.append(LinearPriorFactor(tuple(blanket), lin_point,
                                                 a_blocks, e0))
        return out

    # -- debugging dump ----------------------------------------------------

    def dump(self, estimate: Estimate | None = None) -> str:
        lines = []
        for vid in sorted(self.variables):
            row = f"VAR {vid.kind} {vid.entity} {vid.stamp}"
            if estimate is not None and vid in estimate.values:
                row += " " + " ".join(f"{x:.9f}" for x in estimate.values[vid])
            lines.append(row)
        for f in self.factors:
            keys = " ".join(f"{v.kind}:{v.entity}:{v.stamp}" for v in f.variables)
            lines.append(f"FACTOR {f.kind} {keys}")
        return "\n".join(lines) + "\n"
