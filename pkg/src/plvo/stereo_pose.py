"""Stereo lifting and robust frame-to-frame pose from 2D-3D point and line matches.

Poses estimated here map frame-i camera coordinates into frame i+1:
``X_{i+1} = R X_i + t``. Updates are left-multiplicative on the SE3 tangent,
``T <- exp(xi) T`` with ``xi = (omega, rho)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .core_types import (DEPTH_EPS, CameraRig, FrameFeatures, SE3Pose, backproject, se3_exp, skew,
                         triangulate_from_disparity)
from .errors import (DegenerateLine, InsufficientCorrespondences, NoConsensus, NonPositiveDepth,
                     SingularNormalEquations)

JACOBIAN_STEP = 1e-6
DAMPING = 1e-6
MAX_CONDITION = 1e10
MIN_SAMPLE = 4


@dataclass(frozen=True)
class Correspondence2D3D:
    """One 3D feature in frame i and its 2D observation in frame i+1.

    Points carry ``xyz`` of shape (3,) and ``obs`` of shape (2,). Lines carry
    two 3D endpoints ``xyz`` of shape (2, 3) and two observed pixels ``obs`` of
    shape (2, 2) spanning the observed infinite line.
    """
    kind: str
    xyz: np.ndarray
    obs: np.ndarray

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=float)
        obs = np.asarray(self.obs, dtype=float)
        if self.kind == "point":
            xyz, obs = xyz.reshape(3), obs.reshape(2)
            depths = xyz[2:3]
        elif self.kind == "line":
            xyz, obs = xyz.reshape(2, 3), obs.reshape(2, 2)
            depths = xyz[:, 2]
            if np.linalg.norm(obs[1] - obs[0]) < 1e-12:
                raise DegenerateLine("observed line endpoints coincide")
        else:
            raise ValueError(f"kind must be 'point' or 'line', not {self.kind!r}")
        if np.any(depths <= DEPTH_EPS):
            raise NonPositiveDepth("3D geometry must lie in front of the camera")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "obs", obs)


@dataclass
class PoseEstimate:
    pose: SE3Pose
    inliers: tuple
    residual_rms: float
    iterations: int = 0
    converged: bool = True


@dataclass
class LiftedFrame:
    """Frame-local 3D geometry; rows without depth are NaN and flagged."""
    point_xyz: np.ndarray
    point_ok: np.ndarray
    lpoint_xyz: np.ndarray
    lpoint_ok: np.ndarray
    line_endpoints: dict = field(default_factory=dict)  # line id -> (2, 3)
    skipped: int = 0


# -- lifting --------------------------------------------------------------------

def _lift(camera, positions, depth, disparity):
    n = len(positions)
    out = np.full((n, 3), np.nan)
    ok = np.zeros(n, dtype=bool)
    for k in range(n):
        u, v = positions[k, 0], positions[k, 1]
        if depth is not None:
            out[k] = backproject(camera, u, v, depth[k])
        elif disparity is not None:
            out[k] = triangulate_from_disparity(camera, u, v, disparity[k])
        else:
            continue
        ok[k] = True
    return out, ok


def lift_frame(frame: FrameFeatures, camera: CameraRig) -> LiftedFrame:
    """3D positions of every feature from per-feature depth or disparity.

    Lines are lifted through their two extreme L-points. Features with no
    depth source are skipped and counted.
    """
    pts, p_ok = _lift(camera, frame.ppoint_positions, frame.ppoint_depth, frame.ppoint_disparity)
    lpts, q_ok = _lift(camera, frame.lpoint_positions, frame.lpoint_depth, frame.lpoint_disparity)
    ends = {}
    skipped = int((~p_ok).sum())
    for line in frame.lines:
        i, j = line.lpoint_indices[0], line.lpoint_indices[-1]
        if q_ok[i] and q_ok[j] and np.linalg.norm(lpts[i] - lpts[j]) > 1e-9:
            ends[line.id] = np.stack([lpts[i], lpts[j]])
        else:
            skipped += 1
    return LiftedFrame(pts, p_ok, lpts, q_ok, ends, skipped)


# -- residuals ------------------------------------------------------------------

class _Packed:
    """Correspondences gathered into arrays for vectorized residuals."""

    def __init__(self, corrs: Sequence[Correspondence2D3D]):
        self.n = len(corrs)
        self.p_idx = np.array([k for k, c in enumerate(corrs) if c.kind == "point"], dtype=int)
        self.l_idx = np.array([k for k, c in enumerate(corrs) if c.kind == "line"], dtype=int)
        self.p_xyz = np.array([corrs[k].xyz for k in self.p_idx]).reshape(-1, 3)
        self.p_obs = np.array([corrs[k].obs for k in self.p_idx]).reshape(-1, 2)
        self.l_xyz = np.array([corrs[k].xyz for k in self.l_idx]).reshape(-1, 3)
        obs = np.array([corrs[k].obs for k in self.l_idx]).reshape(-1, 2, 2)
        d = obs[:, 1] - obs[:, 0]
        normal = np.stack([-d[:, 1], d[:, 0]], axis=1)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        # unit normal and offset of each observed line, repeated per endpoint
        self.l_normal = np.repeat(normal, 2, axis=0)
        self.l_offset = np.repeat(-(normal * obs[:, 0]).sum(axis=1), 2)

    def subset(self, corrs, idx):
        return _Packed([corrs[k] for k in idx])


def _project_rows(camera, R, t, X):
    Y = X @ R.T + t
    z = Y[:, 2]
    safe = np.where(z > DEPTH_EPS, z, 1.0)
    uv = np.stack([camera.fx * Y[:, 0] / safe + camera.cx, camera.fy * Y[:, 1] / safe + camera.cy],
                  axis=1)
    return uv, z


def _residual_matrix(R, t, packed: _Packed, camera, strict=True):
    """(n, 2) residuals; rows behind the camera raise or become inf."""
    out = np.zeros((packed.n, 2))
    if len(packed.p_idx):
        uv, z = _project_rows(camera, R, t, packed.p_xyz)
        res = packed.p_obs - uv
        bad = z <= DEPTH_EPS
        if bad.any():
            if strict:
                raise NonPositiveDepth("a 3D point projects behind the camera")
            res[bad] = np.inf
        out[packed.p_idx] = res
    if len(packed.l_idx):
        uv, z = _project_rows(camera, R, t, packed.l_xyz)
        dist = (packed.l_normal * uv).sum(axis=1) + packed.l_offset
        bad = z <= DEPTH_EPS
        if bad.any():
            if strict:
                raise NonPositiveDepth("a line endpoint projects behind the camera")
            dist[bad] = np.inf
        out[packed.l_idx] = dist.reshape(-1, 2)
    return out


def pose_residuals(pose: SE3Pose, correspondences, camera: CameraRig) -> np.ndarray:
    """Stacked residual vector, two components per correspondence.

    Points give ``observed - projected`` pixels; lines give the signed
    perpendicular distances of both projected endpoints to the observed line.
    """
    packed = correspondences if isinstance(correspondences, _Packed) else _Packed(correspondences)
    return _residual_matrix(pose.rotation, pose.translation, packed, camera).ravel()


def point_jacobian(pose: SE3Pose, xyz, camera: CameraRig) -> np.ndarray:
    """Analytic 2x6 Jacobian of a point residual w.r.t. a left tangent update."""
    Y = pose.rotation @ np.asarray(xyz, dtype=float) + pose.translation
    X, Yc, Z = Y
    if Z <= DEPTH_EPS:
        raise NonPositiveDepth("point is behind the camera")
    dproj = np.array([[camera.fx / Z, 0.0, -camera.fx * X / Z**2],
                      [0.0, camera.fy / Z, -camera.fy * Yc / Z**2]])
    dY = np.hstack([-skew(Y), np.eye(3)])
    return -dproj @ dY


def _perturbed(R, t, xi):
    dR, dt = se3_exp(xi)
    return dR @ R, dR @ t + dt


def numerical_jacobian(pose: SE3Pose, correspondences, camera: CameraRig,
                       h: float = JACOBIAN_STEP) -> np.ndarray:
    packed = correspondences if isinstance(correspondences, _Packed) else _Packed(correspondences)
    return _jacobian(pose.rotation, pose.translation, packed, camera, h)


def _residual_batch(Rs, ts, packed: _Packed, camera):
    """Residuals for a stack of poses, shape (k, n, 2); rows behind the camera are inf."""
    out = np.zeros((len(Rs), packed.n, 2))
    for idx, X in ((packed.p_idx, packed.p_xyz), (packed.l_idx, packed.l_xyz)):
        if not len(idx):
            continue
        Y = np.einsum("kij,nj->kni", Rs, X) + ts[:, None, :]
        z = Y[..., 2]
        safe = np.where(z > DEPTH_EPS, z, 1.0)
        u = camera.fx * Y[..., 0] / safe + camera.cx
        v = camera.fy * Y[..., 1] / safe + camera.cy
        if idx is packed.p_idx:
            res = np.stack([packed.p_obs[:, 0] - u, packed.p_obs[:, 1] - v], axis=-1)
            res[z <= DEPTH_EPS] = np.inf
            out[:, idx] = res
        else:
            dist = packed.l_normal[:, 0] * u + packed.l_normal[:, 1] * v + packed.l_offset
            dist[z <= DEPTH_EPS] = np.inf
            out[:, idx] = dist.reshape(len(Rs), -1, 2)
    return out


@lru_cache(maxsize=8)
def _step_exps(h):
    """exp(+-h e_k) for the six tangent axes, stacked as (12, 3, 3) and (12, 3)."""
    dRs, dts = zip(*(se3_exp(e) for e in np.vstack([h * np.eye(6), -h * np.eye(6)])))
    return np.array(dRs), np.array(dts)


def _jacobian(R, t, packed, camera, h=JACOBIAN_STEP):
    """Central differences over the six tangent directions, evaluated in one batch."""
    dRs, dts = _step_exps(float(h))
    Rs = dRs @ R
    ts = dRs @ t + dts
    res = _residual_batch(Rs, ts, packed, camera).reshape(12, -1)
    return ((res[:6] - res[6:]) / (2 * h)).T


# -- robust Gauss-Newton --------------------------------------------------------

def huber_cost(norms, delta: float) -> float:
    norms = np.asarray(norms, dtype=float)
    quad = norms <= delta
    return float(np.sum(np.where(quad, 0.5 * norms**2, delta * (norms - 0.5 * delta))))


def _huber_weights(norms, delta):
    return np.where(norms <= delta, 1.0, delta / np.maximum(norms, 1e-300))


def _solve_normal(H, g):
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        H = H + DAMPING * np.eye(6)
        cond = np.linalg.cond(H)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise SingularNormalEquations(f"normal equations are singular (condition {cond:.3g})")
    return np.linalg.solve(H, g)


def estimate_pose_gn(correspondences, camera: CameraRig, init: Optional[SE3Pose] = None,
                     huber_delta: float = 2.0, max_iters: int = 20, tol: float = 1e-10,
                     cost_log: Optional[list] = None) -> PoseEstimate:
    """Huber-robust Gauss-Newton over the pose, starting from ``init``.

    Each accepted step does not increase the robust cost; a step that would is
    halved until it does not, or the solve stops. ``cost_log`` (if given)
    receives the cost after every accepted iteration.
    """
    packed = correspondences if isinstance(correspondences, _Packed) else _Packed(correspondences)
    if packed.n < 3:
        raise InsufficientCorrespondences(f"need at least 3 correspondences, got {packed.n}")
    init = init or SE3Pose.identity()
    R, t = init.rotation.copy(), init.translation.copy()
    res = _residual_matrix(R, t, packed, camera)
    norms = np.linalg.norm(res, axis=1)
    cost = huber_cost(norms, huber_delta)
    if cost_log is not None:
        cost_log.append(cost)
    converged, it = False, 0
    for it in range(1, max_iters + 1):
        w = np.repeat(_huber_weights(norms, huber_delta), 2)
        J = _jacobian(R, t, packed, camera)
        r = res.ravel()
        H = J.T @ (w[:, None] * J)
        g = -J.T @ (w * r)
        dx = _solve_normal(H, g)
        if np.linalg.norm(dx) < tol:
            converged = True
            break
        step = 1.0
        while True:
            R_new, t_new = _perturbed(R, t, step * dx)
            res_new = _residual_matrix(R_new, t_new, packed, camera, strict=False)
            norms_new = np.linalg.norm(res_new, axis=1)
            cost_new = huber_cost(norms_new, huber_delta) if np.all(np.isfinite(norms_new)) else np.inf
            if cost_new <= cost:
                break
            step *= 0.5
            if step < 1e-6:
                cost_new = None
                break
        if cost_new is None:
            converged = True  # no descent along the GN direction
            break
        R, t, res, norms, cost = R_new, t_new, res_new, norms_new, cost_new
        if cost_log is not None:
            cost_log.append(cost)
        if np.linalg.norm(step * dx) < tol:
            converged = True
            break
    # re-orthonormalize accumulated rounding before validation
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    pose = SE3Pose(R, t)
    rms = float(np.sqrt(np.mean(norms**2))) if packed.n else 0.0
    return PoseEstimate(pose, tuple(range(packed.n)), rms, it, converged)


# -- RANSAC ---------------------------------------------------------------------

def _needed_iterations(inlier_ratio, confidence, sample_size):
    if inlier_ratio >= 1.0:
        return 1
    if inlier_ratio <= 0.0:
        return math.inf
    denom = math.log(max(1.0 - inlier_ratio**sample_size, 1e-300))
    return math.ceil(math.log(1.0 - confidence) / denom) if denom < 0 else math.inf


def ransac_pose(correspondences, camera: CameraRig, iterations: int = 200,
                inlier_threshold_px: float = 3.0, seed: int = 0,
                init: Optional[SE3Pose] = None, huber_delta: float = 2.0,
                confidence: float = 0.999) -> PoseEstimate:
    """Consensus pose from minimal 4-correspondence fits, refit on the inliers.

    Hypotheses are ranked by (inlier count, inlier rms, hypothesis index).
    Sampling stops early once ``confidence`` that an all-inlier sample has
    been drawn is reached.
    """
    corrs = list(correspondences)
    n = len(corrs)
    if n < MIN_SAMPLE:
        raise InsufficientCorrespondences(f"need at least {MIN_SAMPLE} correspondences, got {n}")
    packed = _Packed(corrs)
    rng = np.random.default_rng(seed)
    init = init or SE3Pose.identity()
    best = None  # (-count, rms, index, pose, mask)
    needed = iterations
    for h in range(iterations):
        if h >= needed:
            break
        sample = rng.choice(n, MIN_SAMPLE, replace=False)
        try:
            est = estimate_pose_gn(packed.subset(corrs, sample), camera, init, huber_delta, max_iters=10)
        except (SingularNormalEquations, NonPositiveDepth):
            continue
        norms = np.linalg.norm(_residual_matrix(est.pose.rotation, est.pose.translation, packed,
                                                camera, strict=False), axis=1)
        mask = norms < inlier_threshold_px
        count = int(mask.sum())
        rms = float(np.sqrt(np.mean(norms[mask] ** 2))) if count else math.inf
        key = (-count, rms, h)
        if best is None or key < best[:3]:
            best = (*key, est.pose, mask)
            needed = min(iterations, _needed_iterations(count / n, confidence, MIN_SAMPLE))
    if best is None or -best[0] < MIN_SAMPLE:
        raise NoConsensus(f"best hypothesis has {0 if best is None else -best[0]} inliers")
    pose, mask = best[3], best[4]
    for _ in range(3):
        idx = np.flatnonzero(mask)
        est = estimate_pose_gn(packed.subset(corrs, idx), camera, pose, huber_delta)
        pose = est.pose
        norms = np.linalg.norm(_residual_matrix(pose.rotation, pose.translation, packed, camera,
                                                strict=False), axis=1)
        new_mask = norms < inlier_threshold_px
        if np.array_equal(new_mask, mask) or new_mask.sum() < MIN_SAMPLE:
            break
        mask = new_mask
    idx = np.flatnonzero(mask)
    rms = float(np.sqrt(np.mean(norms[idx] ** 2)))
    return PoseEstimate(pose, tuple(int(i) for i in idx), rms, est.iterations, est.converged)
