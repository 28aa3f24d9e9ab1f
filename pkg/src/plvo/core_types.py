"""Geometry and feature primitives.

Conventions: pixel origin at the top-left corner with u to the right and v
down; the camera frame has x right, y down and z forward. Stereo pairs are
rectified, so disparity is purely horizontal. Metric units are meters.

An ``SE3Pose`` used with :func:`project` maps world (or previous-frame)
coordinates into the camera frame: ``X_cam = R @ X + t``. Trajectories store
camera-to-world poses, so the camera position is the translation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateLine, NonPositiveDepth, NonPositiveDisparity

ORTHO_TOL = 1e-9
DEPTH_EPS = 1e-9


def _frozen(arr, shape=None):
    out = np.array(arr, dtype=float)
    if shape is not None and out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    out.flags.writeable = False
    return out


def skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w):
    """Rodrigues' formula for a rotation vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta**2 * K @ K)


def se3_exp(xi):
    """Rotation and translation of the twist ``(omega, rho)``, unvalidated."""
    xi = np.asarray(xi, dtype=float)
    w, rho = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    K = skew(w)
    KK = K @ K
    if theta < 1e-8:
        R = np.eye(3) + K + 0.5 * KK
        V = np.eye(3) + 0.5 * K + KK / 6.0
    else:
        R = np.eye(3) + np.sin(theta) / theta * K + (1.0 - np.cos(theta)) / theta**2 * KK
        V = (np.eye(3) + (1.0 - np.cos(theta)) / theta**2 * K
             + (theta - np.sin(theta)) / theta**3 * KK)
    return R, V @ rho


def so3_log(R):
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        B = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis = B[k] / axis[k]
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * vee


@dataclass(frozen=True)
class SE3Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(self.translation, (3,))
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "SE3Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def exp(cls, xi) -> "SE3Pose":
        """Exponential map of a twist ``(omega, rho)``."""
        return cls(*se3_exp(xi))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        return se3_compose(self, other)

    __matmul__ = compose

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform a 3-vector or an (n, 3) array of points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(so3_log(self.rotation)))


def se3_compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Return ``a ∘ b``: apply ``b`` first, then ``a``."""
    return SE3Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


@dataclass(frozen=True)
class CameraRig:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0 and self.baseline > 0):
            raise ValueError("fx, fy and baseline must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def in_image(self, uv) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return ((uv[:, 0] >= 0) & (uv[:, 0] < self.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] < self.height))


def default_camera() -> CameraRig:
    return CameraRig(fx=400.0, fy=400.0, cx=320.0, cy=240.0, baseline=0.5, width=640, height=480)


def project(camera: CameraRig, pose: SE3Pose, point3d) -> np.ndarray:
    X = pose.apply(np.asarray(point3d, dtype=float))
    if X[2] <= DEPTH_EPS:
        raise NonPositiveDepth(f"point depth {X[2]:.3g} is not positive")
    return np.array([camera.fx * X[0] / X[2] + camera.cx, camera.fy * X[1] / X[2] + camera.cy])


def project_many(camera: CameraRig, pose: SE3Pose, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection; returns (pixels, depths) without depth checks."""
    X = pose.apply(np.asarray(points, dtype=float).reshape(-1, 3))
    z = X[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([camera.fx * X[:, 0] / z + camera.cx, camera.fy * X[:, 1] / z + camera.cy], axis=1)
    return uv, z


def triangulate_from_disparity(camera: CameraRig, u: float, v: float, disparity: float) -> np.ndarray:
    if disparity <= DEPTH_EPS:
        raise NonPositiveDisparity(f"disparity {disparity:.3g} is not positive")
    Z = camera.fx * camera.baseline / disparity
    return backproject(camera, u, v, Z)


def backproject(camera: CameraRig, u: float, v: float, depth: float) -> np.ndarray:
    if depth <= DEPTH_EPS:
        raise NonPositiveDepth(f"depth {depth:.3g} is not positive")
    return np.array([(u - camera.cx) * depth / camera.fx, (v - camera.cy) * depth / camera.fy, depth])


def depth_to_disparity(camera: CameraRig, depth: float) -> float:
    if depth <= DEPTH_EPS:
        raise NonPositiveDepth(f"depth {depth:.3g} is not positive")
    return camera.fx * camera.baseline / depth


@dataclass(frozen=True)
class Keypoint:
    u: float
    v: float
    c: float
    descriptor: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.u) and np.isfinite(self.v)):
            raise ValueError("keypoint position must be finite")
        if not 0.0 <= self.c <= 1.0:
            raise ValueError(f"confidence {self.c} outside [0, 1]")
        d = np.array(self.descriptor, dtype=float).ravel()
        n = np.linalg.norm(d)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("descriptor must be finite and non-zero")
        if abs(n - 1.0) > 1e-15:
            d = d / n
        d.flags.writeable = False
        object.__setattr__(self, "descriptor", d)
        object.__setattr__(self, "u", float(self.u))
        object.__setattr__(self, "v", float(self.v))
        object.__setattr__(self, "c", float(self.c))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.u, self.v, self.c])


@dataclass(frozen=True)
class LineSegment:
    id: int
    a: np.ndarray
    b: np.ndarray
    lpoint_indices: tuple = ()

    def __post_init__(self):
        a = _frozen(self.a, (2,))
        b = _frozen(self.b, (2,))
        if np.array_equal(a, b):
            raise DegenerateLine(f"line {self.id} has coincident endpoints")
        if int(self.id) <= 0:
            raise ValueError("line ids must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "lpoint_indices", tuple(int(i) for i in self.lpoint_indices))

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.b - self.a))


def _opt_tuple(values, cast):
    return None if values is None else tuple(cast(x) for x in values)


@dataclass(frozen=True)
class FrameFeatures:
    """All features detected in one (left) image.

    ``*_depth`` hold per-feature metric depth when known; ``*_disparity`` hold
    stereo disparities for ingested frames. ``gt_*_ids`` carry world landmark
    identifiers for synthetic frames.
    """
    frame_id: int
    width: int
    height: int
    descriptor_dim: int
    ppoints: tuple = ()
    lines: tuple = ()
    lpoints: tuple = ()
    ppoint_depth: Optional[tuple] = None
    lpoint_depth: Optional[tuple] = None
    ppoint_disparity: Optional[tuple] = None
    lpoint_disparity: Optional[tuple] = None
    gt_point_ids: Optional[tuple] = None
    gt_lpoint_ids: Optional[tuple] = None
    gt_line_ids: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "ppoints", tuple(self.ppoints))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "lpoints", tuple(self.lpoints))
        for name in ("ppoint_depth", "lpoint_depth", "ppoint_disparity", "lpoint_disparity"):
            object.__setattr__(self, name, _opt_tuple(getattr(self, name), float))
        for name in ("gt_point_ids", "gt_lpoint_ids", "gt_line_ids"):
            object.__setattr__(self, name, _opt_tuple(getattr(self, name), int))
        self._validate()

    def _validate(self):
        D = self.descriptor_dim
        for kp in self.ppoints + self.lpoints:
            if kp.descriptor.shape[0] != D:
                raise ValueError(f"descriptor dimension {kp.descriptor.shape[0]} != {D}")
        nq = len(self.lpoints)
        ids = set()
        for line in self.lines:
            if line.id in ids:
                raise ValueError(f"duplicate line id {line.id}")
            ids.add(line.id)
            if any(i < 0 or i >= nq for i in line.lpoint_indices):
                raise ValueError(f"line {line.id} references a missing L-point")
        checks = (("ppoint_depth", len(self.ppoints)), ("lpoint_depth", nq),
                  ("ppoint_disparity", len(self.ppoints)), ("lpoint_disparity", nq),
                  ("gt_point_ids", len(self.ppoints)), ("gt_lpoint_ids", nq),
                  ("gt_line_ids", len(self.lines)))
        for name, n in checks:
            vals = getattr(self, name)
            if vals is not None and len(vals) != n:
                raise ValueError(f"{name} has {len(vals)} entries, expected {n}")
        for name in ("ppoint_depth", "lpoint_depth"):
            vals = getattr(self, name)
            if vals is not None and any(not (d > 0) for d in vals):
                raise ValueError(f"{name} must be positive")

    @cached_property
    def ppoint_positions(self) -> np.ndarray:
        return _positions(self.ppoints)

    @cached_property
    def lpoint_positions(self) -> np.ndarray:
        return _positions(self.lpoints)

    @cached_property
    def ppoint_descriptors(self) -> np.ndarray:
        return _descriptors(self.ppoints, self.descriptor_dim)

    @cached_property
    def lpoint_descriptors(self) -> np.ndarray:
        return _descriptors(self.lpoints, self.descriptor_dim)

    @cached_property
    def lpoint_line(self) -> np.ndarray:
        """Owning line id of every L-point (0 when orphaned)."""
        owner = np.zeros(len(self.lpoints), dtype=int)
        for line in self.lines:
            owner[list(line.lpoint_indices)] = line.id
        return owner

    def line_by_id(self, line_id: int) -> LineSegment:
        for line in self.lines:
            if line.id == line_id:
                return line
        raise KeyError(line_id)

    def keypoints(self, kind: str) -> tuple:
        return self.ppoints if kind == "point" else self.lpoints


def _positions(kps: Sequence[Keypoint]) -> np.ndarray:
    out = np.array([[k.u, k.v, k.c] for k in kps], dtype=float).reshape(-1, 3)
    out.flags.writeable = False
    return out


def _descriptors(kps: Sequence[Keypoint], D: int) -> np.ndarray:
    out = np.array([k.descriptor for k in kps], dtype=float).reshape(-1, D)
    out.flags.writeable = False
    return out
