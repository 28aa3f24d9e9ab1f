"""Synthetic ground-truth worlds of point and line landmarks.

Frames are rendered by projecting landmarks through a pinhole camera and
applying a degradation profile (dropout, pixel noise, descriptor noise).
Each line landmark carries a fixed set of 3-D samples with their own latent
descriptors; those samples become the frame's L-points, which is what gives
L-points stable identities across frames.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .core_types import (CameraRig, FrameFeatures, Keypoint, LineSegment, SE3Pose,
                         default_camera, project_many, so3_exp)
from .errors import MissingLabels
from .line_matcher import sample_line_points
from .ot_matcher import MatchLabels

NEAR_PLANE = 0.5
LINE_SAMPLE_SPACING = 0.4  # meters between 3-D line samples
LINE_MIN_SAMPLES = 5
LPOINT_ID_STRIDE = 10_000


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass(frozen=True)
class DegradationProfile:
    name: str
    point_dropout: float = 0.0
    line_dropout: float = 0.0
    descriptor_noise_sigma: float = 0.0
    pixel_noise_sigma: float = 0.0
    confidence_scale: float = 1.0

    def __post_init__(self):
        for p in (self.point_dropout, self.line_dropout):
            if not 0.0 <= p <= 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1]")
        if self.descriptor_noise_sigma < 0 or self.pixel_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 < self.confidence_scale <= 1.0:
            raise ValueError("confidence_scale must lie in (0, 1]")


def builtin_profiles() -> dict:
    return {
        "daytime": DegradationProfile("daytime", 0.05, 0.05, 0.05, 0.3, 1.0),
        "fog": DegradationProfile("fog", 0.45, 0.10, 0.20, 0.5, 0.7),
        "nighttime": DegradationProfile("nighttime", 0.55, 0.10, 0.25, 0.6, 0.5),
    }


def noise_free_profile() -> DegradationProfile:
    return DegradationProfile("noise-free")


def get_profile(name: str) -> DegradationProfile:
    if name in ("noise-free", "noise_free", "clean"):
        return noise_free_profile()
    try:
        return builtin_profiles()[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}") from None


@dataclass
class World:
    point_ids: np.ndarray          # (n,)
    point_xyz: np.ndarray          # (n, 3)
    point_desc: np.ndarray         # (n, D)
    line_ids: np.ndarray           # (m,)
    line_ends: np.ndarray          # (m, 2, 3)
    line_samples: list             # per line: (k_i, 3)
    line_sample_desc: list         # per line: (k_i, D)
    line_sample_ids: list          # per line: (k_i,)
    bounds: tuple                  # (lo (3,), hi (3,))
    descriptor_dim: int = 32

    @property
    def n_points(self):
        return len(self.point_ids)

    @property
    def n_lines(self):
        return len(self.line_ids)


@dataclass(frozen=True)
class WorldConfig:
    """Keys of the world config file (JSON)."""
    n_points: int = 300
    n_lines: int = 40
    bounds_lo: tuple = (-20.0, -6.0, 2.0)
    bounds_hi: tuple = (20.0, 1.5, 60.0)
    descriptor_dim: int = 32
    repeat_copies: int = 0
    repeat_offset: tuple = (3.0, 0.0, 0.0)
    line_length: tuple = (2.0, 6.0)

    def as_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in known.items()})


def generate_world(seed: int, n_points: int, n_lines: int, bounds=None, descriptor_dim: int = 32,
                   repeat_copies: int = 0, repeat_offset=(3.0, 0.0, 0.0),
                   line_length=(2.0, 6.0)) -> World:
    """Uniformly scattered landmarks inside an axis-aligned box.

    With ``repeat_copies > 1`` the ``n_lines`` random lines form a motif that is
    repeated at multiples of ``repeat_offset``; copies share byte-identical
    latent descriptors so only position tells them apart.
    """
    if n_points < 0 or n_lines < 0:
        raise ValueError("landmark counts must be non-negative")
    if bounds is None:
        bounds = (WorldConfig.bounds_lo, WorldConfig.bounds_hi)
    lo = np.asarray(bounds[0], dtype=float)
    hi = np.asarray(bounds[1], dtype=float)
    rng = np.random.default_rng(seed)
    D = descriptor_dim

    point_xyz = lo + (hi - lo) * rng.random((n_points, 3))
    point_desc = _unit_rows(rng.normal(size=(n_points, D))) if n_points else np.zeros((0, D))
    point_ids = np.arange(1, n_points + 1)

    copies = max(1, int(repeat_copies))
    offset = np.asarray(repeat_offset, dtype=float)
    motif_hi = hi - (copies - 1) * np.maximum(offset, 0.0)
    motif_lo = lo - (copies - 1) * np.minimum(offset, 0.0)
    if n_lines and np.any(motif_hi <= motif_lo):
        raise ValueError("repeat offset does not fit inside the bounds")

    ends, samples, sdesc = [], [], []
    for _ in range(n_lines):
        a = motif_lo + (motif_hi - motif_lo) * rng.random(3)
        direction = _unit_rows(rng.normal(size=(1, 3)))[0]
        length = rng.uniform(*line_length)
        b = np.clip(a + length * direction, motif_lo, motif_hi)
        if np.linalg.norm(b - a) < 0.5:
            b = np.clip(a - length * direction, motif_lo, motif_hi)
        s = sample_line_points(a, b, LINE_SAMPLE_SPACING, LINE_MIN_SAMPLES)
        ends.append(np.stack([a, b]))
        samples.append(s)
        sdesc.append(_unit_rows(rng.normal(size=(len(s), D))))

    line_ends, line_samples, line_sample_desc = [], [], []
    for c in range(copies):
        shift = c * offset
        for e, s, d in zip(ends, samples, sdesc):
            line_ends.append(e + shift)
            line_samples.append(s + shift)
            line_sample_desc.append(d)
    m = len(line_ends)
    line_ids = np.arange(1, m + 1)
    line_sample_ids = [lid * LPOINT_ID_STRIDE + np.arange(len(s)) for lid, s in zip(line_ids, line_samples)]
    return World(point_ids, point_xyz, point_desc, line_ids,
                 np.array(line_ends).reshape(m, 2, 3), line_samples, line_sample_desc,
                 line_sample_ids, (lo, hi), D)


def repetitive_world_config(copies: int = 4, spacing: float = 3.5) -> WorldConfig:
    """Small scene whose line motif repeats ``copies`` times along x."""
    return WorldConfig(n_points=40, n_lines=4, bounds_lo=(-8.0, -4.0, 12.0),
                       bounds_hi=(8.0, 1.5, 22.0), repeat_copies=copies,
                       repeat_offset=(spacing, 0.0, 0.0))


def world_from_config(cfg: WorldConfig, seed: int) -> World:
    return generate_world(seed, cfg.n_points, cfg.n_lines, (cfg.bounds_lo, cfg.bounds_hi),
                          cfg.descriptor_dim, cfg.repeat_copies, cfg.repeat_offset, cfg.line_length)


# -- trajectories ---------------------------------------------------------------

def _heading_pose(position, yaw) -> SE3Pose:
    """Camera-to-world pose at ``position`` looking along +z rotated by ``yaw`` about y."""
    return SE3Pose(so3_exp([0.0, yaw, 0.0]), position)


def make_trajectory(kind: str, n_frames: int, speed: float = 1.0, radius: float = 40.0,
                    stops=()) -> list:
    """Camera-to-world poses along a parametric path.

    ``stops`` lists half-open frame ranges ``(start, end)`` during which the
    camera stands still.
    """
    stopped = np.zeros(n_frames, dtype=bool)
    for s, e in stops:
        stopped[s:e] = True
    dist = np.concatenate([[0.0], np.cumsum(np.where(stopped[1:], 0.0, speed))])[:n_frames]
    poses = []
    for s in dist:
        if kind == "straight":
            poses.append(_heading_pose([0.0, 0.0, s], 0.0))
        elif kind == "arc":
            ang = s / radius
            pos = [radius * (1.0 - np.cos(ang)), 0.0, radius * np.sin(ang)]
            poses.append(_heading_pose(pos, ang))
        elif kind in ("figure8", "figure-eight"):
            # Gerono lemniscate parametrised by arc length approximately
            t = s / radius
            x = radius * np.sin(t) * np.cos(t)
            z = radius * np.sin(t)
            dx = radius * np.cos(2 * t)
            dz = radius * np.cos(t)
            poses.append(_heading_pose([x, 0.0, z], np.arctan2(dx, dz)))
        else:
            raise ValueError(f"unknown trajectory kind {kind!r}")
    return poses


# -- rendering ------------------------------------------------------------------

def _visible(camera: CameraRig, uv, z):
    return (z > NEAR_PLANE) & camera.in_image(uv) if len(z) else np.zeros(0, dtype=bool)


def visible_point_mask(world: World, pose: SE3Pose, camera: CameraRig) -> np.ndarray:
    uv, z = project_many(camera, pose.inverse(), world.point_xyz)
    return _visible(camera, uv, z)


def _noisy_descriptors(latent, sigma, rng):
    if sigma > 0 and len(latent):
        return _unit_rows(latent + rng.normal(0.0, sigma, latent.shape))
    return latent


def _confidence(z, scale):
    return scale * np.exp(-np.asarray(z) / 100.0)


def _depth_from_noisy_disparity(camera, z, sigma, rng):
    """Depth re-derived from a stereo disparity corrupted by pixel noise."""
    if sigma <= 0:
        return z, np.ones(len(z), dtype=bool)
    disp = camera.fx * camera.baseline / z + rng.normal(0.0, sigma, len(z))
    ok = disp > 0.5
    depth = np.where(ok, camera.fx * camera.baseline / np.where(ok, disp, 1.0), np.nan)
    return depth, ok


def _jitter_pixels(camera, uv, sigma, rng):
    if sigma <= 0:
        return uv
    out = uv + rng.normal(0.0, sigma, uv.shape)
    out[:, 0] = np.clip(out[:, 0], 0.0, np.nextafter(camera.width, 0))
    out[:, 1] = np.clip(out[:, 1], 0.0, np.nextafter(camera.height, 0))
    return out


def render_frame(world: World, pose: SE3Pose, camera: CameraRig, profile: DegradationProfile,
                 seed: int, frame_id: int = 0, shuffle: bool = True) -> FrameFeatures:
    """Detect the world's landmarks from camera-to-world ``pose``."""
    rng = np.random.default_rng(seed)
    T_cw = pose.inverse()
    D = world.descriptor_dim

    uv, z = project_many(camera, T_cw, world.point_xyz)
    vis = np.flatnonzero(_visible(camera, uv, z))
    keep = rng.random(len(vis)) >= profile.point_dropout
    idx = vis[keep]
    if shuffle:
        idx = idx[rng.permutation(len(idx))]
    p_uv = _jitter_pixels(camera, uv[idx], profile.pixel_noise_sigma, rng)
    p_desc = _noisy_descriptors(world.point_desc[idx], profile.descriptor_noise_sigma, rng)
    p_depth, ok = _depth_from_noisy_disparity(camera, z[idx], profile.pixel_noise_sigma, rng)
    p_conf = _confidence(z[idx], profile.confidence_scale)
    ppoints, pdepth, pids = [], [], []
    for k in np.flatnonzero(ok):
        ppoints.append(Keypoint(p_uv[k, 0], p_uv[k, 1], p_conf[k], p_desc[k]))
        pdepth.append(p_depth[k])
        pids.append(world.point_ids[idx[k]])

    lines, lpoints, ldepth, lids, line_gt = [], [], [], [], []
    line_drop = rng.random(world.n_lines) < profile.line_dropout
    for li in range(world.n_lines):
        s_uv, s_z = project_many(camera, T_cw, world.line_samples[li])
        svis = np.flatnonzero(_visible(camera, s_uv, s_z))
        if line_drop[li] or len(svis) < 2:
            continue
        q_uv = _jitter_pixels(camera, s_uv[svis], profile.pixel_noise_sigma, rng)
        q_desc = _noisy_descriptors(world.line_sample_desc[li][svis], profile.descriptor_noise_sigma, rng)
        q_depth, ok = _depth_from_noisy_disparity(camera, s_z[svis], profile.pixel_noise_sigma, rng)
        q_conf = _confidence(s_z[svis], profile.confidence_scale)
        good = np.flatnonzero(ok)
        if len(good) < 2 or np.array_equal(q_uv[good[0]], q_uv[good[-1]]):
            continue
        start = len(lpoints)
        for k in good:
            lpoints.append(Keypoint(q_uv[k, 0], q_uv[k, 1], q_conf[k], q_desc[k]))
            ldepth.append(q_depth[k])
            lids.append(world.line_sample_ids[li][svis[k]])
        lines.append(LineSegment(len(lines) + 1, q_uv[good[0]], q_uv[good[-1]],
                                 tuple(range(start, len(lpoints)))))
        line_gt.append(world.line_ids[li])

    return FrameFeatures(frame_id, camera.width, camera.height, D, ppoints, lines, lpoints,
                         ppoint_depth=pdepth, lpoint_depth=ldepth,
                         gt_point_ids=pids, gt_lpoint_ids=lids, gt_line_ids=line_gt)


# -- ground truth ---------------------------------------------------------------

@dataclass(frozen=True)
class GroundTruth:
    points: MatchLabels
    lpoints: MatchLabels
    lines: MatchLabels   # pairs hold line ids, unmatched hold line ids

    def for_kind(self, kind: str) -> MatchLabels:
        return self.points if kind == "point" else self.lpoints


def _join(ids_a, ids_b):
    where_b = {lid: j for j, lid in enumerate(ids_b)}
    pairs = tuple((i, where_b[lid]) for i, lid in enumerate(ids_a) if lid in where_b)
    in_a = {i for i, _ in pairs}
    in_b = {j for _, j in pairs}
    return MatchLabels(pairs, tuple(i for i in range(len(ids_a)) if i not in in_a),
                       tuple(j for j in range(len(ids_b)) if j not in in_b))


def ground_truth_matches(frame_a: FrameFeatures, frame_b: FrameFeatures) -> GroundTruth:
    for f in (frame_a, frame_b):
        if f.gt_point_ids is None or f.gt_lpoint_ids is None or f.gt_line_ids is None:
            raise MissingLabels(f"frame {f.frame_id} carries no landmark labels")
    pts = _join(frame_a.gt_point_ids, frame_b.gt_point_ids)
    lpts = _join(frame_a.gt_lpoint_ids, frame_b.gt_lpoint_ids)
    by_idx = _join(frame_a.gt_line_ids, frame_b.gt_line_ids)
    ida = [l.id for l in frame_a.lines]
    idb = [l.id for l in frame_b.lines]
    lines = MatchLabels(tuple((ida[i], idb[j]) for i, j in by_idx.pairs),
                        tuple(ida[i] for i in by_idx.unmatched_a),
                        tuple(idb[j] for j in by_idx.unmatched_b))
    return GroundTruth(pts, lpts, lines)


# -- frame pairs for training and tests --------------------------------------------

def random_motion(rng, max_translation=0.8, max_rotation_deg=4.0) -> SE3Pose:
    """Small forward-biased camera motion expressed in the camera frame."""
    t = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1), rng.uniform(0.0, 1.0)])
    t *= max_translation
    w = np.deg2rad(max_rotation_deg) * rng.uniform(-1.0, 1.0, 3) * np.array([0.3, 1.0, 0.3])
    return SE3Pose(so3_exp(w), t)


def sample_pair(rng, world: World, camera: CameraRig, profile: DegradationProfile,
                start: Optional[SE3Pose] = None, motion: Optional[SE3Pose] = None):
    """Render two frames of ``world`` from nearby poses.

    Returns ``(frame_a, frame_b, pose_a, pose_b)`` with camera-to-world poses.
    """
    if start is None:
        lo, hi = world.bounds
        z0 = lo[2] - 2.0 + rng.uniform(0.0, 0.3) * (hi[2] - lo[2])
        start = SE3Pose(so3_exp([0.0, rng.uniform(-0.15, 0.15), 0.0]),
                        [rng.uniform(-2.0, 2.0), rng.uniform(-0.5, 0.5), z0])
    if motion is None:
        motion = random_motion(rng)
    pose_b = start.compose(motion)
    seeds = rng.integers(0, 2**31, 2)
    fa = render_frame(world, start, camera, profile, int(seeds[0]), 0)
    fb = render_frame(world, pose_b, camera, profile, int(seeds[1]), 1)
    return fa, fb, start, pose_b
