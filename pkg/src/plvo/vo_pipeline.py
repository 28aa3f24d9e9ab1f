"""Frame-to-frame stereo odometry over a feature sequence, plus trajectory metrics."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core_types import CameraRig, FrameFeatures, SE3Pose
from .encoder_gnn import EncoderWeights
from .errors import (DegenerateGeometry, EmptySequence, LengthMismatch, NoConsensus, PlvoError)
from .feature_codec import MaskImage, apply_mask
from .matching import FrameMatches, MatchParams, match_frames
from .stereo_pose import Correspondence2D3D, LiftedFrame, lift_frame, ransac_pose

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    """Camera-to-world poses keyed by strictly increasing frame ids."""
    frame_ids: list
    poses: list

    def __post_init__(self):
        if len(self.frame_ids) != len(self.poses):
            raise LengthMismatch("frame ids and poses differ in length")
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise ValueError("frame ids must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.frame_ids, self.poses))

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def anchored(self) -> "Trajectory":
        """Re-expressed so the first pose is the identity."""
        if not self.poses:
            return self
        inv0 = self.poses[0].inverse()
        return Trajectory(list(self.frame_ids), [inv0 @ p for p in self.poses])

    @classmethod
    def from_rows(cls, rows) -> "Trajectory":
        rows = list(rows)
        return cls([f for f, _ in rows], [p for _, p in rows])


@dataclass(frozen=True)
class TrackConfig:
    match: MatchParams = MatchParams()
    ransac_iterations: int = 200
    inlier_threshold_px: float = 3.0
    huber_delta: float = 2.0
    stationary_px: float = 0.3
    use_points: bool = True
    use_lines: bool = True
    use_position: bool = True
    seed: int = 0


@dataclass
class PairLog:
    frame_a: int
    frame_b: int
    point_detections: int = 0
    point_matches: int = 0
    line_detections: int = 0
    line_matches: int = 0
    correspondences: int = 0
    inliers: int = 0
    residual_rms: float = float("nan")
    stationary: bool = False
    fallback: bool = False
    error: str = ""
    relative: Optional[SE3Pose] = field(default=None, repr=False)

    CSV_HEADER = ["frame_a", "frame_b", "point_detections", "point_matches", "line_detections",
                  "line_matches", "correspondences", "inliers", "residual_rms", "stationary",
                  "fallback", "error"]

    def row(self):
        return [self.frame_a, self.frame_b, self.point_detections, self.point_matches,
                self.line_detections, self.line_matches, self.correspondences, self.inliers,
                float(self.residual_rms), int(self.stationary), int(self.fallback), self.error]


@dataclass
class MatchStats:
    point_detections: int
    point_matches: int
    point_match_pct: float
    line_detections: int
    line_matches: int
    line_match_pct: float
    empty_points: bool = False
    empty_lines: bool = False

    CSV_HEADER = ["point_detections", "point_matches", "point_match_pct",
                  "line_detections", "line_matches", "line_match_pct"]

    def row(self):
        return [self.point_detections, self.point_matches, self.point_match_pct,
                self.line_detections, self.line_matches, self.line_match_pct]


@dataclass
class TrackResult:
    trajectory: Trajectory
    stats: MatchStats
    logs: list


def _pct(matches, detections):
    return (100.0 * matches / detections, False) if detections else (0.0, True)


def match_stats(logs: Sequence[PairLog]) -> MatchStats:
    """Totals and percentages over logged pairs; zero detections give 0 and a flag."""
    pd = sum(l.point_detections for l in logs)
    pm = sum(l.point_matches for l in logs)
    ld = sum(l.line_detections for l in logs)
    lm = sum(l.line_matches for l in logs)
    pp, pe = _pct(pm, pd)
    lp, le = _pct(lm, ld)
    return MatchStats(pd, pm, pp, ld, lm, lp, pe, le)


def build_correspondences(lifted: LiftedFrame, frame_b: FrameFeatures, matches: FrameMatches,
                          use_points: bool = True, use_lines: bool = True) -> list:
    """2D-3D correspondences from frame-a geometry to frame-b observations."""
    out = []
    if use_points:
        pos_b = frame_b.ppoint_positions
        for i, j, _ in matches.points.pairs:
            if lifted.point_ok[i]:
                out.append(Correspondence2D3D("point", lifted.point_xyz[i], pos_b[j, :2]))
    if use_lines:
        for m in matches.lines:
            ends = lifted.line_endpoints.get(m.line_id_a)
            if ends is None:
                continue
            lb = frame_b.line_by_id(m.line_id_b)
            out.append(Correspondence2D3D("line", ends, np.stack([lb.a, lb.b])))
    return out


def median_displacement(frame_a: FrameFeatures, frame_b: FrameFeatures, matches: FrameMatches):
    if not matches.points.pairs:
        return None
    ia = [i for i, _, _ in matches.points.pairs]
    ib = [j for _, j, _ in matches.points.pairs]
    d = frame_a.ppoint_positions[ia, :2] - frame_b.ppoint_positions[ib, :2]
    return float(np.median(np.linalg.norm(d, axis=1)))


def process_pair(frame_a: FrameFeatures, frame_b: FrameFeatures, camera: CameraRig,
                 point_weights: EncoderWeights, line_weights: EncoderWeights,
                 config: TrackConfig = TrackConfig(), seed: int = 0) -> PairLog:
    """Match, lift and solve one pair; failures are recorded, not raised."""
    entry = PairLog(frame_a.frame_id, frame_b.frame_id,
                    point_detections=len(frame_a.ppoints), line_detections=len(frame_a.lines))
    try:
        matches = match_frames(point_weights, line_weights, frame_a, frame_b, config.match,
                               config.use_position)
        entry.point_matches = len(matches.points.pairs)
        entry.line_matches = len(matches.lines)
        disp = median_displacement(frame_a, frame_b, matches)
        if disp is not None and disp < config.stationary_px:
            entry.stationary = True
            entry.relative = SE3Pose.identity()
            return entry
        corrs = build_correspondences(lift_frame(frame_a, camera), frame_b, matches,
                                      config.use_points, config.use_lines)
        entry.correspondences = len(corrs)
        est = ransac_pose(corrs, camera, config.ransac_iterations, config.inlier_threshold_px,
                          seed, huber_delta=config.huber_delta)
        entry.inliers = len(est.inliers)
        entry.residual_rms = est.residual_rms
        entry.relative = est.pose
    except PlvoError as exc:
        entry.error = f"{type(exc).__name__}: {exc}"
    return entry


def track(frames, camera: CameraRig, point_weights: EncoderWeights, line_weights: EncoderWeights,
          config: TrackConfig = TrackConfig(), masks: Optional[Sequence[MaskImage]] = None,
          jobs: int = 1) -> TrackResult:
    """Run odometry over ``frames`` and return the trajectory, totals and per-pair log.

    Pairs are matched and solved concurrently with up to ``jobs`` workers;
    composition runs in frame order. A pair that fails reuses the previous
    relative pose and is flagged as a fallback.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise EmptySequence(f"need at least 2 frames, got {len(frames)}")
    if masks is not None:
        if len(masks) != len(frames):
            raise LengthMismatch("one mask per frame is required")
        frames = [apply_mask(f, m) for f, m in zip(frames, masks)]

    def work(k):
        return process_pair(frames[k], frames[k + 1], camera, point_weights, line_weights,
                            config, seed=config.seed + k)

    pairs = range(len(frames) - 1)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            logs = list(pool.map(work, pairs))
    else:
        logs = [work(k) for k in pairs]

    poses = [SE3Pose.identity()]
    previous = SE3Pose.identity()
    for entry in logs:
        if entry.relative is None:
            entry.fallback = True
            entry.relative = previous
            log.info("pair %d-%d fell back to constant velocity (%s)",
                     entry.frame_a, entry.frame_b, entry.error)
        previous = entry.relative
        poses.append(poses[-1] @ entry.relative.inverse())
    traj = Trajectory([f.frame_id for f in frames], poses)
    return TrackResult(traj, match_stats(logs), logs)


# -- evaluation ------------------------------------------------------------------

@dataclass
class Alignment:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def _check_pair(traj: Trajectory, gt: Trajectory, minimum: int):
    if len(traj) != len(gt):
        raise LengthMismatch(f"trajectory has {len(traj)} poses, ground truth {len(gt)}")
    if list(traj.frame_ids) != list(gt.frame_ids):
        raise LengthMismatch("trajectories do not share frame ids")
    if len(traj) < minimum:
        raise LengthMismatch(f"need at least {minimum} poses, got {len(traj)}")


def align_umeyama(traj: Trajectory, gt: Trajectory, with_scale: bool = False):
    """Least-squares similarity (or rigid) transform mapping ``traj`` positions onto ``gt``.

    Returns ``(aligned_trajectory, Alignment)``.
    """
    _check_pair(traj, gt, 3)
    X, Y = traj.positions(), gt.positions()
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    for P in (Xc, Yc):
        s = np.linalg.svd(P, compute_uv=False)
        if s[1] <= 1e-9 * max(1.0, s[0]):
            raise DegenerateGeometry("positions are collinear; alignment is not unique")
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / (Xc**2).sum(axis=1).mean()) if with_scale else 1.0
    t = my - scale * R @ mx
    A = Alignment(R, t, scale)
    poses = [SE3Pose(R @ p.rotation, A.apply(p.translation)) for p in traj.poses]
    return Trajectory(list(traj.frame_ids), poses), A


@dataclass
class ApeResult:
    frame_ids: list
    errors: np.ndarray
    rotation_errors: np.ndarray
    rmse: float
    mean: float
    max: float
    aligned: bool = False

    def rows(self):
        return [[f, float(e)] for f, e in zip(self.frame_ids, self.errors)]


def ape(traj: Trajectory, gt: Trajectory, aligned: bool = False) -> ApeResult:
    """Per-frame position error and its RMSE, mean and max (no alignment applied here)."""
    _check_pair(traj, gt, 1)
    err = np.linalg.norm(traj.positions() - gt.positions(), axis=1)
    rot = np.array([(a.inverse() @ b).rotation_angle() for a, b in zip(traj.poses, gt.poses)])
    return ApeResult(list(traj.frame_ids), err, rot, float(np.sqrt(np.mean(err**2))),
                     float(err.mean()), float(err.max()), aligned)


@dataclass
class Evaluation:
    raw: ApeResult
    aligned: Optional[ApeResult]
    alignment: Optional[Alignment]
    note: str = ""

    @property
    def headline(self) -> ApeResult:
        return self.aligned if self.aligned is not None else self.raw


def evaluate_trajectory(traj: Trajectory, gt: Trajectory, align: bool = True,
                        with_scale: bool = False) -> Evaluation:
    """Raw error after anchoring both at their first pose, plus Umeyama-aligned error.

    Collinear trajectories have no unique alignment; the aligned result is then
    omitted and the raw error is the headline.
    """
    traj_a, gt_a = traj.anchored(), gt.anchored()
    raw = ape(traj_a, gt_a)
    if not align:
        return Evaluation(raw, None, None, "alignment disabled")
    try:
        aligned, A = align_umeyama(traj_a, gt_a, with_scale)
    except (DegenerateGeometry, LengthMismatch) as exc:
        return Evaluation(raw, None, None, f"alignment skipped: {exc}")
    return Evaluation(raw, ape(aligned, gt_a, aligned=True), A)
