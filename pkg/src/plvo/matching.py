"""Inference-time matching of point and line features between two frames."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_types import FrameFeatures
from .encoder_gnn import EncoderWeights, describe
from .line_matcher import LineMatch, vote_line_matches
from .ot_matcher import (MatchSet, SinkhornResult, augment_log_scores, affinity_logits,
                         default_marginals, extract_matches, sinkhorn)


@dataclass(frozen=True)
class MatchParams:
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6
    score_threshold: float = 0.2
    majority: float = 0.5
    min_support: int = 2


@dataclass
class FrameMatches:
    points: MatchSet
    lpoints: MatchSet
    lines: list = field(default_factory=list)


def match_keypoints(weights: EncoderWeights, pos_a, desc_a, pos_b, desc_b, size,
                    params: MatchParams = MatchParams(), use_position: bool = True):
    """Run the full matcher on two keypoint sets; returns (MatchSet, SinkhornResult)."""
    M, N = len(pos_a), len(pos_b)
    if M == 0 or N == 0:
        a, b = default_marginals(M, N)
        P = np.zeros((M + 1, N + 1))
        empty = MatchSet((), tuple(range(M)), tuple(range(N)))
        return empty, SinkhornResult(P, 0, 0.0, True)
    h_a, h_b = describe(pos_a, desc_a, pos_b, desc_b, weights, size, use_position)
    logits = affinity_logits(h_a.data, h_b.data, weights.params["E"], weights.config.delta)
    scores = augment_log_scores(logits, weights.dustbin)
    a, b = default_marginals(M, N)
    result = sinkhorn(scores, a, b, params.sinkhorn_iters, params.sinkhorn_tol)
    return extract_matches(result.P, params.score_threshold), result


def match_kind(weights: EncoderWeights, fa: FrameFeatures, fb: FrameFeatures, kind: str,
               params: MatchParams = MatchParams(), use_position: bool = True) -> MatchSet:
    if kind == "point":
        args = (fa.ppoint_positions, fa.ppoint_descriptors, fb.ppoint_positions, fb.ppoint_descriptors)
    else:
        args = (fa.lpoint_positions, fa.lpoint_descriptors, fb.lpoint_positions, fb.lpoint_descriptors)
    ms, _ = match_keypoints(weights, *args, (fa.width, fa.height), params, use_position)
    return ms


def match_frames(point_weights: EncoderWeights, line_weights: EncoderWeights,
                 fa: FrameFeatures, fb: FrameFeatures, params: MatchParams = MatchParams(),
                 use_position: bool = True) -> FrameMatches:
    points = match_kind(point_weights, fa, fb, "point", params, use_position)
    lpoints = match_kind(line_weights, fa, fb, "line", params, use_position)
    lines = vote_line_matches(lpoints, fa.lines, fb.lines, params.majority, params.min_support)
    return FrameMatches(points, lpoints, lines)


def precision_recall(matches: MatchSet, gt_pairs) -> tuple:
    """(correct, predicted, ground-truth) counts for a match set."""
    truth = set((int(i), int(j)) for i, j, *_ in gt_pairs)
    predicted = {(i, j) for i, j, _ in matches.pairs}
    return len(predicted & truth), len(predicted), len(truth)


def line_match_counts(lines, gt_line_pairs) -> tuple:
    truth = set((int(a), int(b)) for a, b in gt_line_pairs)
    predicted = {(m.line_id_a, m.line_id_b) for m in lines}
    return len(predicted & truth), len(predicted), len(truth)
