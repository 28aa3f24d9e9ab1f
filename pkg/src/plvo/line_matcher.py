"""Line sampling into L-points and majority-vote line matching."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLine
from .ot_matcher import MatchSet

DEFAULT_SPACING = 8.0
DEFAULT_MIN_SAMPLES = 5


@dataclass(frozen=True)
class LineMatch:
    line_id_a: int
    line_id_b: int
    support: int
    total: int
    score: float


def sample_line_points(a, b, spacing: float = DEFAULT_SPACING,
                       min_samples: int = DEFAULT_MIN_SAMPLES) -> np.ndarray:
    """Evenly spaced samples from ``a`` to ``b`` inclusive.

    The count is ``max(min_samples, floor(length / spacing) + 1)``. Works for
    endpoints of any dimension.
    """
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    if min_samples < 2:
        raise ValueError("min_samples must be at least 2")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.linalg.norm(b - a))
    if length == 0.0:
        raise DegenerateLine("line endpoints coincide")
    count = max(min_samples, int(np.floor(length / spacing)) + 1)
    t = np.linspace(0.0, 1.0, count)
    return a[None, :] + t[:, None] * (b - a)[None, :]


def _owners(lines) -> dict:
    owner = {}
    for line in lines:
        for q in line.lpoint_indices:
            owner[q] = line.id
    return owner


def _plurality(tally: Counter):
    """Unique most-voted key and its count, or (None, 0) on a tie."""
    if not tally:
        return None, 0
    ranked = tally.most_common()
    best, count = ranked[0]
    if len(ranked) > 1 and ranked[1][1] == count:
        return None, count
    return best, count


def vote_line_matches(lpoint_matches: MatchSet, lines_a, lines_b, majority: float = 0.5,
                      min_support: int = 2) -> list:
    """Aggregate L-point matches into one-to-one line matches.

    For each line of image A the owners (in image B) of its matched L-points
    are tallied. The plurality line is accepted when its support exceeds
    ``majority`` of the matched L-points, reaches ``min_support``, and the
    reverse tally of that line points back. Ties are rejected.
    """
    owner_a = _owners(lines_a)
    owner_b = _owners(lines_b)
    votes_a: dict = {}
    votes_b: dict = {}
    matched_a: Counter = Counter()
    for i, j, _ in lpoint_matches.pairs:
        la = owner_a.get(i)
        lb = owner_b.get(j)
        if la is not None:
            matched_a[la] += 1
        if la is not None and lb is not None:
            votes_a.setdefault(la, Counter())[lb] += 1
            votes_b.setdefault(lb, Counter())[la] += 1

    out = []
    for line in lines_a:
        total = matched_a[line.id]
        cand, support = _plurality(votes_a.get(line.id, Counter()))
        if cand is None or support < min_support or support <= majority * total:
            continue
        recip, _ = _plurality(votes_b.get(cand, Counter()))
        if recip != line.id:
            continue
        out.append(LineMatch(line.id, cand, support, total, support / total))
    return out
