import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plvo.core_types import LineSegment
from plvo.errors import DegenerateLine
from plvo.line_matcher import LineMatch, sample_line_points, vote_line_matches
from plvo.ot_matcher import MatchSet


def lines_with_counts(counts, first_id=1):
    """Lines owning consecutive L-point index blocks of the given sizes."""
    lines, start = [], 0
    for k, n in enumerate(counts):
        lines.append(LineSegment(first_id + k, (0.0, float(k)), (10.0, float(k)),
                                 tuple(range(start, start + n))))
        start += n
    return lines


def match_set(pairs):
    return MatchSet(tuple((i, j, 1.0) for i, j in pairs), (), ())


def from_vote_table(table, stray):
    """L-point matches realising a vote table.

    ``table[a][b]`` matches go from line a to line b; ``stray[a]`` further
    matches from line a land on B L-points owned by no line.
    """
    na, nb = table.shape
    size_a = table.sum(axis=1) + stray
    size_b = table.sum(axis=0)
    lines_a = lines_with_counts(size_a)
    lines_b = lines_with_counts(size_b, first_id=101)
    next_a = [l.lpoint_indices[0] if l.lpoint_indices else 0 for l in lines_a]
    next_b = [l.lpoint_indices[0] if l.lpoint_indices else 0 for l in lines_b]
    unowned = int(size_b.sum())
    pairs = []
    for a in range(na):
        for b in range(nb):
            for _ in range(table[a, b]):
                pairs.append((next_a[a], next_b[b]))
                next_a[a] += 1
                next_b[b] += 1
        for _ in range(stray[a]):
            pairs.append((next_a[a], unowned))
            next_a[a] += 1
            unowned += 1
    return lines_a, lines_b, match_set(pairs)


def tally_oracle(table, stray, majority=0.5, min_support=2):
    """The acceptance rule evaluated directly on the vote table."""
    out = set()
    for a in range(table.shape[0]):
        row = table[a]
        total = row.sum() + stray[a]
        best = row.max() if row.size else 0
        if best == 0 or (row == best).sum() > 1:
            continue
        b = int(np.argmax(row))
        col = table[:, b]
        if (col == col.max()).sum() > 1 or int(np.argmax(col)) != a:
            continue
        if best >= min_support and best > majority * total:
            out.add((1 + a, 101 + b))
    return out


def test_sample_line_points_forced_case():
    pts = sample_line_points((0, 0), (10, 0), spacing=5, min_samples=2)
    assert np.allclose(pts, [[0, 0], [5, 0], [10, 0]])


def test_sample_short_segment_uses_min_samples():
    pts = sample_line_points((1, 1), (3, 2), spacing=8, min_samples=5)
    assert len(pts) == 5
    assert np.allclose(pts[0], [1, 1]) and np.allclose(pts[-1], [3, 2])


def test_sample_errors():
    with pytest.raises(DegenerateLine):
        sample_line_points((2, 2), (2, 2))
    with pytest.raises(ValueError):
        sample_line_points((0, 0), (1, 0), spacing=0)
    with pytest.raises(ValueError):
        sample_line_points((0, 0), (1, 0), min_samples=1)


@given(st.lists(st.floats(-500, 500), min_size=4, max_size=4), st.floats(0.5, 40), st.integers(2, 9))
def test_samples_collinear_and_uniform(coords, spacing, min_samples):
    a, b = np.array(coords[:2]), np.array(coords[2:])
    if np.linalg.norm(b - a) < 1e-3:
        return
    pts = sample_line_points(a, b, spacing, min_samples)
    length = np.linalg.norm(b - a)
    assert len(pts) == max(min_samples, int(np.floor(length / spacing)) + 1)
    d = b - a
    cross = d[0] * (pts[:, 1] - a[1]) - d[1] * (pts[:, 0] - a[0])
    assert np.max(np.abs(cross)) / length < 1e-9
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert np.max(np.abs(steps - length / (len(pts) - 1))) < 1e-9


def test_unanimous_vote():
    la = lines_with_counts([5])
    lb = lines_with_counts([5], first_id=7)
    out = vote_line_matches(match_set([(k, k) for k in range(5)]), la, lb)
    assert out == [LineMatch(1, 7, 5, 5, 1.0)]


def test_split_vote_rejected():
    la = lines_with_counts([4])
    lb = lines_with_counts([2, 2], first_id=7)
    assert vote_line_matches(match_set([(k, k) for k in range(4)]), la, lb) == []


def test_single_matched_lpoint_never_matches():
    la = lines_with_counts([5])
    lb = lines_with_counts([5], first_id=7)
    assert vote_line_matches(match_set([(0, 0)]), la, lb) == []


def test_majority_counts_matched_lpoints_only():
    # 3 of 5 L-points matched, all to the same line: support 3 of 3
    la = lines_with_counts([5])
    lb = lines_with_counts([5], first_id=7)
    (m,) = vote_line_matches(match_set([(0, 0), (2, 1), (4, 2)]), la, lb)
    assert (m.support, m.total, m.score) == (3, 3, 1.0)


def test_stray_matches_can_break_majority():
    table = np.array([[2]])
    assert tally_oracle(table, np.array([2])) == set()
    la, lb, ms = from_vote_table(table, np.array([2]))
    assert vote_line_matches(ms, la, lb) == []


vote_tables = st.tuples(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6))


@given(vote_tables)
@settings(max_examples=300, deadline=None)
def test_vote_matches_tally_oracle(case):
    seed, na, nb = case
    rng = np.random.default_rng(seed)
    table = rng.integers(0, 4, (na, nb)) * (rng.random((na, nb)) < 0.5)
    stray = rng.integers(0, 3, na)
    la, lb, ms = from_vote_table(table, stray)
    got = vote_line_matches(ms, la, lb)
    assert {(m.line_id_a, m.line_id_b) for m in got} == tally_oracle(table, stray)
    assert len({m.line_id_a for m in got}) == len(got)
    assert len({m.line_id_b for m in got}) == len(got)
    for m in got:
        assert 0 < m.support <= m.total and 0 < m.score <= 1


@given(vote_tables)
@settings(max_examples=150, deadline=None)
def test_agreeing_vote_keeps_accepted_matches(case):
    seed, na, nb = case
    rng = np.random.default_rng(seed)
    table = rng.integers(0, 4, (na, nb))
    stray = rng.integers(0, 2, na)
    la, lb, ms = from_vote_table(table, stray)
    before = {(m.line_id_a, m.line_id_b) for m in vote_line_matches(ms, la, lb)}
    for a_id, b_id in before:
        grown = table.copy()
        grown[a_id - 1, b_id - 101] += 1
        la2, lb2, ms2 = from_vote_table(grown, stray)
        after = {(m.line_id_a, m.line_id_b) for m in vote_line_matches(ms2, la2, lb2)}
        assert before <= after


def test_unowned_lpoints_are_ignored():
    la = lines_with_counts([3])
    lb = lines_with_counts([3], first_id=7)
    ms = match_set([(0, 0), (1, 1), (2, 2), (3, 3)])  # index 3 belongs to no line
    (m,) = vote_line_matches(ms, la, lb)
    assert m.support == 3
