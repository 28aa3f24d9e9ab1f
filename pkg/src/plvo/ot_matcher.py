"""Affinity scores, dustbin augmentation, Sinkhorn transport and match extraction.

Rows of every score/assignment matrix index features of image A and columns
index features of image B; the last row and column are the dustbins.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (DimensionMismatch, IndexOutOfRange, MarginalSumMismatch,
                     NonPositiveTemperature)

LOGIT_CLAMP = 30.0
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class MatchSet:
    pairs: tuple            # ((i, j, score), ...)
    unmatched_a: tuple
    unmatched_b: tuple

    def as_dict(self) -> dict:
        return {i: j for i, j, _ in self.pairs}

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class MatchLabels:
    """Ground-truth pairs plus the features that must go to a dustbin."""
    pairs: tuple
    unmatched_a: tuple
    unmatched_b: tuple


@dataclass
class SinkhornResult:
    P: np.ndarray
    iterations: int
    violation: float
    converged: bool
    log_P: np.ndarray = field(repr=False, default=None)


def _check_dims(H_A, H_B, E):
    if H_A.shape[1] != H_B.shape[1] or E.shape != (H_A.shape[1], H_B.shape[1]):
        raise DimensionMismatch(f"affinity: shapes {H_A.shape}, {H_B.shape}, E {E.shape}")


def affinity_logits(H_A, H_B, E, delta: float) -> np.ndarray:
    """``h_i^T E h_j / delta`` without exponentiation."""
    if not delta > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {delta}")
    H_A, H_B, E = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (H_A, H_B, E))
    _check_dims(H_A, H_B, E)
    return H_A @ E @ H_B.T / delta


def affinity(H_A, H_B, E, delta: float) -> np.ndarray:
    logits = affinity_logits(H_A, H_B, E, delta)
    return np.exp(np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP))


def augment_log_scores(logits, z: float) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    M, N = logits.shape
    out = np.full((M + 1, N + 1), float(z))
    out[:M, :N] = logits
    return out


def augment_dustbin(S, z: float) -> np.ndarray:
    """Log-score matrix of an affinity matrix with a dustbin row and column."""
    S = np.asarray(S, dtype=float)
    return augment_log_scores(np.log(S), z)


def default_marginals(M: int, N: int):
    a = np.concatenate([np.ones(M), [float(N)]])
    b = np.concatenate([np.ones(N), [float(M)]])
    return a, b


def _lse_rows(X):
    m = X.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.exp(X - m[:, None]).sum(axis=1))


class _LogKernel:
    """Row/column log-sum-exp of ``Z + potential``.

    Uses a max-shifted kernel and matrix-vector products; falls back to the
    exact log-sum-exp whenever the shifted sums underflow.
    """

    def __init__(self, Z):
        self.Z = Z
        self.shift = Z.max()
        self.K = np.exp(Z - self.shift)

    def _lse(self, K, Z, pot):
        pmax = pot.max()
        s = K @ np.exp(pot - pmax)
        if np.all(s > 1e-280):
            return np.log(s) + pmax + self.shift
        return _lse_rows(Z + pot[None, :])

    def rows(self, v):
        return self._lse(self.K, self.Z, v)

    def cols(self, u):
        return self._lse(self.K.T, self.Z.T, u)


def _violation(u, v, kern, a, b):
    rv = np.max(np.abs(np.exp(u + kern.rows(v)) - a))
    cv = np.max(np.abs(np.exp(v + kern.cols(u)) - b))
    return float(max(rv, cv))


def _anneal(Zs, log_a, log_b, span_target, factor, stage_iters, relaxation, warmup):
    """Warm-start potentials by solving at a sequence of rising inverse temperatures."""
    finite = Zs[np.isfinite(Zs)]
    span = float(finite.max() - finite.min()) if finite.size else 0.0
    scales = []
    lam = 1.0
    while span * lam > span_target:
        lam /= factor
        scales.insert(0, lam)
    u = np.zeros(Zs.shape[0])
    v = np.zeros(Zs.shape[1])
    prev = scales[0] if scales else 1.0
    for lam in scales:
        u *= lam / prev
        v *= lam / prev
        prev = lam
        kern = _LogKernel(Zs * lam)
        for k in range(stage_iters):
            w = 1.0 if k < warmup else relaxation
            u = (1.0 - w) * u + w * (log_a - kern.rows(v))
            v = (1.0 - w) * v + w * (log_b - kern.cols(u))
    return u / prev, v / prev, len(scales) * stage_iters


def sinkhorn(log_scores, a, b, max_iters: int = 100, tol: float = 1e-6,
             relaxation: float = 1.5, warmup: int = 3, anneal: bool = False,
             anneal_span: float = 10.0, anneal_factor: float = 2.0,
             anneal_stage_iters: int = 20) -> SinkhornResult:
    """Log-domain Sinkhorn scaling toward row sums ``a`` and column sums ``b``.

    After ``warmup`` plain iterations each potential update is over-relaxed by
    ``relaxation`` (1.0 gives the textbook iteration). Stops once the largest
    absolute row or column violation drops below ``tol``. Rows or columns with
    zero mass are held at zero.

    ``anneal`` enables epsilon-scaling for low temperatures: the scores are
    first solved at reduced scale (span at most ``anneal_span``, then doubled
    stage by stage) and the potentials carried over. ``max_iters`` then bounds
    the final full-scale stage; ``iterations`` reports the total.
    """
    Z = np.asarray(log_scores, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if Z.shape != (a.size, b.size):
        raise DimensionMismatch(f"sinkhorn: scores {Z.shape} vs marginals {a.size}, {b.size}")
    if abs(a.sum() - b.sum()) > 1e-9:
        raise MarginalSumMismatch(f"sum(a)={a.sum()} != sum(b)={b.sum()}")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("marginals must be non-negative")
    rows, cols = a > 0, b > 0
    if not rows.any() or not cols.any():
        return SinkhornResult(np.zeros_like(Z), 0, 0.0, True, np.full_like(Z, -np.inf))
    Zs = Z[np.ix_(rows, cols)]
    ar, bc = a[rows], b[cols]
    log_a, log_b = np.log(ar), np.log(bc)
    kern = _LogKernel(Zs)
    u = np.zeros(Zs.shape[0])
    v = np.zeros(Zs.shape[1])
    extra = 0
    if anneal:
        u, v, extra = _anneal(Zs, log_a, log_b, anneal_span, anneal_factor, anneal_stage_iters,
                              relaxation, warmup)
    violation = np.inf
    it = 0
    while True:
        lse_r = kern.rows(v)
        if it:
            violation = float(max(np.max(np.abs(np.exp(u + lse_r) - ar)),
                                  np.max(np.abs(np.exp(v + kern.cols(u)) - bc))))
            if violation < tol or it >= max_iters:
                break
        w = 1.0 if it < warmup else relaxation
        u = (1.0 - w) * u + w * (log_a - lse_r)
        v = (1.0 - w) * v + w * (log_b - kern.cols(u))
        it += 1
    log_P = np.full_like(Z, -np.inf)
    log_P[np.ix_(rows, cols)] = Zs + u[:, None] + v[None, :]
    return SinkhornResult(np.exp(log_P), it + extra, violation, violation < tol, log_P)


def sinkhorn_tape(log_scores: ad.Tensor, a, b, max_iters: int = 100, tol: float = 1e-6,
                  relaxation: float = 1.5, warmup: int = 3):
    """Unrolled counterpart of :func:`sinkhorn` recorded on the autodiff tape.

    Returns ``(log_P tensor, iterations)``. Early stopping inspects concrete
    values only, so the recorded graph is exactly the computation performed.
    Marginals must be strictly positive.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if abs(a.sum() - b.sum()) > 1e-9:
        raise MarginalSumMismatch(f"sum(a)={a.sum()} != sum(b)={b.sum()}")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("sinkhorn_tape needs strictly positive marginals")
    log_a, log_b = ad.Tensor(np.log(a)), ad.Tensor(np.log(b))
    Z = log_scores
    Zt = ad.transpose(Z)
    kern = _LogKernel(Z.data)
    u = ad.Tensor(np.zeros(a.size))
    v = ad.Tensor(np.zeros(b.size))
    it = 0
    while True:
        if it and (it >= max_iters or _violation(u.data, v.data, kern, a, b) < tol):
            break
        w = 1.0 if it < warmup else relaxation
        u_new = ad.sub(log_a, ad.logsumexp_rows(ad.add(Z, v)))
        u = u_new if w == 1.0 else ad.add(ad.scale(u, 1.0 - w), ad.scale(u_new, w))
        v_new = ad.sub(log_b, ad.logsumexp_rows(ad.add(Zt, u)))
        v = v_new if w == 1.0 else ad.add(ad.scale(v, 1.0 - w), ad.scale(v_new, w))
        it += 1
    log_P = ad.add(ad.transpose(ad.add(Zt, u)), v)
    return log_P, it


def extract_matches(P, score_threshold: float = 0.2) -> MatchSet:
    """Mutual strict maxima of the core (non-dustbin) block above a threshold."""
    P = np.asarray(P, dtype=float)
    M, N = P.shape[0] - 1, P.shape[1] - 1
    pairs = []
    if M > 0 and N > 0:
        core = P[:M, :N]
        row_best = core.argmax(axis=1)
        col_best = core.argmax(axis=0)
        row_max = core[np.arange(M), row_best]
        col_max = core[col_best, np.arange(N)]
        row_unique = (core == row_max[:, None]).sum(axis=1) == 1
        col_unique = (core == col_max[None, :]).sum(axis=0) == 1
        for i in range(M):
            j = int(row_best[i])
            if (col_best[j] == i and row_unique[i] and col_unique[j]
                    and core[i, j] >= score_threshold):
                pairs.append((i, j, float(core[i, j])))
    ma = {i for i, _, _ in pairs}
    mb = {j for _, j, _ in pairs}
    return MatchSet(tuple(pairs), tuple(i for i in range(M) if i not in ma),
                    tuple(j for j in range(N) if j not in mb))


def _label_indices(P_shape, gt):
    M, N = P_shape[0] - 1, P_shape[1] - 1
    pairs = np.array([(i, j) for i, j, *_ in gt.pairs], dtype=int).reshape(-1, 2)
    ua = np.asarray(gt.unmatched_a, dtype=int)
    ub = np.asarray(gt.unmatched_b, dtype=int)
    if (np.any(pairs[:, 0] >= M) or np.any(pairs[:, 1] >= N) or np.any(pairs < 0)
            or np.any(ua >= M) or np.any(ua < 0) or np.any(ub >= N) or np.any(ub < 0)):
        raise IndexOutOfRange("ground-truth index outside the assignment matrix")
    rows = np.concatenate([pairs[:, 0], ua, np.full(ub.size, M)])
    cols = np.concatenate([pairs[:, 1], np.full(ua.size, N), ub])
    return rows, cols


def nll_loss(P, gt) -> float:
    """Negative log-likelihood of the labelled pairs and dustbin assignments."""
    P = np.asarray(P, dtype=float)
    rows, cols = _label_indices(P.shape, gt)
    return float(-np.sum(np.log(np.maximum(P[rows, cols], PROB_FLOOR))))


def nll_loss_tape(log_P: ad.Tensor, gt, normalize: bool = False) -> ad.Tensor:
    """Same loss from a log-assignment tensor; optionally averaged over terms."""
    rows, cols = _label_indices(log_P.shape, gt)
    picked = ad.clamp_min(ad.gather(log_P, rows, cols), float(np.log(PROB_FLOOR)))
    total = ad.sum_(picked)
    scale = -1.0 / max(rows.size, 1) if normalize else -1.0
    return ad.scale(total, scale)
