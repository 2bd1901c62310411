"""Score matrix, dustbin-augmented log-domain Sinkhorn, match extraction and losses."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import GroundTruth


class UndefinedLossError(ValueError):
    """A pair has no supervised cells."""


def score_matrix(f_s: Tensor, f_t: Tensor) -> Tensor:
    """Unnormalized inner products, divided by the descriptor width."""
    if f_s.shape[1] != f_t.shape[1]:
        raise ag.DimensionError(f"descriptor widths differ: {f_s.shape[1]} vs {f_t.shape[1]}")
    return (f_s @ f_t.T) * (1.0 / f_s.shape[1])


def partial_assignment(scores: Tensor, z: Tensor, iterations: int = 100) -> Tensor:
    """Log assignment matrix of shape (M+1, N+1); the last row and column are dustbins.

    Entropic transport with row marginals (1, ..., 1, N) and column marginals
    (1, ..., 1, M), solved by alternating log-domain Sinkhorn updates.  Every
    iteration is on the tape.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not np.all(np.isfinite(scores.data)):
        raise ag.NonFiniteError("partial_assignment: non-finite scores")
    m, n = scores.shape
    z = ag.as_tensor(z)
    col = ag.broadcast_to(ag.reshape(z, (1, 1)), (m, 1))
    row = ag.broadcast_to(ag.reshape(z, (1, 1)), (1, n + 1))
    couplings = ag.concat([ag.concat([scores, col], axis=1), row], axis=0)

    log_mu = np.zeros((m + 1, 1))
    log_mu[-1] = np.log(n)
    log_nu = np.zeros((1, n + 1))
    log_nu[0, -1] = np.log(m)
    v = ag.Tensor(np.zeros((1, n + 1)))
    for _ in range(iterations):
        u = log_mu - ag.logsumexp(couplings + v, axis=1)
        v = log_nu - ag.logsumexp(couplings + u, axis=0)
    return couplings + u + v


def extract_matches(log_p, threshold: float = 0.2) -> list[tuple[int, int, float]]:
    """Mutual row/column argmax over the non-dustbin block with probability >= threshold.

    Ties go to the lowest index.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    lp = log_p.data if isinstance(log_p, Tensor) else np.asarray(log_p)
    core = lp[:-1, :-1]
    if core.size == 0:
        return []
    best_t = np.argmax(core, axis=1)
    best_s = np.argmax(core, axis=0)
    out = []
    for i, j in enumerate(best_t):
        if best_s[j] != i:
            continue
        conf = float(np.exp(core[i, j]))
        if conf >= threshold:
            out.append((i, int(j), conf))
    return out


def supervision_cells(gt: GroundTruth, m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    matches = np.asarray(gt.matches, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([matches[:, 0], gt.unmatched_s, np.full(len(gt.unmatched_t), m)])
    cols = np.concatenate([matches[:, 1], np.full(len(gt.unmatched_s), n), gt.unmatched_t])
    return rows.astype(np.int64), cols.astype(np.int64)


def feature_loss(log_p: Tensor, gt: GroundTruth) -> Tensor:
    """Negative log-likelihood of the supervised cells, averaged over their count."""
    m, n = log_p.shape[0] - 1, log_p.shape[1] - 1
    rows, cols = supervision_cells(gt, m, n)
    if len(rows) == 0:
        raise UndefinedLossError("no matched or unmatched keypoints to supervise")
    if rows.max() > m or cols.max() > n or rows.min() < 0 or cols.min() < 0:
        raise IndexError("supervision index out of range")
    return -ag.mean(ag.take(log_p, rows, cols))


def hybrid_loss(feature, scene, alpha: float = 8.0):
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return feature + scene * alpha
