"""Matching metrics, nearest-neighbour baselines and the evaluation report."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import EstimationFailed, GroundTruth, apply_homography, corner_error, ransac_homography
from .visibility import visibility_accuracy

MMA_THRESHOLDS = tuple(range(1, 11))


def mma_single(matches, pts_s: np.ndarray, pts_t: np.ndarray, h: np.ndarray, thresholds=MMA_THRESHOLDS) -> dict:
    """Fraction of matches within each pixel threshold for one pair (0 when there are none)."""
    if len(matches) == 0:
        return {t: 0.0 for t in thresholds}
    idx = np.array([(m[0], m[1]) for m in matches], dtype=np.int64)
    err = np.linalg.norm(apply_homography(h, pts_s[idx[:, 0], :2]) - pts_t[idx[:, 1], :2], axis=1)
    return {t: float(np.mean(err <= t)) for t in thresholds}


def mma(per_pair: Iterable[tuple], thresholds=MMA_THRESHOLDS) -> dict:
    """Mean matching accuracy over pairs given ``(matches, pts_s, pts_t, h)`` tuples."""
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be ascending")
    scores = [mma_single(*item, thresholds=thresholds) for item in per_pair]
    if not scores:
        return {t: 0.0 for t in thresholds}
    return {t: float(np.mean([s[t] for s in scores])) for t in thresholds}


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def precision_recall_f1(predicted, gt: GroundTruth) -> tuple[float, float, float] | None:
    """Exact index agreement against the groundtruth match set.

    Returns ``None`` when the pair has no groundtruth matches.  An empty
    prediction scores precision 1 and recall 0.
    """
    truth = {(int(i), int(j)) for i, j in np.asarray(gt.matches).reshape(-1, 2)}
    if not truth:
        return None
    pred = {(int(m[0]), int(m[1])) for m in predicted}
    if not pred:
        return 1.0, 0.0, 0.0
    hits = len(pred & truth)
    p, r = hits / len(pred), hits / len(truth)
    return p, r, f1_score(p, r)


def homography_auc(errors: Sequence[float], max_threshold: float = 10.0) -> float:
    """Area under the cumulative corner-error curve up to ``max_threshold``, normalized to [0, 1].

    The curve joins the points ``(e_k, k/n)`` of the sorted errors with straight
    segments; failures enter as ``inf`` and never count.
    """
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    if len(errors) == 0:
        return 0.0
    recall = np.arange(1, len(errors) + 1) / len(errors)
    errors = np.concatenate([[0.0], errors])
    recall = np.concatenate([[0.0], recall])
    last = int(np.searchsorted(errors, max_threshold))
    r = np.concatenate([recall[:last], [recall[last - 1]]])
    e = np.concatenate([errors[:last], [max_threshold]])
    return float(np.trapezoid(r, x=e) / max_threshold)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def baseline_match(kind: str, desc_s: np.ndarray, desc_t: np.ndarray) -> list[tuple[int, int, float]]:
    """Cosine nearest-neighbour matching; ``kind`` is ``"nn"`` or ``"mnn"`` (mutual).

    Pairs with non-positive similarity carry no evidence and are never returned.
    """
    if desc_s.shape[1] != desc_t.shape[1]:
        raise ValueError("descriptor widths differ")
    if kind not in ("nn", "mnn"):
        raise ValueError(f"unknown baseline {kind!r}")
    if len(desc_s) == 0 or len(desc_t) == 0:
        return []
    sim = _unit_rows(desc_s) @ _unit_rows(desc_t).T
    best_t = np.argmax(sim, axis=1)
    best_s = np.argmax(sim, axis=0)
    out = []
    for i, j in enumerate(best_t):
        if sim[i, j] <= 0 or (kind == "mnn" and best_s[j] != i):
            continue
        out.append((i, int(j), float(sim[i, j])))
    return out


def raw_descriptors(keypoints) -> np.ndarray:
    """Concatenation of all per-scale input features."""
    return np.hstack(keypoints.features)


@dataclass
class EvalReport:
    mma: dict
    precision: float
    recall: float
    f1: float
    homography_auc_10px: float
    visibility_accuracy: float | None
    pair_count: int
    matcher: str = "model"
    per_pair: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("per_pair")
        d["mma"] = {str(k): v for k, v in self.mma.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def mma_csv(self) -> str:
        lines = ["threshold_px,mma"] + [f"{t},{v!r}" for t, v in self.mma.items()]
        return "\n".join(lines) + "\n"


def estimate_corner_error(matches, pair, seed: int = 0) -> float:
    if len(matches) < 4:
        return float("inf")
    idx = np.array([(m[0], m[1]) for m in matches], dtype=np.int64)
    src = pair.source.positions[idx[:, 0], :2]
    dst = pair.target.positions[idx[:, 1], :2]
    try:
        h, _ = ransac_homography(src, dst, inlier_threshold_px=3.0, iterations=1000, seed=seed)
    except EstimationFailed:
        return float("inf")
    return corner_error(h, pair.h, pair.source.image_size)


def evaluate_matches(pairs: Sequence, predictions: Sequence[list], visibility: Sequence | None = None,
                     matcher: str = "model", estimate_homography: bool = True) -> EvalReport:
    """Aggregate metrics for per-pair match lists.

    Precision and recall are averaged over pairs that have groundtruth matches;
    F1 is the harmonic mean of those averages.  ``visibility`` holds optional
    ``(probs_s, probs_t)`` per pair.
    """
    prf, errors, per_pair = [], [], []
    for k, (pair, matches) in enumerate(zip(pairs, predictions)):
        scores = precision_recall_f1(matches, pair.gt)
        if scores is not None:
            prf.append(scores)
        err = estimate_corner_error(matches, pair, seed=k) if estimate_homography else float("nan")
        errors.append(err)
        per_pair.append({"pair": k, "matches": len(matches), "prf": scores, "corner_error": err})
    mma_values = mma((m, p.source.positions, p.target.positions, p.h) for p, m in zip(pairs, predictions))
    precision = float(np.mean([s[0] for s in prf])) if prf else 0.0
    recall = float(np.mean([s[1] for s in prf])) if prf else 0.0
    vis_acc = None
    if visibility is not None:
        probs = np.concatenate([np.concatenate([v[0], v[1]]) for v in visibility])
        labels = np.concatenate([np.concatenate([p.gt.visible_s, p.gt.visible_t]) for p in pairs])
        vis_acc = visibility_accuracy(probs, labels)
    auc = homography_auc(errors) if estimate_homography else float("nan")
    return EvalReport(mma_values, precision, recall, f1_score(precision, recall), auc,
                      vis_acc, len(pairs), matcher, per_pair)


def evaluate_model(params, cfg, pairs: Sequence, estimate_homography: bool = True) -> EvalReport:
    from .model import predict

    preds = [predict(params, pair, cfg) for pair in pairs]
    return evaluate_matches(pairs, [p.matches for p in preds], [(p.vis_s, p.vis_t) for p in preds],
                            "model", estimate_homography)


def evaluate_baseline(kind: str, pairs: Sequence, estimate_homography: bool = True) -> EvalReport:
    matches = [baseline_match(kind, raw_descriptors(p.source), raw_descriptors(p.target)) for p in pairs]
    return evaluate_matches(pairs, matches, None, kind, estimate_homography)
