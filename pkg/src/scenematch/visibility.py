"""Cross-view visibility: scene-token mixing, scene/keypoint attention, 2-way classifier."""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import GroundTruth

VISIBLE = 0
EPS = 1e-7


def spatial_mlp(scene: Tensor, params: dict) -> Tensor:
    """Residual MLP across the two scene rows, applied to every channel column."""
    if scene.shape[0] != 2:
        raise ag.DimensionError(f"spatial MLP needs 2 scene rows, got {scene.shape[0]}")
    hidden = ag.gelu(params["w1"] @ scene)          # (h_s, C)
    return scene + params["w2"] @ hidden


def channel_mlp(x: Tensor, params: dict) -> Tensor:
    """Residual MLP across channels, row by row."""
    if x.shape[1] != params["w1"].shape[1]:
        raise ag.DimensionError(f"channel MLP width {params['w1'].shape[1]} != {x.shape[1]}")
    return x + ag.gelu(x @ params["w1"].T) @ params["w2"].T


def visibility_logits(local: Tensor, scene: Tensor, params: dict) -> Tensor:
    scene = channel_mlp(spatial_mlp(scene, params["spatial"]), params["channel"])
    q = scene @ params["wq"]
    k = local @ params["wk"]
    v = local @ params["wv"]
    weights = ag.softmax_rows((q @ k.T) * (1.0 / math.sqrt(q.shape[1])))   # (2, M)
    summary = weights @ v                                                 # (2, C)
    # hand each keypoint back the scene summaries it contributed to
    spread = weights.T @ summary                                          # (M, C)
    fused = local + ag.mlp_apply(spread, [params["out"]], activation=None)
    return ag.mlp_apply(fused, params["group"])


def visibility_transform(local: Tensor, scene: Tensor, params: dict) -> Tensor:
    """Per-keypoint ``(p_visible, p_invisible)`` rows."""
    return ag.softmax_rows(visibility_logits(local, scene, params))


def scene_loss(probs_s: Tensor, probs_t: Tensor, gt: GroundTruth) -> Tensor:
    """Mean binary cross-entropy of ``p_visible`` over the keypoints of both images."""
    if probs_s.shape[0] != len(gt.visible_s) or probs_t.shape[0] != len(gt.visible_t):
        raise ag.DimensionError("prediction and label lengths differ")
    b = ag.clip(ag.concat([probs_s[:, VISIBLE], probs_t[:, VISIBLE]]), EPS, 1.0 - EPS)
    y = np.concatenate([gt.visible_s, gt.visible_t]).astype(np.float64)
    nll = ag.log(b) * y + ag.log(1.0 - b) * (1.0 - y)
    return -ag.mean(nll)


def visibility_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    predicted_visible = np.argmax(probs, axis=1) == VISIBLE
    return float(np.mean(predicted_visible == labels.astype(bool)))
