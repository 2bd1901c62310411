"""The full matcher: parameter construction, forward pass, loss and prediction."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .assignment import extract_matches, feature_loss, hybrid_loss, partial_assignment, score_matrix
from .attention import stack_forward
from .autograd import Tensor
from .featrep import attach_scene_tokens, fuse_multiscale, normalize_positions, split_scene_tokens, wave_encode
from .synth import SyntheticPair
from .visibility import scene_loss, visibility_transform


@dataclass(frozen=True)
class ModelConfig:
    C: int = 32
    layers: int = 3
    scale_dims: tuple[int, ...] = (16, 16, 16, 16)
    heads: int = 1
    spatial_hidden: int = 8
    train_iters: int = 100
    infer_iters: int = 50
    match_threshold: float = 0.2
    alpha: float = 8.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ------------------------------------------------------------------ init

def _kaiming_layer(rng, fan_in: int, fan_out: int, zero: bool = False) -> dict:
    bound = np.sqrt(6.0 / fan_in)
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = np.zeros(fan_out) if zero else rng.uniform(-1 / np.sqrt(fan_in), 1 / np.sqrt(fan_in), fan_out)
    return {"w": Tensor(w, True), "b": Tensor(b, True)}


def _mlp(rng, widths, zero_last: bool = False) -> list[dict]:
    pairs = list(zip(widths[:-1], widths[1:]))
    return [_kaiming_layer(rng, a, b, zero=zero_last and k == len(pairs) - 1) for k, (a, b) in enumerate(pairs)]


def _orthogonal(rng, n: int) -> Tensor:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return Tensor(q * np.sign(np.diag(r)), True)


def _norm(width: int) -> dict:
    return {"g": Tensor(np.ones(width), True), "b": Tensor(np.zeros(width), True)}


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh parameters.  Projections are orthogonal, MLPs Kaiming-uniform, the last
    layer of each attention fusion MLP is zero so every block starts as identity."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
    C = cfg.C
    layers = [
        {
            "wq": _orthogonal(rng, C), "wk": _orthogonal(rng, C), "wv": _orthogonal(rng, C),
            "mlp": _mlp(rng, (2 * C, C, C), zero_last=True),
            "ln1": _norm(C), "ln2": _norm(2 * C),
        }
        for _ in range(cfg.layers)
    ]
    return {
        "fusion": {
            "scales": [_kaiming_layer(rng, d, C) for d in cfg.scale_dims],
            "out": _kaiming_layer(rng, len(cfg.scale_dims) * C, C),
        },
        "wave": {
            "amplitude": _mlp(rng, (C, C, C)),
            "phase": _mlp(rng, (3, C, C)),
            "fuse": _mlp(rng, (2 * C, C, C)),
        },
        "layers": layers,
        "visibility": {
            "spatial": {"w1": Tensor(rng.uniform(-1, 1, (cfg.spatial_hidden, 2)) / np.sqrt(2), True),
                        "w2": Tensor(rng.uniform(-1, 1, (2, cfg.spatial_hidden)) / np.sqrt(cfg.spatial_hidden), True)},
            "channel": {"w1": Tensor(rng.uniform(-1, 1, (C, C)) * np.sqrt(3.0 / C), True),
                        "w2": Tensor(rng.uniform(-1, 1, (C, C)) * np.sqrt(3.0 / C), True)},
            "wq": _orthogonal(rng, C), "wk": _orthogonal(rng, C), "wv": _orthogonal(rng, C),
            "out": _kaiming_layer(rng, C, C),
            "group": _mlp(rng, (C, C, 2)),
        },
        "scene": Tensor(rng.normal(0.0, 0.1, size=(2, C)), True),
        "dustbin": Tensor(np.array(1.0), True),
    }


def clone_params(params):
    if isinstance(params, Tensor):
        return Tensor(params.data.copy(), params.requires_grad)
    if isinstance(params, dict):
        return {k: clone_params(v) for k, v in params.items()}
    return [clone_params(v) for v in params]


# --------------------------------------------------------------- forward

def encode(params: dict, keypoints, cfg: ModelConfig) -> Tensor:
    """Position-aware descriptors ``x0`` for one image."""
    d = fuse_multiscale([Tensor(f) for f in keypoints.features], params["fusion"])
    p = Tensor(normalize_positions(keypoints.positions, keypoints.image_size))
    return wave_encode(d, p, params["wave"])


def forward(params: dict, pair: SyntheticPair, cfg: ModelConfig, iterations: int | None = None) -> dict:
    """Run the whole pipeline on one pair.

    Returns ``log_p`` ((M+1)x(N+1) log assignment), ``vis_s``/``vis_t`` (visibility
    probabilities) and the final matching descriptors ``desc_s``/``desc_t``.
    """
    m, n = len(pair.source), len(pair.target)
    tokens_s = attach_scene_tokens(encode(params, pair.source, cfg), params["scene"])
    tokens_t = attach_scene_tokens(encode(params, pair.target, cfg), params["scene"])
    tokens_s, tokens_t = stack_forward(tokens_s, tokens_t, params["layers"], heads=cfg.heads)
    desc_s, scene_s = split_scene_tokens(tokens_s, m)
    desc_t, scene_t = split_scene_tokens(tokens_t, n)
    vis_s = visibility_transform(desc_s, scene_s, params["visibility"])
    vis_t = visibility_transform(desc_t, scene_t, params["visibility"])
    iters = cfg.train_iters if iterations is None else iterations
    log_p = partial_assignment(score_matrix(desc_s, desc_t), params["dustbin"], iters)
    return {"log_p": log_p, "vis_s": vis_s, "vis_t": vis_t, "desc_s": desc_s, "desc_t": desc_t}


def pair_loss(params: dict, pair: SyntheticPair, cfg: ModelConfig, alpha: float | None = None):
    """``(total, feature, scene)`` losses for one pair."""
    out = forward(params, pair, cfg)
    lf = feature_loss(out["log_p"], pair.gt)
    ls = scene_loss(out["vis_s"], out["vis_t"], pair.gt)
    return hybrid_loss(lf, ls, cfg.alpha if alpha is None else alpha), lf, ls


@dataclass
class MatchPrediction:
    log_p: np.ndarray
    matches: list[tuple[int, int, float]]
    vis_s: np.ndarray
    vis_t: np.ndarray


def predict(params: dict, pair: SyntheticPair, cfg: ModelConfig) -> MatchPrediction:
    with ag.no_grad():
        out = forward(params, pair, cfg, iterations=cfg.infer_iters)
    return MatchPrediction(
        log_p=out["log_p"].data,
        matches=extract_matches(out["log_p"], cfg.match_threshold),
        vis_s=out["vis_s"].data,
        vis_t=out["vis_t"].data,
    )
