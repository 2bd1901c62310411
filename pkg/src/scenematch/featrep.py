"""Position-aware descriptors: multi-scale fusion and the wave position encoder."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .synth import NUM_SCALES, ConfigError


def fuse_multiscale(raw_features: Sequence[Tensor], params: dict) -> Tensor:
    """Project each scale to width C, concatenate to 4C, then project back to C."""
    if len(raw_features) != NUM_SCALES:
        raise ConfigError(f"expected {NUM_SCALES} scales, got {len(raw_features)}")
    projected = [
        ag.mlp_apply(ag.as_tensor(f), [layer], activation=None)
        for f, layer in zip(raw_features, params["scales"])
    ]
    return ag.mlp_apply(ag.concat(projected, axis=1), [params["out"]], activation=None)


def normalize_positions(positions: np.ndarray, image_size) -> np.ndarray:
    """Map pixel (u, v) to roughly [-1, 1] about the image centre; confidence passes through."""
    width, height = image_size
    half_diag = 0.5 * np.hypot(width, height)
    out = np.array(positions, dtype=np.float64, copy=True)
    out[:, 0] = (out[:, 0] - 0.5 * width) / half_diag
    out[:, 1] = (out[:, 1] - 0.5 * height) / half_diag
    return out


def wave_encode(d: Tensor, p: Tensor, params: dict, return_parts: bool = False):
    """Add a wave-shaped position code to descriptors ``d``.

    The amplitude comes from the descriptor and the phase from the position:
    ``x0 = d + mlp_F([A cos(theta), A sin(theta)])`` with ``A = mlp_A(d)`` and
    ``theta = mlp_theta(p)``.  With ``return_parts`` the dict
    ``{"amplitude", "phase", "real", "imag"}`` is returned alongside ``x0``.
    """
    p = ag.as_tensor(p)
    amplitude = ag.mlp_apply(d, params["amplitude"])
    phase = ag.mlp_apply(p, params["phase"])
    real = amplitude * ag.cos(phase)
    imag = amplitude * ag.sin(phase)
    x0 = d + ag.mlp_apply(ag.concat([real, imag], axis=1), params["fuse"])
    if return_parts:
        return x0, {"amplitude": amplitude, "phase": phase, "real": real, "imag": imag}
    return x0


def attach_scene_tokens(x0: Tensor, scene: Tensor) -> Tensor:
    if x0.shape[1] != scene.shape[1]:
        raise ag.DimensionError(f"descriptor width {x0.shape[1]} != scene width {scene.shape[1]}")
    return ag.concat([x0, scene], axis=0)


def split_scene_tokens(tokens: Tensor, m: int) -> tuple[Tensor, Tensor]:
    return tokens[:m], tokens[m:]
