"""Parallel self/cross attention layers with a single shared cross-score product."""
from __future__ import annotations

import math
from typing import Sequence

from . import autograd as ag
from .autograd import Tensor


def _heads(x: Tensor, heads: int) -> list[Tensor]:
    if heads == 1:
        return [x]
    width = x.shape[1] // heads
    return [x[:, k * width:(k + 1) * width] for k in range(heads)]


def _merge(parts: list[Tensor]) -> Tensor:
    return parts[0] if len(parts) == 1 else ag.concat(parts, axis=1)


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` per head."""
    out = []
    for qh, kh, vh in zip(_heads(q, heads), _heads(k, heads), _heads(v, heads)):
        scale = 1.0 / math.sqrt(qh.shape[1])
        out.append(ag.softmax_rows(ag.matmul(qh, kh.T) * scale) @ vh)
    return _merge(out)


def cross_attend(q_s: Tensor, k_t: Tensor, v_s: Tensor, v_t: Tensor, heads: int = 1):
    """Both cross messages from one score product ``A = q_s k_t^T``.

    Source tokens read ``softmax(A) v_t``; target tokens read
    ``softmax(A^T) v_s``.
    """
    msg_s, msg_t = [], []
    for qh, kh, vsh, vth in zip(_heads(q_s, heads), _heads(k_t, heads),
                                _heads(v_s, heads), _heads(v_t, heads)):
        scores = ag.matmul(qh, kh.T) * (1.0 / math.sqrt(qh.shape[1]))
        msg_s.append(ag.softmax_rows(scores) @ vth)
        msg_t.append(ag.softmax_rows(scores.T) @ vsh)
    return _merge(msg_s), _merge(msg_t)


def _project(x: Tensor, params: dict):
    return x @ params["wq"], x @ params["wk"], x @ params["wv"]


def self_attention(x: Tensor, params: dict, heads: int = 1) -> Tensor:
    q, k, v = _project(x, params)
    return attend(q, k, v, heads)


def shared_cross_attention(xs: Tensor, xt: Tensor, params: dict, heads: int = 1):
    q_s, _, v_s = _project(xs, params)
    k_t, v_t = xt @ params["wk"], xt @ params["wv"]
    return cross_attend(q_s, k_t, v_s, v_t, heads)


def parallel_layer(xs: Tensor, xt: Tensor, params: dict, heads: int = 1):
    """One pre-norm residual layer; self and cross messages both read the layer input."""
    hs = ag.layer_norm(xs, params["ln1"]["g"], params["ln1"]["b"])
    ht = ag.layer_norm(xt, params["ln1"]["g"], params["ln1"]["b"])
    q_s, k_s, v_s = _project(hs, params)
    q_t, k_t, v_t = _project(ht, params)
    self_s = attend(q_s, k_s, v_s, heads)
    self_t = attend(q_t, k_t, v_t, heads)
    cross_s, cross_t = cross_attend(q_s, k_t, v_s, v_t, heads)

    def update(x, self_msg, cross_msg):
        fused = ag.concat([self_msg, cross_msg], axis=1)
        fused = ag.layer_norm(fused, params["ln2"]["g"], params["ln2"]["b"])
        return x + ag.mlp_apply(fused, params["mlp"])

    return update(xs, self_s, cross_s), update(xt, self_t, cross_t)


def stack_forward(xs: Tensor, xt: Tensor, layers: Sequence[dict], L: int | None = None, heads: int = 1):
    L = len(layers) if L is None else L
    if L < 1 or L > len(layers):
        raise ValueError(f"need 1 <= L <= {len(layers)}")
    for params in layers[:L]:
        xs, xt = parallel_layer(xs, xt, params, heads)
    return xs, xt
