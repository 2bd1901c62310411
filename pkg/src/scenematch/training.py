"""AdamW training with warmup + cosine decay, clipping, and bit-exact checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .assignment import UndefinedLossError
from .autograd import Tensor
from .model import ModelConfig, init_params, pair_loss

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
FORMAT_VERSION = 1
CKPT_MAGIC = b"SGCKPT1\x00"


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    C: int = 32
    layers: int = 3
    scale_dims: tuple[int, ...] = (16, 16, 16, 16)
    heads: int = 1
    batch_size: int = 8
    base_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    alpha: float = 8.0
    weight_decay: float = 0.01
    seed: int = 0
    sinkhorn_iters: int = 100
    infer_iters: int = 50
    match_threshold: float = 0.2
    clip_norm: float = 10.0
    checkpoint_every: int = 500

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.base_lr <= 0 or self.batch_size < 1:
            raise ValueError("base_lr and batch_size must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(C=self.C, layers=self.layers, scale_dims=tuple(self.scale_dims),
                           heads=self.heads, train_iters=self.sinkhorn_iters,
                           infer_iters=self.infer_iters, match_threshold=self.match_threshold,
                           alpha=self.alpha)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["scale_dims"] = tuple(d["scale_dims"])
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: Sequence[tuple[str, Tensor]], grads: dict[str, np.ndarray],
               state: AdamState, lr: float, weight_decay: float) -> None:
    """In-place AdamW update (decoupled decay, bias-corrected moments)."""
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for name, p in params:
        g = grads[name]
        if g.shape != p.shape:
            raise ag.DimensionError(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# ----------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: dict
    state: AdamState
    step: int
    config: TrainConfig


def _write_table(buf: io.BytesIO, table: Sequence[tuple[str, np.ndarray]]) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, a in table:
        raw = name.encode()
        a = np.array(a, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())


def _read_table(view: memoryview, pos: int):
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    table = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + n]).decode()
        pos += n
        (ndim,) = struct.unpack_from("<I", view, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        table[name] = np.frombuffer(view, "<f8", size, pos).reshape(shape).copy()
        pos += 8 * size
    return table, pos


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"step": ckpt.step, "adam_t": ckpt.state.t, "config": ckpt.config.to_dict()},
                        sort_keys=True).encode()
    named = ag.parameters(ckpt.params)
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    _write_table(buf, [(n, p.data) for n, p in named])
    _write_table(buf, [(n, ckpt.state.m[n]) for n, _ in named if n in ckpt.state.m])
    _write_table(buf, [(n, ckpt.state.v[n]) for n, _ in named if n in ckpt.state.v])
    return buf.getvalue()


def parse_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError("not an SGCKPT1 checkpoint")
    view = memoryview(raw)
    version, hlen = struct.unpack_from("<II", view, len(CKPT_MAGIC))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = len(CKPT_MAGIC) + 8
    header = json.loads(bytes(view[pos:pos + hlen]))
    pos += hlen
    values, pos = _read_table(view, pos)
    m, pos = _read_table(view, pos)
    v, pos = _read_table(view, pos)
    if pos != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    config = TrainConfig.from_dict(header["config"])
    params = init_params(config.model_config(), config.seed)
    named = dict(ag.parameters(params))
    if set(named) != set(values):
        raise ValueError("checkpoint parameter names do not match the model layout")
    for name, t in named.items():
        if values[name].shape != t.shape:
            raise ValueError(f"{name}: shape {values[name].shape} != {t.shape}")
        t.data = values[name]
    return Checkpoint(params, AdamState(m, v, header["adam_t"]), header["step"], config)


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ----------------------------------------------------------------- loop

LOG_FIELDS = ("step", "loss", "feature_loss", "scene_loss", "lr", "grad_norm")


def batch_indices(step: int, batch_size: int, count: int) -> list[int]:
    return [(step * batch_size + b) % count for b in range(batch_size)]


def train_step(params: dict, batch, cfg: TrainConfig, mcfg: ModelConfig):
    """Mean hybrid loss over ``batch`` and its gradients (unclipped)."""
    named = ag.parameters(params)
    for _, p in named:
        p.grad = None
    with ag.Tape() as tape:
        terms = []
        for pair in batch:
            try:
                terms.append(pair_loss(params, pair, mcfg))
            except UndefinedLossError:
                continue
        if not terms:
            return None
        total = terms[0][0]
        for t in terms[1:]:
            total = total + t[0]
        total = total * (1.0 / len(terms))
    ag.backward(tape, total)
    lf = float(np.mean([t[1].item() for t in terms]))
    ls = float(np.mean([t[2].item() for t in terms]))
    grads = {n: ag.grad_of(p) for n, p in named}
    return total.item(), lf, ls, grads


def train(cfg: TrainConfig, dataset, checkpoint_path=None, log_path=None,
          resume: Checkpoint | None = None, until: int | None = None) -> tuple[Checkpoint, list[dict]]:
    """Optimize from scratch (or from ``resume``) up to step ``until`` (default ``total_steps``).

    ``dataset`` is any indexable sequence of pairs; step ``k`` reads indices
    ``k*B .. k*B+B-1`` modulo its length.  Checkpoints are written every
    ``checkpoint_every`` steps and at the end; a non-finite loss aborts and
    leaves the last checkpoint on disk untouched.
    """
    mcfg = cfg.model_config()
    if resume is None:
        ckpt = Checkpoint(init_params(mcfg, cfg.seed), AdamState(), 0, cfg)
    else:
        ckpt = Checkpoint(resume.params, resume.state, resume.step, cfg)
    stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
    named = ag.parameters(ckpt.params)
    rows: list[dict] = []
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume is not None else "w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_FIELDS)
        if resume is None:
            writer.writeheader()
    try:
        while ckpt.step < stop:
            step = ckpt.step
            batch = [dataset[i] for i in batch_indices(step, cfg.batch_size, len(dataset))]
            try:
                result = train_step(ckpt.params, batch, cfg, mcfg)
            except ag.NonFiniteError as exc:
                raise TrainingAborted(f"step {step}: {exc}") from exc
            lr = lr_at(step + 1, cfg)
            if result is None:
                log.warning("step %d: batch has no supervision, skipped", step)
                ckpt.step += 1
                continue
            loss, lf, ls, grads = result
            if not math.isfinite(loss):
                raise TrainingAborted(f"step {step}: non-finite loss {loss}")
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.clip_norm:
                grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
            adamw_step(named, grads, ckpt.state, lr, cfg.weight_decay)
            for name, p in named:
                if not np.all(np.isfinite(p.data)):
                    raise TrainingAborted(f"step {step}: parameter {name} became non-finite")
            ckpt.step += 1
            row = {"step": ckpt.step, "loss": loss, "feature_loss": lf, "scene_loss": ls,
                   "lr": lr, "grad_norm": norm}
            rows.append(row)
            if log_fh is not None:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            if checkpoint_path is not None and ckpt.step % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt, checkpoint_path)
            if ckpt.step % 100 == 0:
                log.info("step %d loss %.4f (feature %.4f, scene %.4f) lr %.2e",
                         ckpt.step, loss, lf, ls, lr)
    finally:
        if log_fh is not None:
            log_fh.close()
    if checkpoint_path is not None:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt, rows
