"""Synthetic homography pairs with correlated multi-scale descriptors.

Each source keypoint carries a latent appearance vector per scale.  The
target image sees the surviving warped keypoints with the same latents,
plus distractors and padding with fresh latents.  Every observed feature is
``latent + noise`` with independent noise per image and per scale, so
difficulty is controlled by ``sigma``.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .geometry import (
    DegenerateConfigurationError,
    GroundTruth,
    compute_groundtruth,
    dlt_homography,
    in_bounds,
    warp_or_nan,
)

NUM_SCALES = 4
SCALES = (1.0, 0.5, 0.25, 0.125)


class ConfigError(ValueError):
    pass


@dataclass
class KeypointSet:
    positions: np.ndarray                 # (M, 3): u, v, confidence
    features: list[np.ndarray]            # one (M, C_s) array per scale
    image_size: tuple[int, int]           # (width, height)

    def __len__(self) -> int:
        return len(self.positions)

    def validate(self) -> None:
        width, height = self.image_size
        u, v, c = self.positions.T
        assert np.all((u >= 0) & (u < width) & (v >= 0) & (v < height)), "keypoint out of bounds"
        assert np.all((c >= 0) & (c <= 1)), "confidence outside [0, 1]"
        assert len(self.features) == NUM_SCALES
        assert all(f.shape[0] == len(self) for f in self.features)


@dataclass
class SyntheticPair:
    source: KeypointSet
    target: KeypointSet
    h: np.ndarray
    gt: GroundTruth


@dataclass(frozen=True)
class PairConfig:
    M: int = 64
    N: int = 64
    image_size: tuple[int, int] = (640, 480)
    jitter: float = 0.25
    sigma: float = 0.3
    distractor_frac: float = 0.2
    drop_frac: float = 0.2
    scale_dims: tuple[int, ...] = (16, 16, 16, 16)
    photometric: float = 0.0
    min_separation: float = 4.0
    reproj_threshold: float = 3.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PairConfig":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        d["scale_dims"] = tuple(d["scale_dims"])
        return cls(**d)


def sample_homography(image_size, corner_jitter_frac: float = 0.25, seed=None) -> np.ndarray:
    """Random homography mapping the image corners to uniformly perturbed corners.

    Perturbations are uniform within +-jitter * min(width, height) per
    coordinate.  Non-convex corner quads and near-singular fits are resampled.
    """
    if not 0 <= corner_jitter_frac < 0.5:
        raise ConfigError("corner_jitter_frac must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    width, height = image_size
    corners = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=np.float64)
    reach = corner_jitter_frac * min(width, height)
    for _ in range(100):
        moved = corners + rng.uniform(-reach, reach, size=corners.shape)
        if not _convex_quad(moved):
            continue
        try:
            h = dlt_homography(corners, moved)
        except DegenerateConfigurationError:
            continue
        if abs(np.linalg.det(h)) > 1e-6:
            return h
    raise RuntimeError("could not sample an invertible homography in 100 attempts")


def _convex_quad(q: np.ndarray) -> bool:
    edges = np.roll(q, -1, axis=0) - q
    nxt = np.roll(edges, -1, axis=0)
    cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
    return bool(np.all(cross > 0) or np.all(cross < 0))


def _sample_points(rng, count, size, min_sep, avoid=None, avoid_radius=0.0, max_tries=200):
    """Uniform in-bounds points at least ``min_sep`` apart and ``avoid_radius`` from ``avoid``."""
    width, height = size
    pts = np.zeros((0, 2))
    avoid = np.zeros((0, 2)) if avoid is None else avoid[np.all(np.isfinite(avoid), axis=1)]
    tries = 0
    while len(pts) < count:
        tries += 1
        if tries > max_tries:
            raise ConfigError(f"cannot place {count} keypoints at {min_sep}px separation in {size}")
        cand = rng.uniform([0, 0], [width, height], size=(2 * (count - len(pts)) + 8, 2))
        for c in cand:
            if len(pts) == count:
                break
            if len(pts) and np.min(np.sum((pts - c) ** 2, axis=1)) < min_sep ** 2:
                continue
            if len(avoid) and np.min(np.sum((avoid - c) ** 2, axis=1)) < avoid_radius ** 2:
                continue
            pts = np.vstack([pts, c])
    return pts


def _latents(rng, count, dims):
    # one identity vector per keypoint, unit expected norm; every scale sees it
    width = max(dims)
    return rng.normal(0.0, 1.0 / np.sqrt(width), size=(count, width))


def _observe(rng, latent, sigma, photometric, dims):
    feats = []
    for d in dims:
        lat = latent[:, :d] * np.sqrt(max(dims) / d)
        f = lat + rng.normal(0.0, sigma, size=lat.shape)
        if photometric:
            f = f + rng.normal(0.0, photometric)
        feats.append(f)
    return feats


def generate_pair(cfg: PairConfig, seed) -> SyntheticPair:
    if cfg.M < 8 or cfg.N < 8:
        raise ConfigError("M and N must be at least 8")
    if cfg.sigma < 0:
        raise ConfigError("sigma must be non-negative")
    if len(cfg.scale_dims) != NUM_SCALES:
        raise ConfigError(f"need {NUM_SCALES} scale dims")
    width, height = cfg.image_size
    if width * height < max(cfg.M, cfg.N):
        raise ConfigError("image too small for the requested keypoint count")
    rng = np.random.default_rng(seed)
    dims = cfg.scale_dims
    h = sample_homography(cfg.image_size, cfg.jitter, rng)

    xy_s = _sample_points(rng, cfg.M, cfg.image_size, cfg.min_separation)
    conf_s = rng.uniform(0.5, 1.0, size=cfg.M)
    lat_s = _latents(rng, cfg.M, dims)

    warped = warp_or_nan(h, xy_s)
    survive = rng.random(cfg.M) >= cfg.drop_frac
    offset = rng.uniform(0, 0.5, cfg.M)[:, None] * _unit_dirs(rng, cfg.M)
    moved = warped + offset
    keep = np.flatnonzero(survive & in_bounds(moved, cfg.image_size))

    n_distract = int(round(cfg.distractor_frac * cfg.N))
    if len(keep) + n_distract > cfg.N:
        keep = np.sort(rng.permutation(keep)[: max(cfg.N - n_distract, 0)])
        n_distract = cfg.N - len(keep)
    xy_kept = moved[keep]
    n_fresh = cfg.N - len(keep)
    avoid = np.vstack([warped, xy_kept])
    xy_fresh = _sample_points(rng, n_fresh, cfg.image_size, cfg.min_separation,
                              avoid=avoid, avoid_radius=2 * cfg.reproj_threshold)
    xy_t = np.vstack([xy_kept, xy_fresh])
    conf_t = np.concatenate([conf_s[keep], rng.uniform(0.5, 1.0, size=n_fresh)])
    lat_fresh = _latents(rng, n_fresh, dims)
    lat_t = np.vstack([lat_s[keep], lat_fresh])

    source = KeypointSet(np.column_stack([xy_s, conf_s]),
                         _observe(rng, lat_s, cfg.sigma, cfg.photometric, dims), tuple(cfg.image_size))
    target = KeypointSet(np.column_stack([xy_t, conf_t]),
                         _observe(rng, lat_t, cfg.sigma, cfg.photometric, dims), tuple(cfg.image_size))
    gt = compute_groundtruth(source, target, h, cfg.reproj_threshold)
    return SyntheticPair(source, target, h, gt)


def _unit_dirs(rng, n):
    angle = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([np.cos(angle), np.sin(angle)])


def pair_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def dataset_stream(cfg: PairConfig, seed: int, count: int) -> Iterator[SyntheticPair]:
    """Pairs ``0..count-1``; pair ``i`` depends only on ``(seed, i)``."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    for i in range(count):
        yield generate_pair(cfg, pair_seed(seed, i))


class SyntheticDataset:
    """Random-access view over :func:`dataset_stream` that generates pairs on demand."""

    def __init__(self, cfg: PairConfig, seed: int, count: int):
        self.cfg, self.seed, self.count = cfg, seed, count

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> SyntheticPair:
        if not 0 <= i < self.count:
            raise IndexError(i)
        return generate_pair(self.cfg, pair_seed(self.seed, i))


# ------------------------------------------------------------- file format
#
# "SGPAIR1\0" | u64 record count | records
# record: u64 payload length | payload
# payload: arrays in a fixed order, each  u32 ndim | u64 extents... | f64 data

MAGIC = b"SGPAIR1\x00"


def _put_array(buf: io.BytesIO, a) -> None:
    a = np.array(a, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
    buf.write(struct.pack("<I", a.ndim))
    buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    buf.write(a.tobytes())


def _get_array(view: memoryview, pos: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", view, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}Q", view, pos)
    pos += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    a = np.frombuffer(view, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
    return a, pos + 8 * count


def _keypoint_arrays(k: KeypointSet) -> list:
    return [k.positions, np.asarray(k.image_size, dtype=np.float64), *k.features]


def encode_pair(pair: SyntheticPair) -> bytes:
    buf = io.BytesIO()
    gt = pair.gt
    arrays = (_keypoint_arrays(pair.source) + _keypoint_arrays(pair.target)
              + [pair.h, gt.matches.reshape(-1, 2), gt.unmatched_s, gt.unmatched_t,
                 gt.visible_s, gt.visible_t])
    for a in arrays:
        _put_array(buf, a)
    return buf.getvalue()


def decode_pair(payload: bytes) -> SyntheticPair:
    view = memoryview(payload)
    arrays, pos = [], 0
    while pos < len(view):
        a, pos = _get_array(view, pos)
        arrays.append(a)
    per_set = 2 + NUM_SCALES

    def keypoints(chunk):
        size = tuple(int(x) for x in chunk[1])
        return KeypointSet(chunk[0], list(chunk[2:]), size)

    source = keypoints(arrays[:per_set])
    target = keypoints(arrays[per_set:2 * per_set])
    h, matches, un_s, un_t, vis_s, vis_t = arrays[2 * per_set:]
    ints = lambda a: a.astype(np.int64)  # noqa: E731
    gt = GroundTruth(ints(matches).reshape(-1, 2), ints(un_s), ints(un_t), ints(vis_s), ints(vis_t))
    return SyntheticPair(source, target, h, gt)


def dataset_bytes(pairs: Sequence[SyntheticPair]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(pairs)))
    for p in pairs:
        payload = encode_pair(p)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    return buf.getvalue()


def read_dataset(path) -> list[SyntheticPair]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not an SGPAIR1 dataset")
    try:
        (count,) = struct.unpack_from("<Q", raw, len(MAGIC))
        pos = len(MAGIC) + 8
        pairs = []
        for _ in range(count):
            (length,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            if pos + length > len(raw):
                raise ValueError(f"{path}: record truncated")
            pairs.append(decode_pair(raw[pos:pos + length]))
            pos += length
    except struct.error as exc:
        raise ValueError(f"{path}: truncated dataset") from exc
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after {count} records")
    return pairs


def manifest_text(cfg: PairConfig, seed: int, count: int, **extra) -> str:
    doc = {
        "format": "SGPAIR1",
        "generator": {"config": cfg.to_dict(), "seed": seed, "count": count},
        "homography_sampler": "uniform corner jitter (stand-in distribution)",
        "visible_class_index": 0,
        **extra,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
