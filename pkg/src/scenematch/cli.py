"""Command-line entry point: ``gen``, ``train``, ``match``, ``eval`` and ``inspect``.

Exit status is 0 on success, 1 for usage errors (the message names the flag)
and 2 for runtime failures.  Every output file is written to a temporary
name and renamed into place, and every command leaves a ``<output>.run.json``
manifest with the configuration, seed and input hashes needed to replay it.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .evaluation import evaluate_baseline, evaluate_model
from .model import predict
from .render import side_by_side
from .synth import PairConfig, dataset_bytes, dataset_stream, manifest_text, read_dataset
from .training import TrainConfig, atomic_write, load_checkpoint, train

log = logging.getLogger("scenematch")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _existing(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file {path!r}")
    return p


def _write_manifest(primary: Path, args, config: dict, seed, started: float, **hashes) -> None:
    doc = {
        "command": args.command,
        "argv": args.argv,
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
        **hashes,
    }
    atomic_write(f"{primary}.run.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ gen

_PAIR_FLAGS = {
    "M": int, "N": int, "jitter": float, "sigma": float, "distractor_frac": float,
    "drop_frac": float, "photometric": float, "min_separation": float, "reproj_threshold": float,
}


def _add_pair_flags(p: argparse.ArgumentParser) -> None:
    for name, kind in _PAIR_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind)
    p.add_argument("--image-size", type=_int_tuple, help="width,height")
    p.add_argument("--scale-dims", type=_int_tuple, help="four comma-separated widths")


def _pair_config(args) -> PairConfig:
    kw = {k: getattr(args, k) for k in _PAIR_FLAGS if getattr(args, k) is not None}
    if args.image_size is not None:
        if len(args.image_size) != 2:
            raise UsageError("--image-size takes width,height")
        kw["image_size"] = args.image_size
    if args.scale_dims is not None:
        kw["scale_dims"] = args.scale_dims
    return PairConfig(**kw)


def cmd_gen(args) -> None:
    started = time.time()
    if args.pairs < 1:
        raise UsageError("--pairs must be at least 1")
    cfg = _pair_config(args)
    out = Path(args.out)
    atomic_write(out, dataset_bytes(list(dataset_stream(cfg, args.seed, args.pairs))))
    atomic_write(f"{out}.manifest.json", manifest_text(cfg, args.seed, args.pairs))
    _write_manifest(out, args, cfg.to_dict(), args.seed, started, dataset_sha256=_sha256(out))
    log.info("wrote %d pairs to %s", args.pairs, out)


# ---------------------------------------------------------------- train

_TRAIN_FLAGS = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "scale_dims"}
_CASTS = {"int": int, "float": float}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for name, kind in _TRAIN_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=_CASTS[kind])
    p.add_argument("--scale-dims", type=_int_tuple, help="defaults to the dataset's widths")


def cmd_train(args) -> None:
    started = time.time()
    data_path = _existing(args.data, "--data")
    pairs = read_dataset(data_path)
    widths = tuple(f.shape[1] for f in pairs[0].source.features)
    resume = None
    if args.resume is not None:
        resume = load_checkpoint(_existing(args.resume, "--resume"))
        cfg = resume.config
    else:
        kw = {k: getattr(args, k) for k in _TRAIN_FLAGS if getattr(args, k) is not None}
        kw["scale_dims"] = args.scale_dims or widths
        try:
            cfg = TrainConfig(**kw)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if tuple(cfg.scale_dims) != widths:
        raise UsageError(f"--scale-dims {cfg.scale_dims} does not match the dataset widths {widths}")
    out = Path(args.out)
    log_path = Path(args.log) if args.log else Path(f"{out}.log.csv")
    ckpt, _ = train(cfg, pairs, checkpoint_path=out, log_path=log_path, resume=resume, until=args.until)
    hashes = {"dataset_sha256": _sha256(data_path), "checkpoint_sha256": _sha256(out)}
    if args.resume is not None:
        hashes["resumed_from_sha256"] = _sha256(args.resume)
    _write_manifest(out, args, cfg.to_dict(), cfg.seed, started, **hashes)
    log.info("trained to step %d; checkpoint %s", ckpt.step, out)


# ---------------------------------------------------------- match/inspect

def _load_pair(args):
    data_path = _existing(args.data, "--data")
    pairs = read_dataset(data_path)
    if not 0 <= args.pair < len(pairs):
        raise UsageError(f"--pair must lie in [0, {len(pairs)})")
    return data_path, pairs[args.pair]


def _num(x) -> str:
    return repr(float(x))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def cmd_match(args) -> None:
    started = time.time()
    ckpt_path = _existing(args.checkpoint, "--checkpoint")
    data_path, pair = _load_pair(args)
    ckpt = load_checkpoint(ckpt_path)
    pred = predict(ckpt.params, pair, ckpt.config.model_config())
    ps, pt = pair.source.positions, pair.target.positions
    rows = [(i, j, _num(ps[i, 0]), _num(ps[i, 1]), _num(pt[j, 0]), _num(pt[j, 1]), _num(c))
            for i, j, c in pred.matches]
    out = Path(args.out)
    atomic_write(out, _csv_text(("i", "j", "u_s", "v_s", "u_t", "v_t", "confidence"), rows))
    if args.svg:
        atomic_write(args.svg, side_by_side(ps, pair.source.image_size, pt, pair.target.image_size,
                                            pred.matches, title=f"pair {args.pair}: {len(rows)} matches"))
    _write_manifest(out, args, {"pair": args.pair, **ckpt.config.to_dict()}, ckpt.config.seed, started,
                    dataset_sha256=_sha256(data_path), checkpoint_sha256=_sha256(ckpt_path))


def cmd_inspect(args) -> None:
    started = time.time()
    ckpt_path = _existing(args.checkpoint, "--checkpoint")
    data_path, pair = _load_pair(args)
    ckpt = load_checkpoint(ckpt_path)
    pred = predict(ckpt.params, pair, ckpt.config.model_config())
    ps, pt = pair.source.positions, pair.target.positions
    rows = [("source", i, "", _num(u), _num(v), "", "", _num(pred.vis_s[i, 0]), "")
            for i, (u, v, _) in enumerate(ps)]
    rows += [("target", "", j, "", "", _num(u), _num(v), _num(pred.vis_t[j, 0]), "")
             for j, (u, v, _) in enumerate(pt)]
    rows += [("match", i, j, _num(ps[i, 0]), _num(ps[i, 1]), _num(pt[j, 0]), _num(pt[j, 1]), "", _num(c))
             for i, j, c in pred.matches]
    header = ("kind", "index_s", "index_t", "u_s", "v_s", "u_t", "v_t", "p_visible", "confidence")
    out = Path(args.out)
    atomic_write(out, _csv_text(header, rows))
    svg_path = args.svg or f"{out}.svg"
    atomic_write(svg_path, side_by_side(ps, pair.source.image_size, pt, pair.target.image_size, pred.matches,
                                        pred.vis_s[:, 0], pred.vis_t[:, 0],
                                        title=f"pair {args.pair}: visibility (green = visible), "
                                              f"{len(pred.matches)} matches"))
    _write_manifest(out, args, {"pair": args.pair, **ckpt.config.to_dict()}, ckpt.config.seed, started,
                    dataset_sha256=_sha256(data_path), checkpoint_sha256=_sha256(ckpt_path))


# ----------------------------------------------------------------- eval

def cmd_eval(args) -> None:
    started = time.time()
    data_path = _existing(args.data, "--data")
    hashes = {}
    if args.baseline is None:
        ckpt_path = _existing(args.checkpoint, "--checkpoint")
        hashes["checkpoint_sha256"] = _sha256(ckpt_path)
    elif args.checkpoint is not None:
        raise UsageError("--checkpoint and --baseline are mutually exclusive")
    pairs = read_dataset(data_path)
    if args.baseline is None:
        ckpt = load_checkpoint(ckpt_path)
        report = evaluate_model(ckpt.params, ckpt.config.model_config(), pairs, not args.no_homography)
        config, seed = ckpt.config.to_dict(), ckpt.config.seed
    else:
        report = evaluate_baseline(args.baseline, pairs, not args.no_homography)
        config, seed = {"baseline": args.baseline}, None
    out = Path(args.out)
    atomic_write(out, report.to_json())
    atomic_write(args.mma_csv or f"{out}.mma.csv", report.mma_csv())
    _write_manifest(out, args, config, seed, started, dataset_sha256=_sha256(data_path), **hashes)
    log.info("precision %.3f recall %.3f f1 %.3f", report.precision, report.recall, report.f1)


# -------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scenematch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    gen = sub.add_parser("gen", help="write a synthetic dataset")
    gen.add_argument("--pairs", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    _add_pair_flags(gen)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a matcher on a dataset file")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--log", help="metrics CSV (default <out>.log.csv)")
    tr.add_argument("--resume", help="continue from this checkpoint (its config is used)")
    tr.add_argument("--until", type=int, help="stop after this step")
    _add_train_flags(tr)
    tr.set_defaults(func=cmd_train)

    for name, func, help_text in (("match", cmd_match, "match one pair and write CSV/SVG"),
                                  ("inspect", cmd_inspect, "dump visibility and matches for one pair")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint")
        p.add_argument("--data", required=True)
        p.add_argument("--pair", type=int, default=0)
        p.add_argument("--out", required=True)
        p.add_argument("--svg")
        p.set_defaults(func=func)

    ev = sub.add_parser("eval", help="evaluate a checkpoint or a baseline")
    ev.add_argument("--data", required=True)
    ev.add_argument("--checkpoint")
    ev.add_argument("--baseline", choices=("nn", "mnn"))
    ev.add_argument("--out", required=True, help="report JSON")
    ev.add_argument("--mma-csv", help="per-threshold CSV (default <out>.mma.csv)")
    ev.add_argument("--no-homography", action="store_true", help="skip RANSAC and the AUC")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        argv = sys.argv[1:] if argv is None else list(argv)
        args = parser.parse_args(argv)
        args.argv = argv
        if args.command is None:
            raise UsageError("a subcommand is required: gen, train, match, eval or inspect")
    except UsageError as exc:
        print(f"scenematch: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"scenematch {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report and exit 2
        print(f"scenematch {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
