"""Command-line entry point: ``acdc {synth,dataset,train,eval,bench}``.

Exit codes: 0 success, 1 user or configuration error, 2 internal error
(including training divergence).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as cfgmod
from .baseline import BaselineController, DetectorController, read_external_detections
from .controllers import ExpertController, mean_count_controller, static_controller
from .dataset import (
    DatasetManifest,
    generate_pairs,
    label_histogram,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .errors import AcdcError, CheckpointError, ConfigError, InvalidInputError, LoadError, TrainingDiverged
from .evaluation import ComparisonReport, emit_report, episode_eval, static_eval
from .geometry import CameraIntrinsics, CameraState
from .model import NetworkController, build_network
from .sim import load_sequence, run_episode, synthesize_sequence, write_sequence
from .training import benchmark_inference, load_checkpoint, train

log = logging.getLogger("acdc")
SOURCES_FILE = "sources.json"


def _size(text: str):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None


def _pair(text: str):
    try:
        a, b = text.split(",")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acdc", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML/JSON run configuration file")
    p.add_argument("--preset", choices=("full", "desk"), default="full")
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config file)")
    p.add_argument("--fov", type=_size, help="camera FoV, e.g. 320x240")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic annotated sequence")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--targets", type=int)
    s.add_argument("--world", type=_size)
    s.add_argument("--max-speed", type=float)
    s.add_argument("--sequence-id")

    d = sub.add_parser("dataset", help="generate an expert state-action dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--source", action="append", default=[], help="sequence directory (repeatable)")
    d.add_argument("--n-samples", type=int)
    d.add_argument("--split", type=float, dest="train_fraction")
    d.add_argument("--no-store-source", action="store_true",
                   help="do not copy synthesized source sequences next to the dataset")

    t = sub.add_parser("train", help="train ACDCNet on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--decay-factor", type=float)
    t.add_argument("--decay-every", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--no-balance", action="store_true")
    t.add_argument("--nondeterministic", action="store_true")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--source", action="append", default=[],
                   help="source sequence directories for translation augmentation")

    e = sub.add_parser("eval", help="compare controllers statically and in closed loop")
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--dataset", help="dataset whose test split is used for static evaluation")
    e.add_argument("--sequence", action="append", default=[])
    e.add_argument("--seeds", type=lambda s: tuple(int(v) for v in s.split(",")))
    e.add_argument("--start", type=_pair, help="initial FoV origin X,Y")
    e.add_argument("--miss-prob", type=float)
    e.add_argument("--center-sigma", type=float)
    e.add_argument("--size-sigma", type=float)
    e.add_argument("--fp-rate", type=float)
    e.add_argument("--detections", help="external detections file replayed by the baseline")
    e.add_argument("--workers", type=int)

    b = sub.add_parser("bench", help="throughput of ACDCNet and the baseline pipeline")
    b.add_argument("--checkpoint")
    b.add_argument("--frames", type=int)
    b.add_argument("--repeats", type=int)
    b.add_argument("--out")
    return p


def resolve_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_run_config(args.config, preset=args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.fov is not None:
        cfg.camera.fov_width, cfg.camera.fov_height = args.fov
    cfg.network.input_width, cfg.network.input_height = cfg.camera.fov_width, cfg.camera.fov_height
    cfg.train.seed = cfg.seed
    cfg.network.seed = cfg.seed
    cfg.detector.seed = cfg.seed
    return cfg


def _set(obj, attr, value):
    if value is not None:
        setattr(obj, attr, value)


def _load_sources(paths) -> dict:
    seqs = [load_sequence(p) for p in paths]
    return {s.sequence_id: s for s in seqs}


def cmd_synth(args, cfg) -> int:
    sc = cfg.synth
    _set(sc, "n_frames", args.frames)
    _set(sc, "n_targets", args.targets)
    _set(sc, "max_speed", args.max_speed)
    _set(sc, "sequence_id", args.sequence_id)
    if args.world:
        sc.world_width, sc.world_height = args.world
    seq = synthesize_sequence(sc, seed=cfg.seed)
    out = write_sequence(seq, args.out)
    cfgmod.write_snapshot(cfg, out, {"command": "synth"})
    print(f"sequence {seq.sequence_id}: {len(seq)} frames, {sc.n_targets if sc.targets is None else len(sc.targets)} "
          f"targets, world {seq.world_width}x{seq.world_height} -> {out}")
    return 0


def _histogram_text(samples, bins) -> str:
    lines = []
    for axis, (counts, edges) in label_histogram(samples, bins).items():
        lines.append(f"{axis} displacement distribution:")
        peak = max(int(counts.max()), 1)
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            lines.append(f"  [{lo:+.2f}, {hi:+.2f}) {int(c):6d} {'#' * int(round(40 * c / peak))}")
    return "\n".join(lines)


def cmd_dataset(args, cfg) -> int:
    intr = cfg.camera.intrinsics()
    _set(cfg.dataset, "n_samples", args.n_samples)
    _set(cfg.dataset, "train_fraction", args.train_fraction)
    out = Path(args.out)
    if args.source:
        seqs = [load_sequence(p) for p in args.source]
        if not args.no_store_source:
            # training re-crops these frames for translation augmentation
            out.mkdir(parents=True, exist_ok=True)
            (out / SOURCES_FILE).write_text(json.dumps([str(Path(p).resolve()) for p in args.source]) + "\n")
    else:
        seqs = [synthesize_sequence(cfg.synth, seed=cfg.seed)]
        if not args.no_store_source:
            for s in seqs:
                write_sequence(s, out / "sources" / s.sequence_id)
    n = cfg.dataset.n_samples
    per = [n // len(seqs) + (1 if k < n % len(seqs) else 0) for k in range(len(seqs))]
    samples = []
    for k, (seq, m) in enumerate(zip(seqs, per)):
        if m:
            samples += generate_pairs(seq, intr, m, seed=cfg.seed + 7919 * k)
    manifest = split_dataset(samples, cfg.dataset.train_fraction, seed=cfg.seed, intrinsics=intr)
    write_dataset(manifest, out)
    cfgmod.write_snapshot(cfg, out, {"command": "dataset",
                                     "sources": [s.sequence_id for s in seqs]})
    print(f"{len(samples)} samples: {len(manifest.indices('train'))} train / "
          f"{len(manifest.indices('test'))} test -> {out}")
    print(_histogram_text(samples, cfg.dataset.histogram_bins))
    return 0


def cmd_train(args, cfg) -> int:
    tc = cfg.train
    _set(tc, "epochs", args.epochs)
    _set(tc, "batch_size", args.batch_size)
    _set(tc, "initial_lr", args.lr)
    _set(tc, "lr_decay_factor", args.decay_factor)
    _set(tc, "lr_decay_every", args.decay_every)
    _set(tc, "checkpoint_every", args.checkpoint_every)
    if args.no_augment:
        tc.augment = False
    if args.no_balance:
        tc.balance = False
    if args.nondeterministic:
        tc.deterministic = False

    manifest = read_dataset(args.dataset)
    intr = manifest.intrinsics
    cfg.camera.fov_width, cfg.camera.fov_height = intr.fov_width, intr.fov_height
    cfg.network.input_width, cfg.network.input_height = intr.fov_width, intr.fov_height
    source_dirs = list(args.source)
    stored = Path(args.dataset) / "sources"
    listed = Path(args.dataset) / SOURCES_FILE
    if not source_dirs and stored.is_dir():
        source_dirs = sorted(str(p) for p in stored.iterdir() if p.is_dir())
    elif not source_dirs and listed.exists():
        source_dirs = json.loads(listed.read_text())
    sources = _load_sources(source_dirs) if source_dirs else None

    print("learning-rate schedule: " + ", ".join(
        f"epoch {e}: {tc.lr(e):.6g}" for e in sorted({0, 4, 5, 10, max(tc.epochs - 1, 0)})))
    net = build_network(cfg.network)
    out = Path(args.out)
    cfgmod.write_snapshot(cfg, out, {"command": "train", "dataset": str(args.dataset)})

    def report(rec):
        if rec["epoch"] % 10 == 0 or rec["epoch"] == tc.epochs - 1:
            val = "" if rec["val_loss"] is None else f" val {rec['val_loss']:.4f}"
            print(f"epoch {rec['epoch']:4d} lr {rec['lr']:.6g} loss {rec['train_loss']:.4f}{val}", flush=True)

    try:
        res = train(net, manifest, tc, cfg.augmentation, sources=sources, out_dir=out,
                    resume=args.resume, on_epoch=report)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; diagnostic checkpoint {exc.checkpoint_path}", file=sys.stderr)
        return 2
    print(f"trained {res.epochs_completed} epochs; checkpoint {res.checkpoint_path}")
    return 0


def _static_manifest(args, cfg, intr, seq) -> Optional[DatasetManifest]:
    if args.dataset:
        return read_dataset(args.dataset)
    samples = generate_pairs(seq, intr, cfg.eval.test_samples, seed=cfg.seed + 104729)
    return DatasetManifest(intr, samples, ["test"] * len(samples), seed=cfg.seed)


def cmd_eval(args, cfg) -> int:
    det = cfg.detector
    _set(det, "miss_prob", args.miss_prob)
    _set(det, "center_sigma", args.center_sigma)
    _set(det, "size_sigma", args.size_sigma)
    _set(det, "false_positive_rate", args.fp_rate)
    _set(cfg.eval, "seeds", args.seeds)
    _set(cfg.eval, "workers", args.workers)
    if args.start:
        cfg.eval.start_x, cfg.eval.start_y = args.start

    net = None
    if args.checkpoint:
        net, _ = load_checkpoint(args.checkpoint)
        cfg.camera.fov_width, cfg.camera.fov_height = net.config.input_width, net.config.input_height
    intr = cfg.camera.intrinsics()
    seqs = [load_sequence(p) for p in args.sequence]
    if not seqs:
        seqs = [synthesize_sequence(cfg.synth, seed=cfg.seed + 1000)]
    external = read_external_detections(args.detections) if args.detections else None

    manifest = _static_manifest(args, cfg, intr, seqs[0])
    if manifest.intrinsics.size != intr.size:
        raise InvalidInputError(f"dataset FoV {manifest.intrinsics.size} differs from evaluation FoV {intr.size}")
    train_counts = [s.label.count for s in (manifest.train or manifest.test)]
    static_ctrls = [ExpertController(), static_controller(),
                    mean_count_controller(float(np.mean(train_counts)) if train_counts else 0.0),
                    DetectorController(intr, det, name="detector")]
    if net is not None:
        static_ctrls.insert(0, NetworkController(net))
    report = ComparisonReport()
    for c in static_ctrls:
        report.static.append(static_eval(c, manifest))

    factories = {}
    if net is not None:
        factories["acdcnet"] = lambda: NetworkController(net)
    factories["baseline"] = lambda: BaselineController(intr, det, cfg.lifecycle, external=external)
    factories["static"] = static_controller
    W, H = seqs[0].world_size
    start = CameraState(cfg.eval.start_x if cfg.eval.start_x is not None else (W - intr.fov_width) // 2,
                        cfg.eval.start_y if cfg.eval.start_y is not None else (H - intr.fov_height) // 2)
    seeds = cfg.eval.seeds if cfg.eval.seeds is not None else (cfg.seed,)
    ep = episode_eval(factories, seqs, intr, start, seeds=seeds, workers=cfg.eval.workers)
    report.episodes, report.episode_seeds = ep.episodes, ep.episode_seeds
    for name in dict.fromkeys(r.controller_name for r in report.episodes):
        fps = [r.throughput for r in report.episodes if r.controller_name == name and r.steps]
        report.throughput.append({"controller": name, "mean_fps": float(np.mean(fps)) if fps else None,
                                  "std_fps": float(np.std(fps)) if fps else None, "runs": len(fps)})
    paths = emit_report(report, args.out)
    cfgmod.write_snapshot(cfg, args.out, {"command": "eval", "checkpoint": args.checkpoint})

    print("static evaluation (test split):")
    for r in report.static_rows():
        print(f"  {r['controller']:<12} pan {r['pan_mae']:.4f}  tilt {r['tilt_mae']:.4f}  count {r['count_mae']:.4f}")
    print("closed-loop episodes:")
    for r in report.episode_rows():
        flag = "" if r["complete"] else "  (aborted)"
        print(f"  {r['controller']:<12} {r['sequence_id']:<12} seed {r['seed']}: mean visible "
              f"{r['mean_visible']:.3f}, with target {r['fraction_with_target']:.3f}{flag}")
    print(f"wrote {len(paths)} files to {args.out}")
    return 0


def _baseline_fps(intr, cfg, n_frames) -> float:
    sc = cfgmod.SynthConfig(**{**cfg.synth.__dict__, "n_frames": n_frames})
    seq = synthesize_sequence(sc, seed=cfg.seed)
    start = CameraState((seq.world_width - intr.fov_width) // 2, (seq.world_height - intr.fov_height) // 2)
    rep = run_episode(seq, BaselineController(intr, cfg.detector, cfg.lifecycle), start, intr)
    return rep.throughput


def cmd_bench(args, cfg) -> int:
    _set(cfg.bench, "n_frames", args.frames)
    _set(cfg.bench, "repeats", args.repeats)
    if args.checkpoint:
        net, _ = load_checkpoint(args.checkpoint)
    else:
        net = build_network(cfg.network)
    intr = CameraIntrinsics(net.config.input_width, net.config.input_height)
    runs = {"acdcnet": [], "baseline": []}
    meta = None
    for _ in range(cfg.bench.repeats):
        meta = benchmark_inference(net, cfg.bench.n_frames)
        runs["acdcnet"].append(meta["fps"])
        runs["baseline"].append(_baseline_fps(intr, cfg, cfg.bench.n_frames))
    rows = [{"controller": k, "mean_fps": float(np.mean(v)), "std_fps": float(np.std(v)), "runs": len(v)}
            for k, v in runs.items()]
    print(f"input {meta['input_width']}x{meta['input_height']}, {meta['parameters']} parameters, "
          f"torch {meta['torch']} on {meta['processor']} ({meta['threads']} threads)")
    print(f"{'method':<10} {'mean FPS':>10} {'std':>8} {'runs':>5}")
    for r in rows:
        print(f"{r['controller']:<10} {r['mean_fps']:10.2f} {r['std_fps']:8.2f} {r['runs']:5d}")
    print(f"originally reported: ~{meta['reference_fps']:.0f} FPS for ACDCNet on a CPU "
          "(different hardware; not comparable)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = ComparisonReport(throughput=rows)
        emit_report(report, out, include_steps=False)
        (out / "bench_environment.json").write_text(json.dumps(meta, indent=2) + "\n")
        cfgmod.write_snapshot(cfg, out, {"command": "bench"})
    return 0


COMMANDS = {"synth": cmd_synth, "dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, InvalidInputError, LoadError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AcdcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
