"""Batch command-line entry points.

Commands: synth, preprocess, pretrain, finetune, evaluate, ablate. Every
command validates its arguments up front, writes its outputs plus a
``manifest.txt`` (full config echo, seed, input digests) into the output
directory, and never mutates its inputs. Exit codes: 0 success, 1 runtime
failure, 2 configuration error. Rerunning a command with the argv
recorded in its manifest reproduces every output byte for byte.

``ablate`` can fan independent training arms out to worker processes
(``--jobs``); rows come back in arm order, so outputs stay deterministic.
"""
from __future__ import annotations

import argparse
import multiprocessing
import shlex
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import storage
from .ablation import (
    CALIBRATION_HOURS,
    NOISE_GRID,
    SPLIT_GRID,
    calibration_sweep,
    run_bp_mask_ablation,
    run_cycle_mask_ablation,
    run_noise_ablation,
    run_split_ablation,
)
from .evaluation import (
    bland_altman,
    evaluate_subject,
    render_cohort_table,
    write_bland_altman_csv,
    write_report_csv,
)
from .losses import LossConfig
from .models import (
    BackboneConfig,
    FeatureExtractorConfig,
    build_bundle,
    load_checkpoint,
    save_checkpoint,
)
from .signals import bandpass_fir, bandpass_iir_zero_phase, make_record, window_record
from .synthetic import generate_cohort
from .training import (
    TrainConfig,
    finetune_subject,
    pretrain_cohort,
    sequential_split,
    write_epoch_log,
    write_step_losses,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    pass


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs: list[Path]):
    """Config echo + seed + input digests; no timestamps, so reruns match."""
    lines = [f"command={command}"]
    argv = getattr(args, "_argv", [])
    lines.append("argv=" + " ".join(shlex.quote(a) for a in argv))
    for key in sorted(vars(args)):
        if key.startswith("_"):
            continue
        lines.append(f"config.{key}={getattr(args, key)}")
    for path in inputs:
        path = Path(path)
        if path.is_file():
            lines.append(f"input.{path}={storage.sha256_file(path)}")
        elif path.is_dir():
            for rel, digest in storage.tree_digest(path).items():
                lines.append(f"input.{path / rel}={digest}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        reg_warmup_epochs=args.reg_warmup,
        loss=LossConfig(
            alpha=args.alpha,
            gamma=args.gamma,
            phi_w=args.phi_w,
            phi_r=args.phi_r,
            phi_a=args.phi_a,
            omega=args.omega,
        ),
        seed=args.seed,
    )


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--reg-warmup", type=int, default=4)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--phi-w", type=float, default=1.0)
    p.add_argument("--phi-r", type=float, default=10.0)
    p.add_argument("--phi-a", type=float, default=0.01)
    p.add_argument("--omega", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)


def _load_windowed_dir(data_dir: Path):
    subjects = []
    for sub in storage.list_subject_dirs(data_dir):
        if storage.is_windowed_dir(sub):
            subjects.append(storage.load_windowed(sub))
    if not subjects:
        raise ConfigError(f"{data_dir}: no windowed subjects found (run preprocess)")
    return subjects


def cmd_synth(args) -> int:
    if args.subjects < 2:
        raise ConfigError("--subjects must be >= 2 (cohort minimum)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate_cohort(
        args.subjects,
        variability=args.variability,
        duration=args.duration,
        rate=args.rate,
        seed=args.seed,
        noise_floor=args.noise,
    )
    for subj in cohort:
        storage.save_subject_dir(out / subj.subject_id, subj.abp, subj.channels)
    _write_manifest(out, "synth", args, [])
    print(f"wrote {len(cohort)} subjects to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    if not data.is_dir():
        raise ConfigError(f"{data}: not a directory")
    if any(storage.is_windowed_dir(p) for p in storage.list_subject_dirs(data)):
        raise ConfigError(f"{data}: already preprocessed (windows.idx present)")
    low, high = args.band
    if not 0 < low < high:
        raise ConfigError(f"invalid band {args.band}")
    out.mkdir(parents=True, exist_ok=True)
    n_windows = 0
    for sub in storage.list_subject_dirs(data):
        abp, channels = storage.load_subject_dir(sub)
        if args.filter == "fir":
            channels = [bandpass_fir(c, low, high) for c in channels]
        else:
            channels = [bandpass_iir_zero_phase(c, low, high) for c in channels]
        record = make_record(
            sub.name,
            channels,
            abp,
            cycles_per_window=args.cycles_per_window,
            stride=args.stride,
            align=not args.no_align,
        )
        ws = window_record(record, window_len=args.window_len)
        storage.save_windowed(out / sub.name, ws)
        n_windows += ws.n_windows
        print(f"{sub.name}: {ws.n_windows} windows")
    _write_manifest(out, "preprocess", args, [data])
    print(f"total windows: {n_windows}")
    return EXIT_OK


def _backbone_config(args) -> tuple[FeatureExtractorConfig, BackboneConfig]:
    ext = FeatureExtractorConfig(
        in_channels=args.in_channels,
        use_gradients=not args.no_gradients,
        use_morphology=not args.no_morphology,
        ptt_mode=args.ptt,
    )
    bb = BackboneConfig(kind=args.backbone, window_len=args.window_len)
    return ext, bb


def cmd_pretrain(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    subjects = _load_windowed_dir(data)
    ids = [s.subject_id for s in subjects]
    if args.holdout not in ids:
        raise ConfigError(f"--holdout {args.holdout!r} not among subjects {ids}")
    n_ch = subjects[0].inputs.shape[1]
    if args.in_channels != n_ch:
        raise ConfigError(f"--in-channels {args.in_channels} but data has {n_ch}")
    ext, bb = _backbone_config(args)
    cfg = _train_config(args)
    bundle = build_bundle(ext, bb, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    step_rows: list = []
    best, logs = pretrain_cohort(subjects, args.holdout, bundle, cfg, step_rows=step_rows)
    save_checkpoint(best, out / "pretrained.ckpt")
    write_epoch_log(out / "epochs.csv", logs)
    write_step_losses(out / "step_losses.csv", step_rows)
    _write_manifest(out, "pretrain", args, [data])
    best_val = min(l.val_loss for l in logs if l.val_loss is not None)
    print(f"pretrained on {len(ids) - 1} subjects; best val loss {best_val:.6f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    subjects = {s.subject_id: s for s in _load_windowed_dir(data)}
    if args.subject not in subjects:
        raise ConfigError(f"--subject {args.subject!r} not in {sorted(subjects)}")
    if not 0.0 < args.split < 1.0:
        raise ConfigError(f"--split must be in (0, 1), got {args.split}")
    bundle = load_checkpoint(Path(args.ckpt))
    cfg = _train_config(args)
    out.mkdir(parents=True, exist_ok=True)
    step_rows: list = []
    tuned, logs = finetune_subject(
        bundle, subjects[args.subject], args.split, cfg, step_rows=step_rows
    )
    save_checkpoint(tuned, out / "finetuned.ckpt")
    write_epoch_log(out / "epochs.csv", logs)
    write_step_losses(out / "step_losses.csv", step_rows)
    _write_manifest(out, "finetune", args, [data, Path(args.ckpt)])
    print(f"finetuned {args.subject} on split {args.split}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    subjects = {s.subject_id: s for s in _load_windowed_dir(data)}
    wanted = args.subjects.split(",") if args.subjects else sorted(subjects)
    missing = [s for s in wanted if s not in subjects]
    if missing:
        raise ConfigError(f"subjects not in data: {missing}")
    bundle = load_checkpoint(Path(args.ckpt))
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for sid in wanted:
        ws = subjects[sid]
        if args.split is not None:
            _, idx = sequential_split(ws.n_windows, args.split)
        else:
            idx = np.arange(ws.n_windows)
        report, vitals = evaluate_subject(bundle, ws, idx, collect_beats=True)
        reports.append(report)
        if vitals is not None and len(vitals[0]) >= 2:
            sbp_hat, dbp_hat, sbp_ref, dbp_ref = vitals
            write_bland_altman_csv(
                out / f"bland_altman_sbp_{sid}.csv", bland_altman(sbp_hat, sbp_ref)
            )
            write_bland_altman_csv(
                out / f"bland_altman_dbp_{sid}.csv", bland_altman(dbp_hat, dbp_ref)
            )
    write_report_csv(out / "metrics.csv", reports)
    table = render_cohort_table(reports)
    (out / "summary.txt").write_text(table + "\n")
    _write_manifest(out, "evaluate", args, [data, Path(args.ckpt)])
    print(table)
    return EXIT_OK


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v != ""]
    except ValueError as err:
        raise ConfigError(f"bad float list {text!r}") from err


def _split_arm_worker(payload):
    """One split-ablation arm in its own process: finetune + evaluate."""
    data, subject, ckpt, fraction, cfg = payload
    ws = next(
        s for s in _load_windowed_dir(Path(data)) if s.subject_id == subject
    )
    bundle = load_checkpoint(Path(ckpt))
    tuned, _ = finetune_subject(bundle, ws, fraction, cfg)
    _, test_idx = sequential_split(ws.n_windows, fraction)
    return fraction, evaluate_subject(tuned, ws, test_idx)


def cmd_ablate(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    subjects = {s.subject_id: s for s in _load_windowed_dir(data)}
    if args.subject not in subjects:
        raise ConfigError(f"--subject {args.subject!r} not in {sorted(subjects)}")
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    ws = subjects[args.subject]
    cfg = _train_config(args)
    out.mkdir(parents=True, exist_ok=True)

    def _report_rows(rows, label):
        lines = [f"{label},abp_rmse,abp_mae,abp_r,sbp_rmse,sbp_r,dbp_rmse,dbp_r,n_beats"]
        for key, rep in rows:
            lines.append(
                ",".join(
                    [
                        str(key),
                        repr(rep.waveform.rmse),
                        repr(rep.waveform.mae),
                        "" if rep.waveform.r is None else repr(rep.waveform.r),
                        repr(rep.sbp.rmse),
                        "" if rep.sbp.r is None else repr(rep.sbp.r),
                        repr(rep.dbp.rmse),
                        "" if rep.dbp.r is None else repr(rep.dbp.r),
                        str(rep.n_beats),
                    ]
                )
            )
        (out / "summary.csv").write_text("\n".join(lines) + "\n")

    if args.kind == "split":
        fractions = _parse_floats(args.fractions) if args.fractions else list(SPLIT_GRID)
        if not all(0 < f < 1 for f in fractions):
            raise ConfigError(f"fractions must be in (0, 1): {fractions}")
        if args.jobs > 1:
            payloads = [
                (str(data), args.subject, args.ckpt, f, cfg) for f in fractions
            ]
            # spawn: the jit threading layer in this process is not fork-safe
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=args.jobs, mp_context=ctx) as pool:
                rows = list(pool.map(_split_arm_worker, payloads))
        else:
            bundle = load_checkpoint(Path(args.ckpt))
            rows = run_split_ablation(bundle, ws, cfg, fractions)
        _report_rows(rows, "train_fraction")
    elif args.kind == "gaussian_noise":
        multipliers = (
            _parse_floats(args.multipliers) if args.multipliers else list(NOISE_GRID)
        )
        if any(m < 0 for m in multipliers):
            raise ConfigError("noise multipliers must be >= 0")
        tuned = load_checkpoint(Path(args.ckpt))
        _, test_idx = sequential_split(ws.n_windows, args.split)
        rows = run_noise_ablation(tuned, ws, test_idx, multipliers, seed=args.seed)
        _report_rows(rows, "multiplier")
    elif args.kind in ("mask_cycle_half", "mask_adjacent_beats"):
        tuned = load_checkpoint(Path(args.ckpt))
        _, test_idx = sequential_split(ws.n_windows, args.split)
        rows = run_cycle_mask_ablation(tuned, ws, test_idx)
        _report_rows(rows, "mask")
    elif args.kind == "mask_bp_range":
        if args.lo is None or args.hi is None or not args.lo < args.hi:
            raise ConfigError("mask_bp_range needs --lo < --hi")
        bundle = load_checkpoint(Path(args.ckpt))
        ranges = [(args.lo, args.hi)]
        rows = run_bp_mask_ablation(bundle, ws, cfg, ranges)
        _report_rows([(f"{lo}-{hi}", rep) for (lo, hi), rep in rows], "sbp_range")
    elif args.kind == "calibration_sweep":
        hours = _parse_floats(args.hours) if args.hours else list(CALIBRATION_HOURS)
        bundle = load_checkpoint(Path(args.ckpt))
        rows = calibration_sweep(bundle, ws, cfg, hours)
        lines = ["calibration_hours,deployment_hour,n_windows,abp_rmse,abp_mae"]
        for row in rows:
            rep = row["report"]
            lines.append(
                f"{row['calibration_hours']},{row['deployment_hour']},"
                f"{row['n_windows']},{rep.waveform.rmse!r},{rep.waveform.mae!r}"
            )
        (out / "summary.csv").write_text("\n".join(lines) + "\n")
    else:
        raise ConfigError(f"unknown ablation kind {args.kind!r}")
    _write_manifest(out, "ablate", args, [data] + ([Path(args.ckpt)] if args.ckpt else []))
    print(f"ablation {args.kind} complete: {out / 'summary.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abpkit",
        description="Pulsatile-to-ABP translation workflows: synthesize, preprocess, "
        "pretrain, finetune, evaluate, ablate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--subjects", type=int, default=5)
    p.add_argument("--duration", type=float, default=300.0, help="seconds per subject")
    p.add_argument("--rate", type=float, default=125.0)
    p.add_argument("--variability", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="filter, align, segment, window")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--band", type=float, nargs=2, default=[0.5, 8.0])
    p.add_argument("--filter", choices=["fir", "iir"], default="fir")
    p.add_argument("--cycles-per-window", type=int, default=4)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--window-len", type=int, default=512)
    p.add_argument("--no-align", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="cohort pretraining with holdout validation")
    p.add_argument("--data", required=True)
    p.add_argument("--holdout", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", choices=["unet", "transformer"], default="unet")
    p.add_argument("--window-len", type=int, default=512)
    p.add_argument("--in-channels", type=int, default=2)
    p.add_argument("--no-gradients", action="store_true")
    p.add_argument("--no-morphology", action="store_true")
    p.add_argument("--ptt", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="per-subject finetune from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", type=float, default=0.8)
    _add_train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a checkpoint; export Bland-Altman CSVs")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", default="")
    p.add_argument("--split", type=float, default=None, help="score only the test slice")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="robustness experiments")
    p.add_argument("--kind", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--fractions", default="")
    p.add_argument("--multipliers", default="")
    p.add_argument("--hours", default="")
    p.add_argument("--lo", type=float, default=None)
    p.add_argument("--hi", type=float, default=None)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for arms")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    args._argv = argv
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
