"""Robustness harness: data-split, BP-range, noise, and masking ablations.

Every transform here is a deterministic, pure function of its inputs and
seed; the drivers wire them to finetuning/evaluation and emit one metrics
row per experiment arm. Published cohort numbers are not asserted
anywhere - only the transforms' definitions and directional behavior on
synthetic data are testable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import MetricsReport, evaluate_subject
from .models import ModelBundle
from .signals import WindowedSubject
from .training import TrainConfig, finetune_subject, sequential_split

__all__ = [
    "AblationSpec",
    "SPLIT_GRID",
    "NOISE_GRID",
    "CALIBRATION_HOURS",
    "sequential_split",
    "mask_bp_range",
    "embed_gaussian_noise",
    "mask_cycle_half",
    "mask_adjacent_beats",
    "run_split_ablation",
    "run_bp_mask_ablation",
    "run_noise_ablation",
    "run_cycle_mask_ablation",
    "calibration_sweep",
]

SPLIT_GRID = (0.1, 0.3, 0.5, 0.7, 0.8, 0.9)
NOISE_GRID = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9)
CALIBRATION_HOURS = (3.0, 5.0, 7.0, 9.0, 12.0)
MASK_ARMS = ("pulse", "reflection", "previous", "current", "none")

ABLATION_KINDS = (
    "split",
    "calibration_sweep",
    "mask_bp_range",
    "gaussian_noise",
    "mask_cycle_half",
    "mask_adjacent_beats",
)


@dataclass(frozen=True)
class AblationSpec:
    """One experiment arm: a kind plus its kind-specific parameters."""

    kind: str
    parameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ABLATION_KINDS:
            raise ValueError(f"unknown ablation kind {self.kind!r}")
        p = self.parameters
        if self.kind == "split" and not all(0 < f < 1 for f in p.get("fractions", [0.8])):
            raise ValueError("split fractions must be in (0, 1)")
        if self.kind == "gaussian_noise":
            if any(m < 0 for m in p.get("multipliers", [0.0])):
                raise ValueError("noise multipliers must be >= 0")
        if self.kind == "mask_bp_range":
            lo, hi = p.get("lo", 0.0), p.get("hi", 1.0)
            if not lo < hi:
                raise ValueError("mask_bp_range needs lo < hi")
        if self.kind == "mask_cycle_half" and p.get("which") not in (
            "pulse",
            "reflection",
            None,
        ):
            raise ValueError("mask_cycle_half: which must be pulse or reflection")
        if self.kind == "mask_adjacent_beats" and p.get("which") not in (
            "previous",
            "current",
            None,
        ):
            raise ValueError("mask_adjacent_beats: which must be previous or current")


def mask_bp_range(
    ws: WindowedSubject, lo: float, hi: float
) -> tuple[np.ndarray, np.ndarray]:
    """Exclude from training every window with any beat SBP in [lo, hi).

    The excluded windows are exactly the test set; together the two sides
    partition the window indices. Raises when either side is empty.
    """
    if not lo < hi:
        raise ValueError(f"mask_bp_range: need lo < hi, got [{lo}, {hi})")
    in_range = np.array(
        [bool(np.any((s >= lo) & (s < hi))) for s in ws.beat_sbp], dtype=bool
    )
    test = np.flatnonzero(in_range)
    train = np.flatnonzero(~in_range)
    if len(test) == 0:
        raise ValueError(f"mask_bp_range: range [{lo}, {hi}) not represented")
    if len(train) == 0:
        raise ValueError(f"mask_bp_range: every window has a beat in [{lo}, {hi})")
    return train, test


def embed_gaussian_noise(window: np.ndarray, multiplier: float, seed: int) -> np.ndarray:
    """window + multiplier * Normal(mean(window), std(window)/2) noise.

    Multiplier 0 returns the input bit-identically.
    """
    if multiplier < 0:
        raise ValueError("embed_gaussian_noise: multiplier must be >= 0")
    window = np.asarray(window, dtype=np.float64)
    if multiplier == 0.0:
        return window
    rng = np.random.default_rng(seed)
    noise = rng.normal(window.mean(), window.std() / 2.0, size=window.shape)
    return window + multiplier * noise


def _cycle_bounds(feet: np.ndarray, window_len: int) -> list[tuple[int, int]]:
    feet = [int(round(f)) for f in feet]
    bounds = feet + [window_len]
    return [(bounds[i], bounds[i + 1]) for i in range(len(feet)) if bounds[i + 1] > bounds[i]]


def mask_cycle_half(
    window: np.ndarray, feet: np.ndarray, which: str, window_len: int | None = None
) -> np.ndarray:
    """Zero the first half of each cycle (pulse) or the second (reflection).

    Odd cycle lengths give the extra sample to the pulse half. Works on
    (len,) or (channels, len) windows.
    """
    if which not in ("pulse", "reflection"):
        raise ValueError(f"mask_cycle_half: which must be pulse|reflection, got {which!r}")
    out = np.array(window, dtype=np.float64, copy=True)
    n = out.shape[-1] if window_len is None else window_len
    for start, end in _cycle_bounds(feet, n):
        mid = start + (end - start + 1) // 2  # ceil: odd sample goes to the pulse half
        if which == "pulse":
            out[..., start:mid] = 0.0
        else:
            out[..., mid:end] = 0.0
    return out


def mask_adjacent_beats(
    window: np.ndarray, feet: np.ndarray, which: str, window_len: int | None = None
) -> np.ndarray:
    """Zero the final cycle (current) or all earlier cycles (previous)."""
    if which not in ("previous", "current"):
        raise ValueError(
            f"mask_adjacent_beats: which must be previous|current, got {which!r}"
        )
    out = np.array(window, dtype=np.float64, copy=True)
    n = out.shape[-1] if window_len is None else window_len
    bounds = _cycle_bounds(feet, n)
    if len(bounds) < 2:
        raise ValueError("mask_adjacent_beats: need at least 2 cycles in the window")
    if which == "current":
        start, end = bounds[-1]
        out[..., start:end] = 0.0
    else:
        out[..., bounds[0][0] : bounds[-1][0]] = 0.0
    return out


def _with_inputs(ws: WindowedSubject, inputs: np.ndarray) -> WindowedSubject:
    return WindowedSubject(
        subject_id=ws.subject_id,
        inputs=inputs,
        targets=ws.targets,
        aux=ws.aux,
        window_ranges=ws.window_ranges,
        window_rates=ws.window_rates,
        beat_feet=ws.beat_feet,
        beat_sbp=ws.beat_sbp,
        beat_dbp=ws.beat_dbp,
        channel_labels=ws.channel_labels,
        source_rate=ws.source_rate,
    )


def run_split_ablation(
    bundle: ModelBundle,
    ws: WindowedSubject,
    cfg: TrainConfig,
    fractions=SPLIT_GRID,
) -> list[tuple[float, MetricsReport]]:
    """Finetune/evaluate once per train fraction; one metrics row each."""
    rows = []
    for fraction in fractions:
        tuned, _ = finetune_subject(bundle, ws, fraction, cfg)
        _, test_idx = sequential_split(ws.n_windows, fraction)
        rows.append((fraction, evaluate_subject(tuned, ws, test_idx)))
    return rows


def run_bp_mask_ablation(
    bundle: ModelBundle,
    ws: WindowedSubject,
    cfg: TrainConfig,
    ranges: list[tuple[float, float]],
) -> list[tuple[tuple[float, float], MetricsReport]]:
    """Train excluding each SBP range; evaluate inside the excluded range."""
    rows = []
    for lo, hi in ranges:
        train_idx, test_idx = mask_bp_range(ws, lo, hi)
        tuned = _finetune_on_indices(bundle, ws, train_idx, cfg)
        rows.append(((lo, hi), evaluate_subject(tuned, ws, test_idx)))
    return rows


def _finetune_on_indices(
    bundle: ModelBundle, ws: WindowedSubject, train_idx: np.ndarray, cfg: TrainConfig
) -> ModelBundle:
    """Finetune on an explicit window subset (used by the BP-range arm)."""
    from . import autodiff as ad
    from .models import reinit_extractor
    from .training import AdamState, _batches, _subject_loss, fit_target_affine

    tuned = reinit_extractor(bundle, cfg.seed)
    tuned.target_mean, tuned.target_std = fit_target_affine(ws.targets[train_idx])
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    for _epoch in range(cfg.epochs):
        for idx in _batches(rng, np.asarray(train_idx), cfg.batch_size):
            with ad.Tape() as tape:
                bound = {k: tape.leaf(v) for k, v in tuned.params.items()}
                loss, _ = _subject_loss(tuned, bound, ws, idx, cfg, training=True)
            grads = tape.backward(loss)
            named = {k: grads[bound[k]] for k in tuned.params}
            tuned.params = adam.step(tuned.params, named, cfg.lr, cfg.weight_decay)
    return tuned


def run_noise_ablation(
    tuned: ModelBundle,
    ws: WindowedSubject,
    test_idx: np.ndarray,
    multipliers=NOISE_GRID,
    seed: int = 0,
) -> list[tuple[float, MetricsReport]]:
    """Evaluate one already-finetuned model on noise-augmented test inputs.

    Noise is drawn per window (seed + window index) so each arm is
    reproducible sample by sample.
    """
    rows = []
    test_idx = np.asarray(test_idx, dtype=int)
    for multiplier in multipliers:
        inputs = ws.inputs.copy()
        for wi in test_idx:
            inputs[wi] = embed_gaussian_noise(ws.inputs[wi], multiplier, seed + int(wi))
        rows.append((multiplier, evaluate_subject(tuned, _with_inputs(ws, inputs), test_idx)))
    return rows


def run_cycle_mask_ablation(
    tuned: ModelBundle,
    ws: WindowedSubject,
    test_idx: np.ndarray,
    arms=MASK_ARMS,
) -> list[tuple[str, MetricsReport]]:
    """Evaluate the finetuned model under each cycle-masking arm."""
    rows = []
    for arm in arms:
        inputs = ws.inputs.copy()
        if arm != "none":
            for wi in np.asarray(test_idx, dtype=int):
                feet = ws.beat_feet[wi]
                if arm in ("pulse", "reflection"):
                    inputs[wi] = mask_cycle_half(ws.inputs[wi], feet, arm)
                else:
                    inputs[wi] = mask_adjacent_beats(ws.inputs[wi], feet, arm)
        masked = _with_inputs(ws, inputs)
        rows.append((arm, evaluate_subject(tuned, masked, np.asarray(test_idx, dtype=int))))
    return rows


def calibration_sweep(
    bundle: ModelBundle,
    ws: WindowedSubject,
    cfg: TrainConfig,
    hours: list[float],
    horizon_hours: float = 12.0,
    bin_hours: float = 1.0,
) -> list[dict]:
    """Finetune on the first h hours, then score each later time bin.

    Returns one row per (calibration hours, deployment bin) with the bin's
    waveform metrics - the decay curve of performance over deployment time.
    """
    durations = np.array([ws.duration_of(i + 1) for i in range(ws.n_windows)])
    total_h = durations[-1] / 3600.0
    if max(hours) >= total_h:
        raise ValueError(
            f"calibration_sweep: record has {total_h:.3f} h, cannot calibrate on {max(hours)} h"
        )
    rows = []
    for h in hours:
        n_train = int(np.searchsorted(durations, h * 3600.0, side="right"))
        if n_train < 1 or n_train >= ws.n_windows:
            raise ValueError(f"calibration_sweep: {h} h of calibration is not usable")
        tuned = _finetune_on_indices(bundle, ws, np.arange(n_train), cfg)
        start_h = durations[n_train - 1] / 3600.0
        n_bins = int(np.ceil(min(horizon_hours, total_h - start_h) / bin_hours))
        for b in range(max(n_bins, 1)):
            lo_t = (start_h + b * bin_hours) * 3600.0
            hi_t = (start_h + (b + 1) * bin_hours) * 3600.0
            sel = np.flatnonzero((durations > lo_t) & (durations <= hi_t))
            sel = sel[sel >= n_train]
            if len(sel) == 0:
                continue
            report = evaluate_subject(tuned, ws, sel)
            rows.append(
                {
                    "calibration_hours": h,
                    "deployment_hour": b + 1,
                    "n_windows": len(sel),
                    "report": report,
                }
            )
    return rows
