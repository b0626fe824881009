"""Metrics: waveform scores, derived per-beat vitals, Bland-Altman export.

Predicted waveforms are segmented with the same foot/peak rules as the
reference so systolic/diastolic series can be compared beat for beat.
Reports carry RMSE, MAE, and Pearson's r per target (waveform, SBP, DBP);
cohorts aggregate per-subject values into mean (SD) cells.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ModelBundle
from .signals import (
    BEAT_PAIRING_TOLERANCE_S,
    CardiacCycle,
    NoCyclesError,
    Waveform,
    WindowedSubject,
    segment_cycles,
)
from .training import predict_windows

__all__ = [
    "TargetMetrics",
    "MetricsReport",
    "BlandAltman",
    "derive_vitals",
    "score",
    "bland_altman",
    "evaluate_subject",
    "aggregate_reports",
    "format_mean_sd",
    "render_cohort_table",
    "write_report_csv",
]


@dataclass(frozen=True)
class TargetMetrics:
    """RMSE/MAE in the target's units; r is None when undefined (constant)."""

    rmse: float
    mae: float
    r: float | None

    def __post_init__(self):
        if self.rmse < 0 or self.mae < 0:
            raise ValueError("rmse and mae must be non-negative")
        if self.rmse + 1e-12 < self.mae:
            raise ValueError("rmse must be >= mae (power-mean inequality)")
        if self.r is not None and not -1.0 - 1e-12 <= self.r <= 1.0 + 1e-12:
            raise ValueError(f"r out of range: {self.r}")


@dataclass(frozen=True)
class MetricsReport:
    subject_id: str
    waveform: TargetMetrics
    sbp: TargetMetrics
    dbp: TargetMetrics
    n_beats: int = 0


@dataclass(frozen=True)
class BlandAltman:
    bias: float
    loa_low: float
    loa_high: float
    table: np.ndarray  # (n, 2) columns: mean, diff


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        return None  # undefined, not 0: a constant series has no correlation
    ac = a - a.mean()
    bc = b - b.mean()
    return float((ac * bc).sum() / np.sqrt((ac * ac).sum() * (bc * bc).sum()))


def _target_metrics(pred: np.ndarray, ref: np.ndarray) -> TargetMetrics:
    err = pred - ref
    return TargetMetrics(
        rmse=float(np.sqrt(np.mean(err * err))),
        mae=float(np.mean(np.abs(err))),
        r=_pearson(pred, ref),
    )


def derive_vitals(
    yhat: Waveform,
    reference_cycles: list[CardiacCycle],
    tolerance_s: float = BEAT_PAIRING_TOLERANCE_S,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-beat (sbp_hat, dbp_hat, sbp_ref, dbp_ref), matched by feet.

    The prediction is segmented with the standard foot rules; each
    predicted cycle pairs with the nearest reference foot within the
    tolerance and unmatched cycles are dropped.
    """
    pred_cycles = segment_cycles(yhat)
    ref_feet = np.array([c.start_idx for c in reference_cycles], dtype=float) / yhat.rate
    sbp_hat, dbp_hat, sbp_ref, dbp_ref = [], [], [], []
    for c in pred_cycles:
        t_foot = c.start_idx / yhat.rate
        k = int(np.argmin(np.abs(ref_feet - t_foot)))
        if abs(ref_feet[k] - t_foot) > tolerance_s:
            continue
        sbp_hat.append(c.sbp_value)
        dbp_hat.append(c.dbp_value)
        sbp_ref.append(reference_cycles[k].sbp_value)
        dbp_ref.append(reference_cycles[k].dbp_value)
    if not sbp_hat:
        raise ValueError("derive_vitals: zero matched cycles")
    return (
        np.asarray(sbp_hat),
        np.asarray(dbp_hat),
        np.asarray(sbp_ref),
        np.asarray(dbp_ref),
    )


def score(
    yhat: np.ndarray,
    y: np.ndarray,
    vitals: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None,
    subject_id: str = "",
) -> MetricsReport:
    """RMSE/MAE/r for the waveform pair and, when given, the vitals series."""
    yhat = np.asarray(yhat, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if yhat.shape != y.shape:
        raise ValueError(f"score: length mismatch {yhat.shape} vs {y.shape}")
    waveform = _target_metrics(yhat, y)
    if vitals is None:
        empty = TargetMetrics(0.0, 0.0, None)
        return MetricsReport(subject_id, waveform, empty, empty, n_beats=0)
    sbp_hat, dbp_hat, sbp_ref, dbp_ref = vitals
    return MetricsReport(
        subject_id=subject_id,
        waveform=waveform,
        sbp=_target_metrics(sbp_hat, sbp_ref),
        dbp=_target_metrics(dbp_hat, dbp_ref),
        n_beats=len(sbp_hat),
    )


def bland_altman(pred: np.ndarray, ref: np.ndarray) -> BlandAltman:
    """Bias and 1.96-population-SD limits of agreement, plus the point table."""
    pred = np.asarray(pred, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if pred.shape != ref.shape or pred.ndim != 1:
        raise ValueError(f"bland_altman: length mismatch {pred.shape} vs {ref.shape}")
    if pred.size < 2:
        raise ValueError("bland_altman: need at least 2 points")
    diff = pred - ref
    means = (pred + ref) / 2.0
    bias = float(diff.mean())
    spread = 1.96 * float(diff.std())
    return BlandAltman(
        bias=bias,
        loa_low=bias - spread,
        loa_high=bias + spread,
        table=np.column_stack([means, diff]),
    )


def write_bland_altman_csv(path, ba: BlandAltman) -> None:
    with open(path, "w") as fh:
        fh.write("mean_mmHg,diff_mmHg\n")
        for mean, diff in ba.table:
            fh.write(f"{float(mean)!r},{float(diff)!r}\n")


def evaluate_subject(
    bundle: ModelBundle,
    ws: WindowedSubject,
    indices: np.ndarray,
    collect_beats: bool = False,
):
    """Score a bundle on the given windows of one subject.

    Waveform metrics run over all predicted samples; vitals come from
    segmenting each predicted window and pairing beats with the window's
    stored reference fiducials. Returns the report (and the pooled beat
    series when collect_beats is set, for Bland-Altman export).
    """
    indices = np.asarray(indices, dtype=int)
    preds = predict_windows(bundle, ws, indices)
    refs = ws.targets[indices]
    sbp_hat, dbp_hat, sbp_ref, dbp_ref = [], [], [], []
    for row, wi in enumerate(indices):
        feet = ws.beat_feet[wi]
        if len(feet) == 0:
            continue
        ref_cycles = _cycles_from_fiducials(
            feet, ws.beat_sbp[wi], ws.beat_dbp[wi], ws.window_len
        )
        try:
            s_h, d_h, s_r, d_r = derive_vitals(
                Waveform(preds[row], ws.window_rates[wi], "abp_hat"), ref_cycles
            )
        except (NoCyclesError, ValueError):
            continue
        sbp_hat.append(s_h)
        dbp_hat.append(d_h)
        sbp_ref.append(s_r)
        dbp_ref.append(d_r)
    if sbp_hat:
        vitals = (
            np.concatenate(sbp_hat),
            np.concatenate(dbp_hat),
            np.concatenate(sbp_ref),
            np.concatenate(dbp_ref),
        )
    else:
        vitals = None
    report = score(preds, refs, vitals, subject_id=ws.subject_id)
    if collect_beats:
        return report, vitals
    return report


def _cycles_from_fiducials(
    feet: np.ndarray, sbp: np.ndarray, dbp: np.ndarray, window_len: int
) -> list[CardiacCycle]:
    cycles = []
    bounds = list(np.asarray(feet, dtype=int)) + [window_len]
    for i in range(len(feet)):
        start, end = bounds[i], bounds[i + 1]
        if end <= start:
            continue
        cycles.append(
            CardiacCycle(
                start_idx=start,
                end_idx=end,
                sbp_idx=start,  # placeholder position; values carry the truth
                dbp_idx=start,
                sbp_value=float(sbp[i]),
                dbp_value=float(dbp[i]),
            )
        )
    return cycles


def format_mean_sd(values: list[float]) -> str:
    """Render cohort cells in the usual mean (SD) style, e.g. '5.41 (1.35)'."""
    arr = np.asarray(values, dtype=float)
    return f"{arr.mean():.2f} ({arr.std():.2f})"


def aggregate_reports(reports: list[MetricsReport]) -> dict[str, dict[str, str]]:
    """Cohort mean (population SD) per target/metric across subjects.

    Undefined correlations are left out of the aggregation instead of
    being coerced to 0.
    """
    out: dict[str, dict[str, str]] = {}
    for target in ("waveform", "sbp", "dbp"):
        cells = {}
        for metric in ("rmse", "mae", "r"):
            vals = [getattr(getattr(rep, target), metric) for rep in reports]
            vals = [v for v in vals if v is not None]
            cells[metric] = format_mean_sd(vals) if vals else "n/a"
        out[target] = cells
    return out


def render_cohort_table(reports: list[MetricsReport]) -> str:
    agg = aggregate_reports(reports)
    lines = [
        f"{'target':<10} {'RMSE':>14} {'MAE':>14} {'R':>14}",
    ]
    label = {"waveform": "ABP", "sbp": "SBP", "dbp": "DBP"}
    for target in ("waveform", "sbp", "dbp"):
        c = agg[target]
        lines.append(f"{label[target]:<10} {c['rmse']:>14} {c['mae']:>14} {c['r']:>14}")
    return "\n".join(lines)


def write_report_csv(path, reports: list[MetricsReport]) -> None:
    with open(path, "w") as fh:
        fh.write(
            "subject,waveform_rmse,waveform_mae,waveform_r,"
            "sbp_rmse,sbp_mae,sbp_r,dbp_rmse,dbp_mae,dbp_r,n_beats\n"
        )
        for rep in reports:
            cells = [rep.subject_id]
            for target in (rep.waveform, rep.sbp, rep.dbp):
                cells += [repr(target.rmse), repr(target.mae)]
                cells.append("" if target.r is None else repr(target.r))
            cells.append(str(rep.n_beats))
            fh.write(",".join(cells) + "\n")
