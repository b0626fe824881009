"""Two-stage training: cohort pretraining, then per-subject finetuning.

Pretraining round-robins batches from every training subject on each
optimizer step, aggregates the per-subject hybrid losses with the
cohort deviation penalty (disabled for the first warm-up epochs), and
keeps the checkpoint with the best validation loss on the held-out
subject. Finetuning re-draws the feature extractor, warm-starts the
backbone, and trains on the temporally-first slice of the subject's
windows.

Targets are standardized with the training slice's mean/std (stored on
the bundle) so desk-scale runs converge in minutes; predictions are
mapped back to mmHg downstream.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray, Tape
from .losses import HybridBreakdown, LossConfig, cohort_regularized_loss, hybrid_loss_mean
from .models import ModelBundle, bundle_forward, reinit_extractor
from .signals import WindowedSubject

__all__ = [
    "TrainConfig",
    "EpochLog",
    "AdamState",
    "optimizer_step",
    "desk_profile",
    "pretrain_cohort",
    "finetune_subject",
    "predict_windows",
    "sequential_split",
    "write_epoch_log",
    "write_step_losses",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults are the documented full-scale values.

    Desk-scale runs override via ``desk_profile()``.
    """

    batch_size: int = 512
    lr: float = 1e-5
    weight_decay: float = 1e-2
    epochs: int = 75
    reg_warmup_epochs: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.reg_warmup_epochs < 0:
            raise ValueError("batch_size must be >= 1; epochs/warmup >= 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")


def desk_profile(seed: int = 0, **overrides) -> TrainConfig:
    """CPU-friendly profile: small batches, few epochs, larger step size."""
    base = dict(
        batch_size=32,
        lr=3e-3,
        weight_decay=1e-2,
        epochs=30,
        reg_warmup_epochs=4,
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class EpochLog:
    epoch: int
    subject_losses: dict[str, float]
    omega_value: float | None
    val_loss: float | None


class AdamState:
    """Adam moments (beta1 0.9, beta2 0.999, eps 1e-8) with decoupled decay.

    The multiplicative weight decay is applied before the Adam update.
    Steps with a non-finite gradient are skipped with a warning.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr: float,
        weight_decay: float,
    ) -> dict[str, np.ndarray]:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                log.warning("skipping optimizer step: non-finite gradient in %r", name)
                return params
        self.t += 1
        b1, b2 = self.BETA1, self.BETA2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            decayed = p * (1.0 - lr * weight_decay)
            out[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + self.EPS)
        return out


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    cfg: TrainConfig,
    state: AdamState,
) -> dict[str, np.ndarray]:
    """One Adam update at the config's lr/weight decay."""
    return state.step(params, grads, cfg.lr, cfg.weight_decay)


def sequential_split(n_windows: int, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """First floor(fraction*n) window indices train, the rest test; no shuffle."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    cut = int(math.floor(fraction * n_windows))
    if cut == 0 or cut == n_windows:
        raise ValueError(f"split {fraction} leaves an empty side for {n_windows} windows")
    idx = np.arange(n_windows)
    return idx[:cut], idx[cut:]


def fit_target_affine(targets: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(targets))
    std = float(np.std(targets))
    return mean, max(std, 1e-8)


def _normalize(targets: np.ndarray, bundle: ModelBundle) -> np.ndarray:
    return (targets - bundle.target_mean) / bundle.target_std


def _batches(rng: np.random.Generator, indices: np.ndarray, batch_size: int) -> list[np.ndarray]:
    order = indices[rng.permutation(len(indices))]
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def _subject_loss(
    bundle: ModelBundle,
    bound: dict[str, DiffArray],
    ws: WindowedSubject,
    idx: np.ndarray,
    cfg: TrainConfig,
    training: bool,
) -> tuple[DiffArray, HybridBreakdown]:
    yhat = bundle_forward(
        bundle,
        bound,
        ws.inputs[idx],
        ws.aux[idx],
        training=training,
        update_stats=training,
        rate=float(np.mean(ws.window_rates)),
    )
    y = DiffArray(_normalize(ws.targets[idx], bundle))
    return hybrid_loss_mean(yhat, y, cfg.loss)


def _eval_loss(bundle: ModelBundle, ws: WindowedSubject, idx: np.ndarray, cfg: TrainConfig) -> float:
    """Hybrid loss in eval mode, batched, values only (no tape)."""
    total, count = 0.0, 0
    for lo in range(0, len(idx), cfg.batch_size):
        chunk = idx[lo : lo + cfg.batch_size]
        bound = {k: DiffArray(v) for k, v in bundle.params.items()}
        loss, _ = _subject_loss(bundle, bound, ws, chunk, cfg, training=False)
        total += float(loss.values) * len(chunk)
        count += len(chunk)
    return total / count


def predict_windows(
    bundle: ModelBundle, ws: WindowedSubject, indices: np.ndarray, batch_size: int = 64
) -> np.ndarray:
    """Eval-mode predictions mapped back to mmHg, shape (len(indices), L)."""
    outs = []
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo : lo + batch_size]
        bound = {k: DiffArray(v) for k, v in bundle.params.items()}
        yhat = bundle_forward(
            bundle,
            bound,
            ws.inputs[chunk],
            ws.aux[chunk],
            training=False,
            update_stats=False,
            rate=float(np.mean(ws.window_rates)),
        )
        outs.append(yhat.values * bundle.target_std + bundle.target_mean)
    return np.concatenate(outs, axis=0)


def pretrain_cohort(
    cohort: list[WindowedSubject],
    holdout: str,
    model: ModelBundle,
    cfg: TrainConfig,
    step_rows: list | None = None,
) -> tuple[ModelBundle, list[EpochLog]]:
    """Train on every subject but the holdout; validate on the holdout.

    Each optimizer step sees one batch from every training subject; their
    per-subject losses enter the cohort aggregate, whose deviation weight
    is forced to 0 for the first ``reg_warmup_epochs`` epochs. Returns the
    checkpoint with the lowest validation loss plus per-epoch logs.
    """
    ids = [ws.subject_id for ws in cohort]
    if holdout not in ids:
        raise ValueError(f"holdout {holdout!r} not in cohort {ids}")
    if len(cohort) < 2:
        raise ValueError("pretrain_cohort: need at least 2 subjects")
    train_subjects = [ws for ws in cohort if ws.subject_id != holdout]
    val_subject = next(ws for ws in cohort if ws.subject_id == holdout)
    for ws in cohort:
        if ws.n_windows == 0:
            raise ValueError(f"subject {ws.subject_id} has no windows")

    bundle = model.copy()
    bundle.target_mean, bundle.target_std = fit_target_affine(
        np.concatenate([ws.targets.ravel() for ws in train_subjects])
    )

    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    logs: list[EpochLog] = []
    best = bundle.copy()
    best_val = _eval_loss(bundle, val_subject, np.arange(val_subject.n_windows), cfg)
    step_counter = 0

    for epoch in range(cfg.epochs):
        omega = 0.0 if epoch < cfg.reg_warmup_epochs else cfg.loss.omega
        per_subject_batches = [
            _batches(rng, np.arange(ws.n_windows), cfg.batch_size) for ws in train_subjects
        ]
        steps = max(len(b) for b in per_subject_batches)
        epoch_losses: dict[str, list[float]] = {ws.subject_id: [] for ws in train_subjects}
        omega_values = []
        for s in range(steps):
            with Tape() as tape:
                bound = {k: tape.leaf(v) for k, v in bundle.params.items()}
                subject_losses = []
                breakdowns = []
                for ws, batches in zip(train_subjects, per_subject_batches):
                    idx = batches[s % len(batches)]
                    loss_i, bd = _subject_loss(bundle, bound, ws, idx, cfg, training=True)
                    subject_losses.append(loss_i)
                    breakdowns.append(bd)
                    epoch_losses[ws.subject_id].append(float(loss_i.values))
                total = cohort_regularized_loss(subject_losses, omega)
            grads = tape.backward(total)
            named = {k: grads[bound[k]] for k in bundle.params}
            bundle.params = adam.step(bundle.params, named, cfg.lr, cfg.weight_decay)
            omega_values.append(float(total.values))
            if step_rows is not None:
                mean_bd = HybridBreakdown(
                    waveform=float(np.mean([b.waveform for b in breakdowns])),
                    correlation=float(np.mean([b.correlation for b in breakdowns])),
                    alignment=float(np.mean([b.alignment for b in breakdowns])),
                    total=float(np.mean([b.total for b in breakdowns])),
                )
                step_rows.append(
                    (step_counter, mean_bd.waveform, mean_bd.correlation,
                     mean_bd.alignment, mean_bd.total, float(total.values))
                )
            step_counter += 1

        val = _eval_loss(bundle, val_subject, np.arange(val_subject.n_windows), cfg)
        logs.append(
            EpochLog(
                epoch=epoch,
                subject_losses={k: float(np.mean(v)) for k, v in epoch_losses.items()},
                omega_value=float(np.mean(omega_values)) if omega_values else None,
                val_loss=val,
            )
        )
        if val < best_val:
            best_val = val
            best = bundle.copy()
    return best, logs


def finetune_subject(
    pretrained: ModelBundle,
    subject: WindowedSubject,
    split: float,
    cfg: TrainConfig,
    step_rows: list | None = None,
) -> tuple[ModelBundle, list[EpochLog]]:
    """Fresh extractor, warm backbone, train on the first ``split`` fraction.

    The training slice is temporal (no shuffling across the boundary); the
    cohort penalty does not apply to a single subject. Set
    cfg.freeze_backbone to exclude backbone parameters from updates.
    """
    train_idx, _ = sequential_split(subject.n_windows, split)
    if len(train_idx) < 1:
        raise ValueError("finetune_subject: too little data to form one batch")
    bundle = reinit_extractor(pretrained, cfg.seed)
    bundle.target_mean, bundle.target_std = fit_target_affine(subject.targets[train_idx])

    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    logs: list[EpochLog] = []
    step_counter = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(rng, train_idx, cfg.batch_size):
            with Tape() as tape:
                bound = {k: tape.leaf(v) for k, v in bundle.params.items()}
                loss, bd = _subject_loss(bundle, bound, subject, idx, cfg, training=True)
            grads = tape.backward(loss)
            named = {k: grads[bound[k]] for k in bundle.params}
            if cfg.freeze_backbone:
                named = {k: g for k, g in named.items() if not k.startswith("bb.")}
            bundle.params = adam.step(bundle.params, named, cfg.lr, cfg.weight_decay)
            losses.append(float(loss.values))
            if step_rows is not None:
                step_rows.append(
                    (step_counter, bd.waveform, bd.correlation, bd.alignment, bd.total, "")
                )
            step_counter += 1
        logs.append(
            EpochLog(
                epoch=epoch,
                subject_losses={subject.subject_id: float(np.mean(losses))},
                omega_value=None,
                val_loss=None,
            )
        )
    return bundle, logs


def write_step_losses(path, rows) -> None:
    """CSV of per-step breakdowns: step, waveform, correlation, alignment, total, cohort."""
    with open(path, "w") as fh:
        fh.write("step,loss_w,loss_r,loss_a,loss_total,loss_cohort\n")
        for row in rows:
            fh.write(",".join(repr(v) if not isinstance(v, str) else v for v in row) + "\n")


def write_epoch_log(path, logs: list[EpochLog]) -> None:
    subjects = sorted({sid for l in logs for sid in l.subject_losses})
    with open(path, "w") as fh:
        fh.write("epoch," + ",".join(f"loss_{s}" for s in subjects) + ",omega,val_loss\n")
        for l in logs:
            cells = [str(l.epoch)]
            cells += [repr(l.subject_losses.get(s, "")) for s in subjects]
            cells.append("" if l.omega_value is None else repr(l.omega_value))
            cells.append("" if l.val_loss is None else repr(l.val_loss))
            fh.write(",".join(cells) + "\n")
