"""Synthetic paired pulsatile/ABP cohorts with controllable variability.

Each subject is a per-beat pressure template (raised-cosine upstroke,
exponential diastolic decay with a dicrotic bump) scaled by a slowly
varying systolic/diastolic trajectory shaped rest -> press -> elevated ->
recovery. Pulsatile channels are delayed, low-pass-damped, gain-scaled
copies of the pressure channel plus drift and noise; two channels are
generated, the second trailing the first by the subject's transit time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signals import SubjectRecord, Waveform, make_record

__all__ = [
    "TransferModel",
    "SubjectProfile",
    "SyntheticSubject",
    "generate_subject",
    "generate_cohort",
    "DEFAULT_RATE",
]

DEFAULT_RATE = 125.0  # typical ICU waveform rate, so filter bands apply unchanged

UPSTROKE_FRACTION = 0.3
DECAY_TIME_CONSTANT = 3.5  # e-folds over the diastolic span
DICROTIC_POSITION = 0.5  # of the period
DICROTIC_WIDTH = 0.05
DICROTIC_AMPLITUDE = 0.12  # of pulse pressure
PRESS_SBP_RISE = 22.0  # mmHg excursion of the press phase
PRESS_DBP_RISE = 9.0


@dataclass(frozen=True)
class TransferModel:
    """Pressure-to-peripheral-channel map: gain, delay (s), damping [0,1)."""

    gain: float = 1.0
    delay: float = 0.0
    damping: float = 0.0

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("transfer delay must be >= 0")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("transfer damping must be in [0, 1)")


@dataclass(frozen=True)
class SubjectProfile:
    heart_rate: float = 1.2  # Hz
    sbp_base: float = 120.0  # mmHg
    dbp_base: float = 75.0
    ptt_base: float = 0.06  # s, delay between the two pulsatile channels
    transfer: TransferModel = field(default_factory=TransferModel)
    drift_amplitude: float = 0.0  # low-frequency additive drift on pulsatile
    noise_floor: float = 0.0  # white-noise std on pulsatile

    def __post_init__(self):
        if not (self.sbp_base > self.dbp_base > 0):
            raise ValueError("need sbp_base > dbp_base > 0")
        if not 0.7 <= self.heart_rate <= 3.0:
            raise ValueError(f"heart_rate {self.heart_rate} outside [0.7, 3] Hz")
        if self.ptt_base < 0 or self.drift_amplitude < 0 or self.noise_floor < 0:
            raise ValueError("ptt_base, drift_amplitude, noise_floor must be >= 0")


@dataclass
class SyntheticSubject:
    """Generated channels plus the ground truth the generator commanded."""

    subject_id: str
    abp: Waveform
    channels: list[Waveform]
    truth_feet: np.ndarray  # sample index of each beat start
    truth_sbp: np.ndarray
    truth_dbp: np.ndarray
    profile: SubjectProfile

    def to_record(self, cycles_per_window: int = 4, stride: int = 1) -> SubjectRecord:
        """Run the standard segmentation/windowing pipeline on the channels."""
        return make_record(
            self.subject_id,
            self.channels,
            self.abp,
            cycles_per_window=cycles_per_window,
            stride=stride,
            align=False,  # generated channels are already on a common clock
        )


def _beat_template(n: int, sbp: float, dbp: float) -> np.ndarray:
    """One beat, n samples: foot at dbp, peak exactly at sbp, decay back."""
    pulse = sbp - dbp
    n_up = max(2, int(round(UPSTROKE_FRACTION * n)))
    t_up = np.arange(n_up) / (n_up - 1)
    upstroke = dbp + pulse * 0.5 * (1.0 - np.cos(np.pi * t_up))
    n_down = n - n_up
    beat = np.empty(n)
    beat[:n_up] = upstroke
    if n_down > 0:
        s = np.arange(1, n_down + 1) / n_down
        decay = dbp + pulse * np.exp(-DECAY_TIME_CONSTANT * s)
        center = (DICROTIC_POSITION * n - n_up) / max(n_down, 1)
        bump = DICROTIC_AMPLITUDE * pulse * np.exp(
            -0.5 * ((s - center) / DICROTIC_WIDTH) ** 2
        )
        beat[n_up:] = decay + bump
    return beat


def _bp_trajectory(n_beats: int, base: float, rise: float) -> np.ndarray:
    """Rest, linear press ramp, elevated hold, linear recovery."""
    t = np.arange(n_beats) / max(n_beats - 1, 1)
    out = np.full(n_beats, base)
    ramp = (t >= 0.15) & (t < 0.5)
    hold = (t >= 0.5) & (t < 0.65)
    rec = t >= 0.65
    out[ramp] += rise * (t[ramp] - 0.15) / 0.35
    out[hold] += rise
    out[rec] += rise * np.maximum(0.0, 1.0 - (t[rec] - 0.65) / 0.35)
    return out


def _apply_transfer(
    x: np.ndarray,
    gain: float,
    delay_s: float,
    damping: float,
    rate: float,
) -> np.ndarray:
    shift = int(round(delay_s * rate))
    if shift > 0:
        y = np.concatenate([np.full(shift, x[0]), x[:-shift]])
    else:
        y = x.copy()
    if damping > 0.0:
        out = np.empty_like(y)
        out[0] = y[0]
        a = damping
        for i in range(1, len(y)):
            out[i] = (1.0 - a) * y[i] + a * out[i - 1]
        y = out
    return gain * y


def generate_subject(
    profile: SubjectProfile,
    duration: float,
    rate: float = DEFAULT_RATE,
    seed: int = 0,
    subject_id: str = "S1",
) -> SyntheticSubject:
    """Deterministically synthesize one subject's ABP and pulsatile channels."""
    period = int(round(rate / profile.heart_rate))
    n_beats = int(duration * rate) // period
    if n_beats < 2:
        raise ValueError("generate_subject: duration must cover at least 2 beats")
    rng = np.random.default_rng(seed)

    sbp_traj = _bp_trajectory(n_beats, profile.sbp_base, PRESS_SBP_RISE)
    dbp_traj = _bp_trajectory(n_beats, profile.dbp_base, PRESS_DBP_RISE)
    beats = [_beat_template(period, sbp_traj[i], dbp_traj[i]) for i in range(n_beats)]
    abp = np.concatenate(beats)
    feet = np.arange(n_beats) * period

    tr = profile.transfer
    channels = []
    for name, delay in (("ppg", tr.delay), ("ppg_distal", tr.delay + profile.ptt_base)):
        p = _apply_transfer(abp, tr.gain, delay, tr.damping, rate)
        if profile.drift_amplitude > 0.0:
            t = np.arange(len(p)) / rate
            p = p + profile.drift_amplitude * np.sin(2.0 * np.pi * 0.05 * t)
        if profile.noise_floor > 0.0:
            p = p + rng.normal(0.0, profile.noise_floor, size=len(p))
        channels.append(Waveform(p, rate, name))

    return SyntheticSubject(
        subject_id=subject_id,
        abp=Waveform(abp, rate, "abp"),
        channels=channels,
        truth_feet=feet,
        truth_sbp=sbp_traj,
        truth_dbp=dbp_traj,
        profile=profile,
    )


def generate_cohort(
    n: int,
    variability: float = 1.0,
    duration: float = 300.0,
    rate: float = DEFAULT_RATE,
    seed: int = 0,
    noise_floor: float = 0.0,
) -> list[SyntheticSubject]:
    """Draw n subject profiles around the defaults and synthesize each.

    ``variability`` scales every inter-subject spread; 0 makes the cohort
    identical. Deterministic per seed.
    """
    if n < 2:
        raise ValueError("generate_cohort: need at least 2 subjects")
    rng = np.random.default_rng(seed)
    subjects = []
    for i in range(n):
        u = rng.uniform(-1.0, 1.0, size=6)
        profile = SubjectProfile(
            heart_rate=float(np.clip(1.2 + 0.25 * variability * u[0], 0.7, 3.0)),
            sbp_base=120.0 + 12.0 * variability * u[1],
            dbp_base=75.0 + 6.0 * variability * u[2],
            ptt_base=max(0.0, 0.06 + 0.02 * variability * u[3]),
            transfer=TransferModel(
                gain=1.0 + 0.15 * variability * u[4],
                delay=max(0.0, 0.04 + 0.02 * variability * u[5]),
                damping=0.0,
            ),
            noise_floor=noise_floor,
        )
        subjects.append(
            generate_subject(
                profile,
                duration,
                rate,
                seed=seed + 1000 * (i + 1),
                subject_id=f"S{i + 1}",
            )
        )
    return subjects
