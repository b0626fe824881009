"""Waveform preprocessing: filtering, alignment, segmentation, features.

Raw multi-channel recordings come in as ``Waveform`` objects; the
functions here band-pass them, phase-align the channels, cut the pressure
channel into cardiac cycles at waveform feet, and derive per-cycle
features (pulse transit time, gradient channels, morphology) plus
fixed-length training windows.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import butter, find_peaks, sosfiltfilt

__all__ = [
    "Waveform",
    "CardiacCycle",
    "SubjectRecord",
    "MorphologyVector",
    "WindowedSubject",
    "NoCyclesError",
    "bandpass_fir",
    "bandpass_iir_zero_phase",
    "align_phase",
    "align_channels",
    "segment_cycles",
    "compute_ptt",
    "expand_gradients",
    "morphology_features",
    "build_windows",
    "make_record",
    "window_record",
    "MORPHOLOGY_FEATURE_NAMES",
]

FOOT_REFRACTORY_S = 0.3  # assumes heart rate <= 200 bpm
BEAT_PAIRING_TOLERANCE_S = 0.5
AUX_SIZE = 12  # 11 morphology features + mean PTT


class NoCyclesError(ValueError):
    """Segmentation found fewer than two waveform feet."""


@dataclass(frozen=True)
class Waveform:
    """Uniformly sampled channel: samples, rate in Hz, and a label.

    ABP channels are in mmHg; pulsatile channels are in arbitrary units.
    """

    samples: np.ndarray
    rate: float
    label: str = ""

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if self.rate <= 0:
            raise ValueError(f"Waveform rate must be positive, got {self.rate}")
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError("Waveform needs a 1-D array of at least 2 samples")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Waveform samples must be finite")
        object.__setattr__(self, "samples", arr)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.rate

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        return replace(self, samples=samples)


@dataclass(frozen=True)
class CardiacCycle:
    """One foot-to-foot beat with its fiducials (indices into a Waveform)."""

    start_idx: int
    end_idx: int
    sbp_idx: int
    dbp_idx: int
    sbp_value: float
    dbp_value: float

    def __post_init__(self):
        if not (self.start_idx <= self.sbp_idx < self.end_idx):
            raise ValueError("sbp_idx must lie inside [start_idx, end_idx)")
        if not (self.start_idx <= self.dbp_idx < self.end_idx):
            raise ValueError("dbp_idx must lie inside [start_idx, end_idx)")
        if self.sbp_value < self.dbp_value:
            raise ValueError("per-cycle systolic must be >= diastolic")


@dataclass
class SubjectRecord:
    """One person's aligned channels, reference ABP, cycles, and windows."""

    subject_id: str
    channels: list[Waveform]
    abp: Waveform
    cycles: list[CardiacCycle] = field(default_factory=list)
    windows: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.abp.samples)
        for ch in self.channels:
            if len(ch.samples) != n or ch.rate != self.abp.rate:
                raise ValueError(
                    f"channel {ch.label!r} not aligned with ABP "
                    f"({len(ch.samples)} vs {n} samples)"
                )


@dataclass(frozen=True)
class MorphologyVector:
    """11 rule-based per-cycle shape features (fixed order, see names)."""

    values: np.ndarray
    degenerate: bool = False


MORPHOLOGY_FEATURE_NAMES = (
    "duration_s",
    "amplitude",
    "rise_time_s",
    "fall_time_s",
    "area",
    "area_systolic",
    "area_diastolic",
    "max_upslope",
    "max_downslope",
    "peak_relative_position",
    "half_amplitude_width_s",
)


def _check_band(low: float, high: float, rate: float) -> None:
    if not (0.0 < low < high < rate / 2.0):
        raise ValueError(
            f"band ({low}, {high}) Hz must satisfy 0 < low < high < Nyquist ({rate / 2.0} Hz)"
        )


def design_bandpass_fir(low: float, high: float, rate: float) -> np.ndarray:
    """Hamming windowed-sinc band-pass taps, order 4*rate/low rounded to even.

    The taps are mean-subtracted afterwards so the DC response is exactly
    zero (the window alone leaves ~1e-3 leakage at 0 Hz).
    """
    order = int(round(4.0 * rate / low))
    if order % 2:
        order += 1
    n = np.arange(order + 1) - order / 2.0
    f1, f2 = low / rate, high / rate
    taps = 2.0 * f2 * np.sinc(2.0 * f2 * n) - 2.0 * f1 * np.sinc(2.0 * f1 * n)
    taps *= np.hamming(order + 1)
    taps -= taps.sum() / taps.size
    return taps


def bandpass_fir(w: Waveform, low: float, high: float) -> Waveform:
    """Linear-phase FIR band-pass with group-delay compensation.

    Output length equals input length, and pass-band peaks stay at their
    original sample indices (the delay of order/2 samples is removed).
    """
    _check_band(low, high, w.rate)
    taps = design_bandpass_fir(low, high, w.rate)
    full = np.convolve(w.samples, taps)
    delay = (len(taps) - 1) // 2
    out = full[delay : delay + len(w.samples)]
    return w.with_samples(out)


def bandpass_iir_zero_phase(w: Waveform, low: float, high: float) -> Waveform:
    """2nd-order Butterworth band-pass run forward then backward.

    The forward/backward application cancels the phase response, so peak
    indices are not shifted.
    """
    _check_band(low, high, w.rate)
    sos = butter(2, [low, high], btype="bandpass", fs=w.rate, output="sos")
    out = sosfiltfilt(sos, w.samples)
    return w.with_samples(np.ascontiguousarray(out))


def align_phase(
    reference: Waveform, target: Waveform, max_lag: float
) -> tuple[Waveform, float]:
    """Find the lag maximizing normalized cross-correlation, then shift.

    Returns the shifted target (its edges truncated by |lag| samples so a
    matching truncation of the reference lines the two up) and the lag in
    seconds. Positive lag means the target trails the reference.
    """
    if reference.rate != target.rate:
        raise ValueError("align_phase: channels must share a sampling rate")
    if max_lag >= reference.duration / 2.0:
        raise ValueError("align_phase: max_lag must be below half the duration")
    ref = reference.samples - reference.samples.mean()
    tgt = target.samples - target.samples.mean()
    if np.ptp(ref) == 0.0 or np.ptp(tgt) == 0.0:
        raise ValueError("align_phase: alignment undefined for flat input")
    n = len(ref)
    max_shift = int(round(max_lag * reference.rate))
    best_lag, best_corr = 0, -np.inf
    for lag in range(-max_shift, max_shift + 1):
        if lag >= 0:
            a, b = ref[: n - lag], tgt[lag:]
        else:
            a, b = ref[-lag:], tgt[: n + lag]
        denom = np.sqrt((a * a).sum() * (b * b).sum())
        if denom == 0.0:
            continue
        corr = float((a * b).sum() / denom)
        if corr > best_corr:
            best_corr, best_lag = corr, lag
    if best_lag >= 0:
        shifted = target.samples[best_lag:]
    else:
        shifted = target.samples[: n + best_lag]
    return target.with_samples(shifted), best_lag / reference.rate


def align_channels(
    reference: Waveform, targets: list[Waveform], max_lag: float
) -> tuple[Waveform, list[Waveform], list[float]]:
    """Align every target to the reference and trim all to the overlap."""
    shifted, lags = [], []
    for t in targets:
        s, lag = align_phase(reference, t, max_lag)
        shifted.append(s)
        lags.append(lag)
    lag_samples = [int(round(l * reference.rate)) for l in lags]
    start = max([0] + [-k for k in lag_samples if k < 0])
    n = len(reference.samples)
    stop = n - max([0] + [k for k in lag_samples if k > 0])
    ref_out = reference.with_samples(reference.samples[start:stop])
    out = []
    for s, k in zip(shifted, lag_samples):
        # shifted target index 0 corresponds to reference index max(0, -k)... realign:
        offset = start - max(0, -k)
        seg = s.samples[offset : offset + (stop - start)]
        out.append(s.with_samples(seg))
    return ref_out, out, lags


def segment_cycles(w: Waveform) -> list[CardiacCycle]:
    """Cut a band-limited pulsatile/pressure channel into cardiac cycles.

    Cycle boundaries sit at waveform feet: the local minimum preceding
    each steep upstroke (slope above half the global maximum slope), with
    a 0.3 s refractory window between feet. Per cycle, sbp is the maximum
    sample and dbp the value at the foot.
    """
    x = w.samples
    dx = np.diff(x)
    if dx.size == 0 or dx.max() <= 0:
        raise NoCyclesError("no cycles: signal has no rising edge")
    refractory = max(1, int(round(FOOT_REFRACTORY_S * w.rate)))
    upstrokes, _ = find_peaks(dx, height=0.5 * dx.max(), distance=refractory)
    feet: list[int] = []
    for u in upstrokes:
        i = int(u)
        while i > 0 and x[i - 1] <= x[i]:
            i -= 1
        if feet and i - feet[-1] < refractory:
            continue
        if not feet or i != feet[-1]:
            feet.append(i)
    if len(feet) < 2:
        raise NoCyclesError("no cycles: fewer than two feet detected")
    cycles = []
    for f0, f1 in zip(feet[:-1], feet[1:]):
        seg = x[f0:f1]
        peak = f0 + int(np.argmax(seg))
        cycles.append(
            CardiacCycle(
                start_idx=f0,
                end_idx=f1,
                sbp_idx=peak,
                dbp_idx=f0,
                sbp_value=float(x[peak]),
                dbp_value=float(x[f0]),
            )
        )
    return cycles


def compute_ptt(
    proximal: Waveform,
    proximal_cycles: list[CardiacCycle],
    distal: Waveform,
    distal_cycles: list[CardiacCycle],
    max_pair_gap: float = BEAT_PAIRING_TOLERANCE_S,
) -> np.ndarray:
    """Per-cycle pulse transit time between two aligned channels, seconds.

    Cycles pair by nearest feet within ``max_pair_gap``. The proximal
    fiducial is the R-peak (cycle maximum) for ECG channels and the foot
    otherwise; PTT = distal foot time - proximal fiducial time. Unmatched
    or negative pairs are dropped.
    """
    if proximal.rate != distal.rate:
        raise ValueError("compute_ptt: channels must share a sampling rate")
    rate = proximal.rate
    is_ecg = "ecg" in proximal.label.lower()
    prox_feet = np.array([c.start_idx for c in proximal_cycles], dtype=float) / rate
    if is_ecg:
        prox_fid = np.array([c.sbp_idx for c in proximal_cycles], dtype=float) / rate
    else:
        prox_fid = prox_feet
    ptts = []
    for c in distal_cycles:
        t_foot = c.start_idx / rate
        k = int(np.argmin(np.abs(prox_feet - t_foot)))
        if abs(prox_feet[k] - t_foot) > max_pair_gap:
            continue
        ptt = t_foot - prox_fid[k]
        if ptt >= 0:
            ptts.append(ptt)
    if not ptts:
        raise ValueError("compute_ptt: zero matched cycles")
    return np.asarray(ptts)


def expand_gradients(w: Waveform) -> np.ndarray:
    """Stack [x, dx/dt, d2x/dt2] as a (3, n) array.

    Central differences with one-sided edges, scaled to per-second units
    (the second derivative by rate squared).
    """
    x = w.samples
    if len(x) < 3:
        raise ValueError("expand_gradients: need at least 3 samples")
    d1 = np.gradient(x) * w.rate
    d2 = np.gradient(np.gradient(x)) * w.rate * w.rate
    return np.stack([x, d1, d2])


def morphology_features(samples: np.ndarray, rate: float) -> MorphologyVector:
    """11 shape features of one cardiac cycle (foot-to-foot samples).

    A flat cycle is degenerate: the vector is all zeros and the flag set.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 5:
        raise ValueError("morphology_features: need at least 5 samples per cycle")
    if rate <= 0:
        raise ValueError("morphology_features: rate must be positive")
    amplitude = float(x.max() - x[0])
    if np.ptp(x) == 0.0:
        return MorphologyVector(values=np.zeros(11), degenerate=True)
    n = x.size
    duration = n / rate
    peak = int(np.argmax(x))
    rise = peak / rate
    fall = duration - rise
    area = float(x.sum()) / rate
    area_sys = float(x[: peak + 1].sum()) / rate
    area_dia = area - area_sys
    slopes = np.diff(x) * rate
    half_level = x[0] + amplitude / 2.0
    width = float(np.count_nonzero(x >= half_level)) / rate
    values = np.array(
        [
            duration,
            amplitude,
            rise,
            fall,
            area,
            area_sys,
            area_dia,
            float(slopes.max()),
            float(slopes.min()),
            rise / duration,
            width,
        ]
    )
    return MorphologyVector(values=values, degenerate=False)


def build_windows(
    cycles: list[CardiacCycle], cycles_per_window: int = 4, stride: int = 1
) -> list[tuple[int, int]]:
    """Sliding spans of whole cycles: [start of first, end of last)."""
    if cycles_per_window < 1 or stride < 1:
        raise ValueError("cycles_per_window and stride must be >= 1")
    spans = []
    for i in range(0, len(cycles) - cycles_per_window + 1, stride):
        spans.append((cycles[i].start_idx, cycles[i + cycles_per_window - 1].end_idx))
    return spans


def make_record(
    subject_id: str,
    channels: list[Waveform],
    abp: Waveform,
    cycles_per_window: int = 4,
    stride: int = 1,
    max_lag: float = 1.0,
    align: bool = True,
) -> SubjectRecord:
    """Assemble an aligned, segmented, windowed record from raw channels."""
    if align:
        abp_t, channels_t, _ = align_channels(abp, channels, max_lag)
    else:
        abp_t, channels_t = abp, list(channels)
    cycles = segment_cycles(abp_t)
    windows = build_windows(cycles, cycles_per_window, stride)
    return SubjectRecord(
        subject_id=subject_id,
        channels=channels_t,
        abp=abp_t,
        cycles=cycles,
        windows=windows,
    )


@dataclass
class WindowedSubject:
    """Model-ready windows for one subject.

    inputs: (N, C, L) pulsatile windows; targets: (N, L) ABP windows; aux:
    (N, 12) = mean morphology (11) + mean PTT per window. Each window was
    resampled from its native span to L samples, so per-window rates vary
    slightly (window_rates). Beat fiducials are kept in window sample
    coordinates for vitals derivation and BP-range masking.
    """

    subject_id: str
    inputs: np.ndarray
    targets: np.ndarray
    aux: np.ndarray
    window_ranges: np.ndarray  # (N, 2) sample spans in the source record
    window_rates: np.ndarray  # (N,) samples/second of each resampled window
    beat_feet: list[np.ndarray]  # per window, foot positions in window samples
    beat_sbp: list[np.ndarray]
    beat_dbp: list[np.ndarray]
    channel_labels: tuple[str, ...]
    source_rate: float

    @property
    def n_windows(self) -> int:
        return self.inputs.shape[0]

    @property
    def window_len(self) -> int:
        return self.inputs.shape[2]

    def duration_of(self, first_n: int) -> float:
        """Seconds of source signal covered by the first n windows."""
        if first_n <= 0:
            return 0.0
        end = int(self.window_ranges[min(first_n, self.n_windows) - 1, 1])
        start = int(self.window_ranges[0, 0])
        return (end - start) / self.source_rate


def _resample_span(x: np.ndarray, start: int, end: int, length: int) -> np.ndarray:
    src = np.arange(start, end, dtype=float)
    pos = start + np.arange(length) * (end - start) / length
    return np.interp(pos, src, x[start:end])


def window_record(record: SubjectRecord, window_len: int = 512) -> WindowedSubject:
    """Resample each window span to a fixed length and gather features.

    Morphology is computed on the first pulsatile channel over the ABP
    cycle boundaries (channels are aligned); PTT needs two channels and is
    0 otherwise.
    """
    if not record.windows:
        raise ValueError("window_record: record has no windows")
    rate = record.abp.rate
    chans = record.channels
    n_ch = len(chans)
    if n_ch == 0:
        raise ValueError("window_record: record has no input channels")

    ptt_by_cycle: dict[int, float] = {}
    if n_ch >= 2:
        try:
            prox_cycles = segment_cycles(chans[0])
            dist_cycles = segment_cycles(chans[1])
            ptts = compute_ptt(chans[0], prox_cycles, chans[1], dist_cycles)
            mean_ptt = float(np.mean(ptts))
        except (NoCyclesError, ValueError):
            mean_ptt = 0.0
    else:
        mean_ptt = 0.0

    n_win = len(record.windows)
    inputs = np.zeros((n_win, n_ch, window_len))
    targets = np.zeros((n_win, window_len))
    aux = np.zeros((n_win, AUX_SIZE))
    rates = np.zeros(n_win)
    feet_list, sbp_list, dbp_list = [], [], []

    for wi, (start, end) in enumerate(record.windows):
        for ci, ch in enumerate(chans):
            inputs[wi, ci] = _resample_span(ch.samples, start, end, window_len)
        targets[wi] = _resample_span(record.abp.samples, start, end, window_len)
        rates[wi] = window_len * rate / (end - start)

        in_window = [c for c in record.cycles if c.start_idx >= start and c.end_idx <= end]
        morphs = []
        for c in in_window:
            seg = chans[0].samples[c.start_idx : c.end_idx]
            if len(seg) >= 5:
                mv = morphology_features(seg, rate)
                if not mv.degenerate:
                    morphs.append(mv.values)
        if morphs:
            aux[wi, :11] = np.mean(morphs, axis=0)
        aux[wi, 11] = mean_ptt

        scale = window_len / (end - start)
        feet_list.append(np.array([(c.start_idx - start) * scale for c in in_window]))
        sbp_list.append(np.array([c.sbp_value for c in in_window]))
        dbp_list.append(np.array([c.dbp_value for c in in_window]))

    return WindowedSubject(
        subject_id=record.subject_id,
        inputs=inputs,
        targets=targets,
        aux=aux,
        window_ranges=np.array(record.windows, dtype=np.int64),
        window_rates=rates,
        beat_feet=feet_list,
        beat_sbp=sbp_list,
        beat_dbp=dbp_list,
        channel_labels=tuple(ch.label for ch in chans),
        source_rate=rate,
    )
