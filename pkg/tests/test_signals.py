import numpy as np
import pytest

from abpkit.signals import (
    NoCyclesError,
    Waveform,
    align_channels,
    align_phase,
    bandpass_fir,
    bandpass_iir_zero_phase,
    build_windows,
    compute_ptt,
    expand_gradients,
    make_record,
    morphology_features,
    segment_cycles,
    window_record,
)
from abpkit.synthetic import SubjectProfile, TransferModel, generate_subject

from oracles import tone_amplitude

RATE = 125.0


def tone(freq, duration=60.0, rate=RATE, amplitude=1.0):
    t = np.arange(int(duration * rate)) / rate
    return amplitude * np.sin(2.0 * np.pi * freq * t)


def pulse_train(freq=1.0, duration=10.0, rate=RATE):
    """Sharp-upstroke periodic pulse with a clear foot at each period."""
    t = np.arange(int(duration * rate)) / rate
    phase = (t * freq) % 1.0
    x = np.where(
        phase < 0.25,
        0.5 * (1.0 - np.cos(np.pi * phase / 0.25)),
        np.exp(-4.0 * (phase - 0.25)),
    )
    return x


class TestBandpassFir:
    def test_passband_tone_within_1db(self):
        x = tone(2.0)
        out = bandpass_fir(Waveform(x, RATE, "ppg"), 0.5, 8.0)
        assert len(out.samples) == len(x)
        guard = 1200  # past the filter transient (order ~1000 taps)
        ratio = tone_amplitude(out.samples, guard) / tone_amplitude(x, guard)
        assert 10 ** (-1 / 20) < ratio < 10 ** (1 / 20)

    def test_drift_attenuated_20db(self):
        x = tone(0.05, duration=120.0)
        out = bandpass_fir(Waveform(x, RATE, "ppg"), 0.5, 8.0)
        guard = 1200
        ratio = tone_amplitude(out.samples, guard) / tone_amplitude(x, guard)
        assert ratio < 10 ** (-20 / 20)

    def test_dc_rejected_exactly(self):
        x = np.full(4000, 3.0)
        out = bandpass_fir(Waveform(x, RATE, "ppg"), 0.5, 8.0)
        core = out.samples[1100:-1100]
        assert np.max(np.abs(core)) < 1e-6

    def test_peaks_not_shifted(self):
        from scipy.signal import find_peaks

        # 1.25 Hz at 125 Hz puts every true peak exactly on a sample, so the
        # group-delay-compensated output must peak at identical indices.
        x = tone(1.25)
        out = bandpass_fir(Waveform(x, RATE, "ppg"), 0.5, 8.0)
        core = slice(1500, 6000)
        p_in, _ = find_peaks(x[core])
        p_out, _ = find_peaks(out.samples[core])
        np.testing.assert_array_equal(p_in, p_out)

    def test_band_outside_nyquist_rejected(self):
        with pytest.raises(ValueError):
            bandpass_fir(Waveform(tone(2.0, 10.0), RATE), 0.5, 80.0)
        with pytest.raises(ValueError):
            bandpass_fir(Waveform(tone(2.0, 10.0), RATE), 0.0, 8.0)


class TestBandpassIir:
    def test_zero_phase_peak_alignment(self):
        from scipy.signal import find_peaks

        # grid-aligned tone (period exactly 100 samples): zero net phase
        # means the filtered peak indices equal the unfiltered ones exactly
        x = tone(1.25, duration=30.0)
        w = Waveform(x, RATE, "bioz")
        out = bandpass_iir_zero_phase(w, 0.6, 3.0)
        assert len(out.samples) == len(x)
        core = slice(500, 3000)
        p_in, _ = find_peaks(x[core])
        p_out, _ = find_peaks(out.samples[core])
        np.testing.assert_array_equal(p_in, p_out)

    def test_passband_amplitude_within_1db(self):
        x = tone(1.5, duration=30.0)
        out = bandpass_iir_zero_phase(Waveform(x, RATE), 0.6, 3.0)
        ratio = tone_amplitude(out.samples, 500) / tone_amplitude(x, 500)
        assert 10 ** (-1 / 20) < ratio < 10 ** (1 / 20)

    def test_constant_signal_zeroed(self):
        x = np.full(2000, 5.0)
        out = bandpass_iir_zero_phase(Waveform(x, RATE), 0.6, 3.0)
        assert np.max(np.abs(out.samples[200:-200])) < 1e-6


class TestAlignPhase:
    def _base(self, n=2000, seed=0):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=n + 400)
        # smooth it so correlation has a sharp unique peak but no aliasing
        kernel = np.hamming(9)
        return np.convolve(raw, kernel / kernel.sum(), mode="same")

    def test_recovers_constructed_delay(self):
        base = self._base()
        n = 2000
        reference = Waveform(base[40 : 40 + n], RATE)
        target = Waveform(base[:n], RATE)  # target[t] = reference[t - 40]
        shifted, lag = align_phase(reference, target, max_lag=1.0)
        assert lag == pytest.approx(40 / RATE, abs=1e-12)
        np.testing.assert_allclose(shifted.samples, reference.samples[: n - 40])

    def test_exact_recovery_over_lag_range(self):
        base = self._base(seed=3)
        n = 1500
        for k in (1, 7, 33, 100, 125):
            reference = Waveform(base[k : k + n], RATE)
            target = Waveform(base[:n], RATE)
            _, lag = align_phase(reference, target, max_lag=1.0)
            assert int(round(lag * RATE)) == k

    def test_self_alignment(self):
        x = Waveform(self._base()[:1000], RATE)
        shifted, lag = align_phase(x, x, max_lag=1.0)
        assert lag == 0.0
        np.testing.assert_array_equal(shifted.samples, x.samples)

    def test_antiphase_pair(self):
        x = tone(1.0, duration=20.0)
        ref = Waveform(x, RATE)
        tgt = Waveform(-x, RATE)
        half_period = 0.5  # seconds at 1 Hz
        _, lag = align_phase(ref, tgt, max_lag=half_period)
        assert abs(lag) == pytest.approx(half_period, abs=1 / RATE)

    def test_flat_input_rejected(self):
        x = Waveform(np.ones(1000), RATE)
        with pytest.raises(ValueError, match="alignment undefined"):
            align_phase(x, x, max_lag=1.0)

    def test_align_channels_common_overlap(self):
        base = self._base(seed=9)
        n = 1800
        ref = Waveform(base[50 : 50 + n], RATE, "abp")
        t1 = Waveform(base[20 : 20 + n], RATE, "a")  # lags reference by 30
        t2 = Waveform(base[80 : 80 + n], RATE, "b")  # leads reference by 30
        ref_out, (o1, o2), lags = align_channels(ref, [t1, t2], max_lag=1.0)
        assert [int(round(l * RATE)) for l in lags] == [30, -30]
        assert len(ref_out.samples) == len(o1.samples) == len(o2.samples)
        np.testing.assert_allclose(o1.samples, ref_out.samples)
        np.testing.assert_allclose(o2.samples, ref_out.samples)


class TestSegmentCycles:
    def test_periodic_pulse_train(self):
        x = pulse_train(freq=1.0, duration=10.0)
        cycles = segment_cycles(Waveform(x, RATE, "abp"))
        assert len(cycles) == 9
        lengths = [c.end_idx - c.start_idx for c in cycles]
        assert all(abs(l - 125) <= 2 for l in lengths)

    def test_per_cycle_sbp_is_period_max(self):
        x = pulse_train(freq=1.2, duration=20.0)
        cycles = segment_cycles(Waveform(x, RATE, "abp"))
        for c in cycles:
            assert c.sbp_value == x[c.start_idx : c.end_idx].max()
            assert c.dbp_value == x[c.start_idx]
            assert c.dbp_idx == c.start_idx

    def test_foot_to_foot_values(self):
        # one slow beat shaped like [80, 120, 100, 75] stretched out
        beat = np.interp(np.arange(50), [0, 12, 30, 49], [80.0, 120.0, 100.0, 75.0])
        x = np.concatenate([beat, beat, beat])
        cycles = segment_cycles(Waveform(x, rate=50.0, label="abp"))
        assert len(cycles) >= 1
        c = cycles[0]
        assert c.sbp_value == 120.0
        assert c.dbp_value == x[c.start_idx]

    def test_flat_signal_rejected(self):
        with pytest.raises(NoCyclesError, match="no cycles"):
            segment_cycles(Waveform(np.ones(1000), RATE))


class TestComputePtt:
    def _delayed_pair(self, delay_s, seed=0, duration=30.0):
        profile = SubjectProfile(ptt_base=delay_s)
        subj = generate_subject(profile, duration=duration, seed=seed)
        prox, dist = subj.channels
        return prox, segment_cycles(prox), dist, segment_cycles(dist)

    def test_constant_delay_recovered(self):
        # construct the delay by slicing one long record: dist[t] = prox[t - k]
        rate = 100.0
        k = int(0.06 * rate)  # exactly 6 samples
        long = pulse_train(freq=1.0, duration=42.0, rate=rate)
        n = int(40.0 * rate)
        prox = Waveform(long[k : k + n], rate, "ppg")
        dist = Waveform(long[:n], rate, "ppg_distal")
        ptt = compute_ptt(prox, segment_cycles(prox), dist, segment_cycles(dist))
        assert len(ptt) >= 30
        # the very first beat is cut by the slice boundary; interior beats are exact
        np.testing.assert_allclose(ptt[1:], 0.060, atol=1e-12)

    def test_generator_delay_recovered_within_one_sample(self):
        prox, pc, dist, dc = self._delayed_pair(0.060)
        ptt = compute_ptt(prox, pc, dist, dc)
        # skip the first beat: the generator pads the channel start flat
        assert np.all(np.abs(ptt[1:] - 0.060) <= 1.0 / RATE + 1e-12)

    def test_self_pairing_gives_zero(self):
        prox, pc, dist, dc = self._delayed_pair(0.0)
        ptt = compute_ptt(prox, pc, prox, pc)
        np.testing.assert_array_equal(ptt, np.zeros_like(ptt))

    def test_jittered_delay_within_bounds(self):
        rng = np.random.default_rng(17)
        x = pulse_train(freq=1.0, duration=40.0)
        prox = Waveform(x, RATE, "ppg")
        pc = segment_cycles(prox)
        # distal: per-beat random 50-70 ms shift of the proximal feet
        dist_samples = np.zeros_like(x)
        shift_per_beat = rng.integers(int(0.05 * RATE), int(0.07 * RATE) + 1, len(pc))
        for c, s in zip(pc, shift_per_beat):
            seg = x[c.start_idx : c.end_idx]
            hi = min(len(x), c.start_idx + s + len(seg))
            dist_samples[c.start_idx + s : hi] = seg[: hi - (c.start_idx + s)]
        dist = Waveform(dist_samples + 1e-9, RATE, "ppg_distal")
        dc = segment_cycles(dist)
        ptt = compute_ptt(prox, pc, dist, dc)
        assert 0.05 - 1.5 / RATE <= ptt.mean() <= 0.07 + 1.5 / RATE

    def test_zero_matches_rejected(self):
        prox, pc, dist, dc = self._delayed_pair(0.0)
        far = [
            type(c)(
                start_idx=c.start_idx,
                end_idx=c.end_idx,
                sbp_idx=c.sbp_idx,
                dbp_idx=c.dbp_idx,
                sbp_value=c.sbp_value,
                dbp_value=c.dbp_value,
            )
            for c in dc
        ]
        # shift every proximal foot far outside the pairing tolerance
        with pytest.raises(ValueError, match="zero matched"):
            compute_ptt(prox, pc[:1], dist, far[-1:], max_pair_gap=1e-9)


class TestExpandGradients:
    def test_linear_ramp(self):
        a = 2.5
        x = a * np.arange(100) / RATE
        out = expand_gradients(Waveform(x, RATE, "ppg"))
        np.testing.assert_allclose(out[1], np.full(100, a), rtol=1e-9)
        np.testing.assert_allclose(out[2], np.zeros(100), atol=1e-9)

    def test_sine_derivative_amplitude(self):
        f = 1.0
        x = tone(f, duration=20.0)
        out = expand_gradients(Waveform(x, RATE, "ppg"))
        amp = tone_amplitude(out[1], guard=50)
        assert amp == pytest.approx(2.0 * np.pi * f, rel=0.01)

    def test_constant_signal(self):
        out = expand_gradients(Waveform(np.full(50, 7.0), RATE))
        np.testing.assert_array_equal(out[1], np.zeros(50))
        np.testing.assert_array_equal(out[2], np.zeros(50))


class TestMorphologyFeatures:
    def test_symmetric_triangle(self):
        n = 100  # 1 s at rate 100, peak exactly mid-cycle
        rate = 100.0
        x = np.concatenate([np.linspace(0, 10, 51), np.linspace(10, 0, 51)[1:-1]])
        assert len(x) == n and np.argmax(x) == 50
        mv = morphology_features(x, rate)
        duration, amplitude, rise, fall, *_ = mv.values
        assert duration == 1.0
        assert amplitude == 10.0
        assert rise == 0.5
        assert fall == 0.5
        assert mv.values[9] == 0.5  # peak-relative position

    def test_amplitude_definition(self):
        x = np.array([80.0, 120.0, 100.0, 90.0, 75.0])
        mv = morphology_features(x, 5.0)
        assert mv.values[1] == 40.0  # max - first sample

    def test_unit_rectangle_area(self):
        rate = 125.0
        x = np.ones(125)  # held constant for exactly 1 s
        # trapezoid oracle over the closed 1 s span
        closed = np.concatenate([x, x[:1]])
        oracle = np.trapezoid(closed, dx=1.0 / rate)
        assert oracle == pytest.approx(1.0, abs=1e-12)
        mv = morphology_features(x + np.linspace(0, 1e-9, 125), rate)  # avoid degenerate flat
        assert mv.values[4] == pytest.approx(1.0, rel=1e-6)

    def test_flat_cycle_degenerate(self):
        mv = morphology_features(np.full(10, 3.0), RATE)
        assert mv.degenerate
        np.testing.assert_array_equal(mv.values, np.zeros(11))

    def test_areas_partition(self):
        rng = np.random.default_rng(23)
        x = np.abs(rng.normal(size=40)) + 1.0
        mv = morphology_features(x, RATE)
        assert mv.values[4] == pytest.approx(mv.values[5] + mv.values[6], rel=1e-12)


class TestWindows:
    def test_build_windows_spans(self):
        x = pulse_train(freq=1.0, duration=12.0)
        cycles = segment_cycles(Waveform(x, RATE, "abp"))
        spans = build_windows(cycles, cycles_per_window=4, stride=1)
        assert len(spans) == len(cycles) - 3
        for (s, e), c0, c3 in zip(spans, cycles, cycles[3:]):
            assert s == c0.start_idx and e == c3.end_idx

    def test_window_record_shapes(self):
        subj = generate_subject(SubjectProfile(), duration=60.0, seed=5)
        ws = window_record(subj.to_record(), window_len=512)
        assert ws.inputs.shape == (ws.n_windows, 2, 512)
        assert ws.targets.shape == (ws.n_windows, 512)
        assert ws.aux.shape == (ws.n_windows, 12)
        assert ws.window_len == 512
        # every window covers an integer number of cycles: feet count constant
        assert all(len(f) == 4 for f in ws.beat_feet)

    def test_window_ptt_feature_matches_oracle(self):
        subj = generate_subject(SubjectProfile(ptt_base=0.06), duration=60.0, seed=6)
        prox, dist = subj.channels
        pc, dc = segment_cycles(prox), segment_cycles(dist)
        expected = float(np.mean(compute_ptt(prox, pc, dist, dc)))
        ws = window_record(subj.to_record(), window_len=512)
        np.testing.assert_allclose(ws.aux[:, 11], expected, rtol=1e-12)
        assert abs(expected - 0.06) <= 1.0 / RATE

    def test_generated_sbp_matches_segmentation(self):
        subj = generate_subject(SubjectProfile(), duration=60.0, seed=7)
        cycles = segment_cycles(subj.abp)
        for c, truth_sbp, truth_foot in zip(cycles, subj.truth_sbp, subj.truth_feet):
            assert c.start_idx == truth_foot
            assert abs(c.sbp_value - truth_sbp) <= 0.5


class TestSubjectRecord:
    def test_misaligned_channels_rejected(self):
        from abpkit.signals import SubjectRecord

        abp = Waveform(pulse_train(1.0, 10.0), RATE, "abp")
        short = Waveform(pulse_train(1.0, 5.0), RATE, "ppg")
        with pytest.raises(ValueError, match="not aligned"):
            SubjectRecord("s", [short], abp)

    def test_make_record_aligns_and_segments(self):
        subj = generate_subject(
            SubjectProfile(transfer=TransferModel(delay=0.08)), duration=40.0, seed=8
        )
        rec = make_record(subj.subject_id, subj.channels, subj.abp, align=True)
        assert rec.cycles and rec.windows
        assert all(len(c.samples) == len(rec.abp.samples) for c in rec.channels)
