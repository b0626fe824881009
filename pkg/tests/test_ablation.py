import numpy as np
import pytest

from abpkit.ablation import (
    AblationSpec,
    CALIBRATION_HOURS,
    NOISE_GRID,
    SPLIT_GRID,
    embed_gaussian_noise,
    mask_adjacent_beats,
    mask_bp_range,
    mask_cycle_half,
)
from abpkit.signals import window_record
from abpkit.synthetic import SubjectProfile, generate_subject
from abpkit.training import sequential_split


def tiny_windows(duration=60.0, seed=0):
    subj = generate_subject(SubjectProfile(), duration=duration, seed=seed)
    return window_record(subj.to_record(stride=4), window_len=512)


class TestAblationSpec:
    def test_grids_match_documented_rows(self):
        assert SPLIT_GRID == (0.1, 0.3, 0.5, 0.7, 0.8, 0.9)
        assert NOISE_GRID == (0.0, 0.1, 0.3, 0.5, 0.7, 0.9)
        assert CALIBRATION_HOURS == (3.0, 5.0, 7.0, 9.0, 12.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            AblationSpec(kind="unknown")
        with pytest.raises(ValueError):
            AblationSpec(kind="gaussian_noise", parameters={"multipliers": [-1.0]})
        with pytest.raises(ValueError):
            AblationSpec(kind="mask_bp_range", parameters={"lo": 120.0, "hi": 110.0})
        with pytest.raises(ValueError):
            AblationSpec(kind="mask_cycle_half", parameters={"which": "middle"})


class TestSequentialSplitExactness:
    def test_index_boundaries(self):
        train, test = sequential_split(100, 0.8)
        np.testing.assert_array_equal(train, np.arange(0, 80))
        np.testing.assert_array_equal(test, np.arange(80, 100))

    def test_union_is_everything(self):
        for f in SPLIT_GRID:
            train, test = sequential_split(100, f)
            assert sorted(np.concatenate([train, test]).tolist()) == list(range(100))
            assert len(np.intersect1d(train, test)) == 0


class TestMaskBpRange:
    def test_partition(self):
        ws = tiny_windows()
        sbp = np.concatenate(ws.beat_sbp)
        lo, hi = np.percentile(sbp, 40), np.percentile(sbp, 60)
        train, test = mask_bp_range(ws, lo, hi)
        both = np.concatenate([train, test])
        assert sorted(both.tolist()) == list(range(ws.n_windows))
        assert len(np.intersect1d(train, test)) == 0
        # training windows have no beat inside the range
        for wi in train:
            assert not np.any((ws.beat_sbp[wi] >= lo) & (ws.beat_sbp[wi] < hi))
        for wi in test:
            assert np.any((ws.beat_sbp[wi] >= lo) & (ws.beat_sbp[wi] < hi))

    def test_total_exclusion_raises(self):
        ws = tiny_windows()
        with pytest.raises(ValueError, match="every window"):
            mask_bp_range(ws, 0.0, 1000.0)

    def test_unrepresented_range_raises(self):
        ws = tiny_windows()
        with pytest.raises(ValueError, match="not represented"):
            mask_bp_range(ws, 900.0, 910.0)

    def test_fraction_roughly_matches_construction(self):
        # press phase lifts SBP by ~22 mmHg for ~half the record; mask the
        # elevated band and expect a substantial but partial test share
        ws = tiny_windows(duration=120.0)
        sbp = np.concatenate(ws.beat_sbp)
        lo = float(np.percentile(sbp, 75))
        train, test = mask_bp_range(ws, lo, lo + 10.0)
        frac = len(test) / ws.n_windows
        assert 0.05 < frac < 0.6


class TestGaussianNoise:
    def test_multiplier_zero_is_bit_identical(self):
        rng = np.random.default_rng(0)
        window = rng.normal(size=(2, 512))
        out = embed_gaussian_noise(window, 0.0, seed=123)
        assert np.array_equal(out, window)

    def test_noise_scale_statistical(self):
        rng = np.random.default_rng(1)
        window = rng.normal(size=10_000) * 4.0 + 7.0
        out = embed_gaussian_noise(window, 1.0, seed=5)
        added = out - window
        assert np.std(added) == pytest.approx(np.std(window) / 2.0, rel=0.05)

    def test_noise_mean_matches_window_mean(self):
        rng = np.random.default_rng(2)
        window = rng.normal(size=50_000) * 2.0 + 11.0
        added = embed_gaussian_noise(window, 1.0, seed=9) - window
        assert np.mean(added) == pytest.approx(np.mean(window), abs=0.05)

    def test_deterministic_per_seed(self):
        window = np.linspace(0, 1, 128)
        a = embed_gaussian_noise(window, 0.5, seed=3)
        b = embed_gaussian_noise(window, 0.5, seed=3)
        assert np.array_equal(a, b)

    def test_negative_multiplier_rejected(self):
        with pytest.raises(ValueError):
            embed_gaussian_noise(np.zeros(8), -0.1, seed=0)


class TestCycleMasking:
    def test_four_sample_cycle_pulse(self):
        window = np.array([1.0, 2.0, 3.0, 4.0])
        out = mask_cycle_half(window, feet=np.array([0]), which="pulse")
        np.testing.assert_array_equal(out, [0.0, 0.0, 3.0, 4.0])

    def test_odd_cycle_gives_extra_sample_to_pulse(self):
        window = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        out = mask_cycle_half(window, feet=np.array([0]), which="pulse")
        np.testing.assert_array_equal(out, [0.0, 0.0, 0.0, 4.0, 5.0])

    def test_masks_partition_each_cycle(self):
        ws = tiny_windows()
        for wi in range(min(5, ws.n_windows)):
            window = ws.inputs[wi]
            pulse = mask_cycle_half(window, ws.beat_feet[wi], "pulse")
            refl = mask_cycle_half(window, ws.beat_feet[wi], "reflection")
            np.testing.assert_allclose(pulse + refl, window, atol=1e-15)

    def test_reflection_energy(self):
        rng = np.random.default_rng(3)
        window = rng.normal(size=20)
        feet = np.array([0, 10])
        refl = mask_cycle_half(window, feet, "reflection")
        # reflection-masked keeps only first halves: samples 0-4 and 10-14
        expected = np.sum(window[:5] ** 2) + np.sum(window[10:15] ** 2)
        assert np.sum(refl**2) == pytest.approx(expected, rel=1e-12)

    def test_multichannel(self):
        rng = np.random.default_rng(4)
        window = rng.normal(size=(3, 8))
        out = mask_cycle_half(window, np.array([0, 4]), "pulse")
        np.testing.assert_array_equal(out[:, 0:2], np.zeros((3, 2)))
        np.testing.assert_array_equal(out[:, 2:4], window[:, 2:4])


class TestAdjacentBeatMasking:
    def test_mask_previous(self):
        window = np.arange(8.0)
        out = mask_adjacent_beats(window, np.array([0, 4]), "previous")
        np.testing.assert_array_equal(out, [0, 0, 0, 0, 4, 5, 6, 7])

    def test_mask_current(self):
        window = np.arange(8.0)
        out = mask_adjacent_beats(window, np.array([0, 4]), "current")
        np.testing.assert_array_equal(out, [0, 1, 2, 3, 0, 0, 0, 0])

    def test_masks_cover_window(self):
        rng = np.random.default_rng(5)
        window = rng.normal(size=16) + 10.0
        feet = np.array([0, 5, 11])
        prev = mask_adjacent_beats(window, feet, "previous")
        curr = mask_adjacent_beats(window, feet, "current")
        zeroed = (prev == 0.0) | (curr == 0.0)
        assert np.all(zeroed)

    def test_single_cycle_rejected(self):
        with pytest.raises(ValueError, match="2 cycles"):
            mask_adjacent_beats(np.zeros(8), np.array([0]), "current")

    def test_targets_untouched_by_design(self):
        # transforms take and return input windows only; target arrays are
        # never passed through them
        ws = tiny_windows()
        before = ws.targets.copy()
        mask_adjacent_beats(ws.inputs[0], ws.beat_feet[0], "previous")
        np.testing.assert_array_equal(ws.targets, before)


class TestTransformInvariants:
    def test_length_preserved(self):
        ws = tiny_windows()
        window = ws.inputs[0]
        feet = ws.beat_feet[0]
        for out in (
            embed_gaussian_noise(window, 0.3, seed=1),
            mask_cycle_half(window, feet, "pulse"),
            mask_adjacent_beats(window, feet, "current"),
        ):
            assert out.shape == window.shape
