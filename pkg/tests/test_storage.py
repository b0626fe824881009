import json

import numpy as np
import pytest

from abpkit.signals import Waveform, window_record
from abpkit.storage import (
    is_windowed_dir,
    load_subject_dir,
    load_waveform_csv,
    load_windowed,
    save_subject_dir,
    save_waveform_csv,
    save_windowed,
    sha256_file,
    tree_digest,
)
from abpkit.synthetic import SubjectProfile, generate_subject


class TestRawSubjectDir:
    def test_round_trip(self, tmp_path):
        subj = generate_subject(SubjectProfile(), duration=20.0, seed=0)
        save_subject_dir(tmp_path / "S1", subj.abp, subj.channels)
        abp, channels = load_subject_dir(tmp_path / "S1")
        np.testing.assert_array_equal(abp.samples, subj.abp.samples)
        assert abp.rate == subj.abp.rate
        assert [c.label for c in channels] == ["ppg", "ppg_distal"]
        for loaded, orig in zip(channels, subj.channels):
            np.testing.assert_array_equal(loaded.samples, orig.samples)

    def test_csv_variant(self, tmp_path):
        w = Waveform(np.sin(np.arange(100) / 10.0), rate=50.0, label="ppg")
        save_waveform_csv(tmp_path / "ppg.csv", w)
        loaded = load_waveform_csv(tmp_path / "ppg.csv", "ppg")
        np.testing.assert_allclose(loaded.samples, w.samples, rtol=1e-12)
        assert loaded.rate == pytest.approx(50.0, rel=1e-9)

    def test_csv_autodetected_by_loader(self, tmp_path):
        subj = generate_subject(SubjectProfile(), duration=20.0, seed=1)
        d = tmp_path / "S2"
        d.mkdir()
        save_waveform_csv(d / "abp.csv", subj.abp)
        save_waveform_csv(d / "ppg.csv", subj.channels[0])
        abp, channels = load_subject_dir(d)
        assert abp.label == "abp"
        assert len(channels) == 1
        np.testing.assert_allclose(abp.samples, subj.abp.samples, rtol=1e-12)

    def test_missing_sidecar_rejected(self, tmp_path):
        d = tmp_path / "S3"
        d.mkdir()
        (d / "abp.f64").write_bytes(np.zeros(10).tobytes())
        with pytest.raises(ValueError, match="sidecar"):
            load_subject_dir(d)

    def test_missing_abp_rejected(self, tmp_path):
        d = tmp_path / "S4"
        d.mkdir()
        w = Waveform(np.sin(np.arange(100)), rate=10.0, label="ppg")
        save_waveform_csv(d / "ppg.csv", w)
        with pytest.raises(ValueError, match="no abp"):
            load_subject_dir(d)


class TestWindowedDataset:
    def _windows(self):
        subj = generate_subject(SubjectProfile(), duration=40.0, seed=2)
        return window_record(subj.to_record(stride=3), window_len=256)

    def test_round_trip(self, tmp_path):
        ws = self._windows()
        save_windowed(tmp_path / "S1", ws)
        loaded = load_windowed(tmp_path / "S1")
        np.testing.assert_array_equal(loaded.inputs, ws.inputs)
        np.testing.assert_array_equal(loaded.targets, ws.targets)
        np.testing.assert_array_equal(loaded.aux, ws.aux)
        np.testing.assert_array_equal(loaded.window_ranges, ws.window_ranges)
        np.testing.assert_array_equal(loaded.window_rates, ws.window_rates)
        for a, b in zip(loaded.beat_feet, ws.beat_feet):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(loaded.beat_sbp, ws.beat_sbp):
            np.testing.assert_array_equal(a, b)
        assert loaded.subject_id == ws.subject_id
        assert loaded.channel_labels == ws.channel_labels
        assert loaded.source_rate == ws.source_rate

    def test_index_line_count_matches_meta(self, tmp_path):
        ws = self._windows()
        save_windowed(tmp_path / "S1", ws)
        lines = (tmp_path / "S1" / "windows.idx").read_text().strip().splitlines()
        meta = json.loads((tmp_path / "S1" / "meta.json").read_text())
        assert len(lines) == meta["n_windows"] == ws.n_windows

    def test_is_windowed_dir(self, tmp_path):
        ws = self._windows()
        assert not is_windowed_dir(tmp_path)
        save_windowed(tmp_path / "S1", ws)
        assert is_windowed_dir(tmp_path / "S1")

    def test_save_is_deterministic(self, tmp_path):
        ws = self._windows()
        save_windowed(tmp_path / "a", ws)
        save_windowed(tmp_path / "b", ws)
        assert (tmp_path / "a" / "windows.bin").read_bytes() == (
            tmp_path / "b" / "windows.bin"
        ).read_bytes()
        assert (tmp_path / "a" / "windows.idx").read_text() == (
            tmp_path / "b" / "windows.idx"
        ).read_text()


class TestDigests:
    def test_sha256_file(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"hello")
        assert (
            sha256_file(p)
            == "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        )

    def test_tree_digest_sorted_and_complete(self, tmp_path):
        (tmp_path / "sub").mkdir()
        (tmp_path / "a.txt").write_text("a")
        (tmp_path / "sub" / "b.txt").write_text("b")
        digest = tree_digest(tmp_path)
        assert list(digest) == ["a.txt", "sub/b.txt"]
