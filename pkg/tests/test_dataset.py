"""Canonical-format round trips, validator error paths, the PAMAP2 loader
fixture, the segment cache, and the synthetic generator's ODE oracles."""

import json

import numpy as np
import pytest

from pcehr import dataset as ds
from pcehr import pipeline as pl
from pcehr import synth
from pcehr.pipeline import ChannelSeries, SubjectRecord
from pcehr.synth import SynthConfig


def make_records():
    rng = np.random.default_rng(60)
    records = []
    for sid in ("s01", "s02"):
        acc = [ChannelSeries(f"acc_{ax}", 32.0, rng.normal(size=320), "g") for ax in "xyz"]
        hr_vals = rng.uniform(55, 160, size=10)
        hr_vals[3] = np.nan  # missing sample must survive the round trip
        records.append(SubjectRecord(sid, acc + [ChannelSeries("hr", 1.0, hr_vals, "bpm")], "demo"))
    return records


class TestCanonicalFormat:
    def test_round_trip_lossless(self, tmp_path):
        records = make_records()
        ds.write_canonical(tmp_path, records, "demo")
        loaded = ds.read_canonical(tmp_path)
        assert [r.subject_id for r in loaded] == ["s01", "s02"]
        for orig, back in zip(records, loaded):
            assert {c.name for c in orig.channels} == {c.name for c in back.channels}
            for ch in orig.channels:
                got = back.channel(ch.name)
                assert got.rate_hz == ch.rate_hz
                assert got.units == ch.units
                np.testing.assert_allclose(got.values, ch.values, rtol=1e-6, equal_nan=True)

    def test_validator_summary(self, tmp_path):
        ds.write_canonical(tmp_path, make_records(), "demo")
        summary = ds.validate_canonical(tmp_path)
        assert summary["subjects"] == 2
        assert summary["files"] == 4

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ds.DatasetError, match="manifest"):
            ds.validate_canonical(tmp_path)

    def test_header_mismatch_detected(self, tmp_path):
        ds.write_canonical(tmp_path, make_records(), "demo")
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["subjects"]["s01"]["files"][0]["channels"][0] = "wrong_name"
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ds.DatasetError, match="does not match manifest"):
            ds.validate_canonical(tmp_path)

    def test_missing_file_detected(self, tmp_path):
        ds.write_canonical(tmp_path, make_records(), "demo")
        (tmp_path / "s01_1hz.csv").unlink()
        with pytest.raises(ds.DatasetError, match="does not exist"):
            ds.validate_canonical(tmp_path)

    def test_bad_field_count_detected(self, tmp_path):
        ds.write_canonical(tmp_path, make_records(), "demo")
        path = tmp_path / "s01_32hz.csv"
        path.write_text(path.read_text() + "1.0,2.0\n")
        with pytest.raises(ds.DatasetError, match="fields"):
            ds.validate_canonical(tmp_path)

    def test_duration_mismatch_detected(self, tmp_path):
        ds.write_canonical(tmp_path, make_records(), "demo")
        path = tmp_path / "s01_1hz.csv"
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:5]) + "\n")  # truncate HR to 4 samples
        with pytest.raises(ds.DatasetError, match="spans"):
            ds.validate_canonical(tmp_path)

    def test_wrong_format_string(self, tmp_path):
        ds.write_canonical(tmp_path, make_records(), "demo")
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["format"] = "something-else"
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ds.DatasetError, match="format"):
            ds.validate_canonical(tmp_path)

    def test_non_numeric_field_detected(self, tmp_path):
        ds.write_canonical(tmp_path, make_records(), "demo")
        path = tmp_path / "s01_1hz.csv"
        lines = path.read_text().splitlines()
        lines[2] = "abc"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ds.DatasetError, match="non-numeric"):
            ds.validate_canonical(tmp_path)


class TestPamap2Loader:
    @staticmethod
    def write_fixture(path, rows):
        path.write_text("\n".join(" ".join(str(v) for v in row) for row in rows) + "\n")

    @staticmethod
    def make_row(ts, hr="NaN", fill=0.5):
        row = [ts, 1, hr] + [fill] * 51
        row[4], row[5], row[6] = 1.1, 1.2, 1.3        # wrist 16g
        row[21], row[22], row[23] = 2.1, 2.2, 2.3     # chest 16g
        return row

    def test_fixture_round_trip(self, tmp_path):
        rows = [self.make_row(0.01, hr=100.0), self.make_row(0.02), self.make_row(0.03, hr=101.0)]
        self.write_fixture(tmp_path / "subject101.dat", rows)
        records = ds.load_pamap2(tmp_path)
        assert len(records) == 1
        rec = records[0]
        assert rec.subject_id == "subject101"
        assert len(rec.channels) == 13  # 12 accelerometer + hr
        wrist = rec.channel("wrist_acc16_x")
        np.testing.assert_array_equal(wrist.values, [1.1, 1.1, 1.1])
        assert wrist.rate_hz == 100.0
        hr = rec.channel("hr")
        np.testing.assert_allclose(hr.values, [100.0, np.nan, 101.0], equal_nan=True)

    def test_malformed_rows_skipped_with_count(self, tmp_path):
        rows = [self.make_row(0.01, hr=90.0), self.make_row(0.02, hr=91.0), self.make_row(0.03, hr=92.0)]
        text = "\n".join(" ".join(str(v) for v in row) for row in rows)
        text += "\n1.0 2.0 3.0\n"  # wrong column count
        (tmp_path / "subject102.dat").write_text(text)
        with pytest.warns(UserWarning, match="skipped 1 malformed"):
            records = ds.load_pamap2(tmp_path)
        assert len(records[0].channel("hr").values) == 3

    def test_mostly_broken_file_rejected(self, tmp_path):
        good = " ".join(str(v) for v in self.make_row(0.01, hr=90.0))
        (tmp_path / "subject103.dat").write_text(good + "\n1 2 3\n4 5 6\n")
        (tmp_path / "subject104.dat").write_text(
            "\n".join(" ".join(str(v) for v in self.make_row(0.01 * i, hr=90.0)) for i in range(3)) + "\n"
        )
        with pytest.warns(UserWarning, match="rejected"):
            records = ds.load_pamap2(tmp_path)
        assert [r.subject_id for r in records] == ["subject104"]

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(ds.DatasetError, match="no subject"):
            ds.load_pamap2(tmp_path)


class TestSegmentCache:
    def test_round_trip(self, tmp_path):
        record = synth.generate_synthetic(SynthConfig(n_subjects=1, duration_s=220.0, seed=3))[0]
        processed = pl.preprocess_subject(record)
        ds.save_segment_cache(tmp_path, processed)
        loaded = ds.load_segment_cache(tmp_path)
        assert len(loaded) == 1
        back = loaded[0]
        assert back.subject_id == processed.subject_id
        assert back.channel_names == processed.channel_names
        assert len(back.segments) == len(processed.segments)
        for seg_a, seg_b in zip(processed.segments, back.segments):
            np.testing.assert_allclose(seg_b.sensor_array(), seg_a.sensor_array(), atol=1e-6)
            np.testing.assert_allclose(seg_b.hr_array(), seg_a.hr_array(), rtol=1e-12)
            assert seg_b.init_len == seg_a.init_len

    def test_ppg_fft_preserved(self, tmp_path):
        record = synth.generate_synthetic(SynthConfig(n_subjects=1, duration_s=500.0, seed=4, emit_ppg=True))[0]
        processed = pl.preprocess_subject(record, tau_s=8.0, overlap=0.75, with_ppg_fft=True)
        ds.save_segment_cache(tmp_path, processed)
        back = ds.load_segment_cache(tmp_path)[0]
        np.testing.assert_allclose(
            back.segments[0].fft_array(), processed.segments[0].fft_array(), atol=1e-6
        )

    def test_empty_subject_rejected(self, tmp_path):
        empty = pl.SubjectSegments("s99", ["acc_x"], [])
        with pytest.raises(ValueError, match="no segments"):
            ds.save_segment_cache(tmp_path, empty)


class TestSyntheticGenerator:
    def test_rest_schedule_converges_exponentially(self):
        config = SynthConfig(
            n_subjects=1, duration_s=300.0, schedule=((300.0, 0.0),),
            hr_rest=60.0, hr_initial=100.0, rho=0.05, seed=0,
        )
        hr = synth._hr_series(config, c=1.0)
        t_check = int(5.0 / config.rho)  # five time constants
        assert abs(hr[t_check] - 60.0) < 0.01 * 40.0
        # exact exponential: |H(t) - rest| = gap * exp(-rho*t)
        t = np.arange(len(hr))
        np.testing.assert_allclose(hr, 60.0 + 40.0 * np.exp(-config.rho * t), rtol=1e-9)

    def test_steady_state_gap_scales_with_conditioning(self):
        intensity = 20.0
        config = SynthConfig(
            n_subjects=2, duration_s=400.0, schedule=((400.0, intensity),),
            hr_rest=60.0, rho=0.05, seed=0,
        )
        h1 = synth._hr_series(config, c=1.0)
        h2 = synth._hr_series(config, c=2.0)
        gap = h2[-1] - h1[-1]
        assert gap == pytest.approx(intensity * (2.0 - 1.0), abs=1e-6)

    def test_accel_std_tracks_intensity(self):
        config = SynthConfig(n_subjects=1, duration_s=600.0, seed=5, noise=0.02)
        record = synth.generate_synthetic(config)[0]
        acc = record.channel("acc_x")
        t = np.arange(len(acc.values)) / acc.rate_hz
        intensity = synth.intensity_at(config.schedule, t)
        # one long window per constant-intensity block, skipping rest blocks
        starts = np.concatenate([[0.0], np.cumsum([b[0] for b in config.schedule])])
        for (dur, level), t0 in zip(config.schedule, starts[:-1]):
            if level == 0.0:
                continue
            lo = int((t0 + 1) * acc.rate_hz)
            hi = int((t0 + dur - 1) * acc.rate_hz)
            measured = acc.values[lo:hi].std()
            expected = config.noise * level
            assert abs(measured - expected) / expected < 0.10, (level, measured, expected)

    def test_zero_intensity_blocks_are_silent(self):
        config = SynthConfig(n_subjects=1, duration_s=90.0, schedule=((90.0, 0.0),), seed=6)
        record = synth.generate_synthetic(config)[0]
        np.testing.assert_array_equal(record.channel("acc_y").values, 0.0)

    def test_subject_count_rates_and_determinism(self):
        config = SynthConfig(n_subjects=3, duration_s=150.0, seed=7)
        records = synth.generate_synthetic(config)
        assert [r.subject_id for r in records] == ["s01", "s02", "s03"]
        for r in records:
            assert len(r.channel("hr").values) == 150
            assert len(r.channel("acc_x").values) == 150 * 32
        again = synth.generate_synthetic(config)
        for a, b in zip(records, again):
            np.testing.assert_array_equal(a.channel("acc_z").values, b.channel("acc_z").values)
            np.testing.assert_array_equal(a.channel("hr").values, b.channel("hr").values)

    def test_conditioning_drawn_from_range(self):
        config = SynthConfig(n_subjects=20, duration_s=30.0, conditioning_range=(0.5, 2.0), seed=8)
        records = synth.generate_synthetic(config)
        cs = np.array([r.conditioning for r in records])
        assert np.all(cs >= 0.5) and np.all(cs <= 2.0)
        assert cs.std() > 0.1  # actually varies

    def test_ppg_channel_emitted_on_request(self):
        config = SynthConfig(n_subjects=1, duration_s=60.0, seed=9, emit_ppg=True)
        record = synth.generate_synthetic(config)[0]
        ppg = record.channel("ppg")
        assert ppg is not None and len(ppg.values) == 60 * 32
        assert np.max(np.abs(ppg.values)) <= 3.0

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError, match="c_min"):
            SynthConfig(conditioning_range=(2.0, 0.5))
        with pytest.raises(ValueError, match="rho"):
            SynthConfig(rho=0.0)

    def test_canonical_round_trip_of_synth(self, tmp_path):
        records = synth.generate_synthetic(SynthConfig(n_subjects=2, duration_s=120.0, seed=10))
        ds.write_canonical(tmp_path, records, "synth")
        summary = ds.validate_canonical(tmp_path)
        assert summary["subjects"] == 2
        loaded = ds.read_canonical(tmp_path)
        np.testing.assert_allclose(
            loaded[0].channel("hr").values, records[0].channel("hr").values, rtol=1e-6
        )
