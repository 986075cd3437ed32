"""Signal-pipeline tests: resampling against closed-form window means, FFT
against a direct O(n^2) DFT, windowing arithmetic, and pair-sampling balance."""

import math
import warnings

import numpy as np
import pytest

from pcehr import pipeline as pl
from pcehr.pipeline import ChannelSeries, SubjectRecord


class TestResample:
    def test_upsample_linear_midpoint(self):
        series = ChannelSeries("hr", 1.0, [60.0, 62.0])
        out = pl.resample(series, 32.0)
        assert out.rate_hz == 32.0
        assert len(out.values) == 64
        assert out.values[16] == pytest.approx(61.0, abs=1e-12)

    def test_constant_series_any_direction(self):
        const = ChannelSeries("acc_x", 100.0, np.full(500, 3.25))
        down = pl.resample(const, 32.0)
        np.testing.assert_allclose(down.values, 3.25, rtol=1e-12)
        up = pl.resample(ChannelSeries("hr", 1.0, np.full(10, 71.0)), 32.0)
        np.testing.assert_allclose(up.values, 71.0, rtol=1e-12)

    def test_downsample_sine_against_window_integral(self):
        # oracle: continuous mean of sin over each output tick's exact window
        rate_in, rate_out, freq = 100.0, 32.0, 1.0
        n = 1000
        t = np.arange(n) / rate_in
        series = ChannelSeries("acc_x", rate_in, np.sin(2 * np.pi * freq * t))
        out = pl.resample(series, rate_out)
        ratio = rate_in / rate_out
        bounds = np.minimum(np.ceil(np.arange(len(out.values) + 1) * ratio), n) / rate_in
        t0, t1 = bounds[:-1], bounds[1:]
        w = 2 * np.pi * freq
        oracle = (np.cos(w * t0) - np.cos(w * t1)) / (w * (t1 - t0))
        corr = np.corrcoef(out.values, oracle)[0, 1]
        assert corr > 0.999

    def test_duration_preserved_within_one_tick(self):
        for n, rate_in, rate_out in [(1000, 100.0, 32.0), (999, 100.0, 32.0), (64, 32.0, 100.0), (50, 4.0, 30.0)]:
            series = ChannelSeries("x", rate_in, np.random.default_rng(0).normal(size=n))
            out = pl.resample(series, rate_out)
            assert abs(out.duration_s - series.duration_s) <= 1.0 / rate_out + 1e-9

    def test_same_rate_is_copy(self):
        series = ChannelSeries("x", 32.0, np.arange(10.0))
        out = pl.resample(series, 32.0)
        np.testing.assert_array_equal(out.values, series.values)
        assert out.values is not series.values

    def test_rejects_bad_inputs(self):
        series = ChannelSeries("x", 32.0, np.arange(10.0))
        with pytest.raises(ValueError):
            pl.resample(series, 0.0)
        with pytest.raises(ValueError, match="impute"):
            pl.resample(ChannelSeries("x", 32.0, [1.0, np.nan]), 16.0)


class TestImputation:
    def test_symmetric_mean(self):
        series = ChannelSeries("acc", 10.0, [1.0, np.nan, 3.0])
        out = pl.impute_local_average(series, window_s=0.4)
        assert out.values[1] == pytest.approx(2.0, abs=1e-12)
        np.testing.assert_array_equal(out.values[[0, 2]], [1.0, 3.0])

    def test_no_missing_is_identity(self):
        series = ChannelSeries("acc", 10.0, [1.0, 2.0, 3.0])
        out = pl.impute_local_average(series)
        np.testing.assert_array_equal(out.values, series.values)

    def test_smooth_signal_error_bounded_by_window_variation(self):
        rng = np.random.default_rng(21)
        rate = 50.0
        t = np.arange(1000) / rate
        truth = np.sin(2 * np.pi * 0.5 * t)
        corrupted = truth.copy()
        missing = rng.random(len(t)) < 0.05
        missing[[0, -1]] = False
        corrupted[missing] = np.nan
        out = pl.impute_local_average(ChannelSeries("s", rate, corrupted), window_s=0.4)
        # |truth - window mean| can't exceed the signal's variation over the
        # window: max|s'| * window_s = pi * 0.4
        bound = np.pi * 0.4
        assert np.max(np.abs(out.values[missing] - truth[missing])) < bound

    def test_empty_window_widens_with_warning(self):
        values = np.array([5.0] + [np.nan] * 20 + [9.0])
        with pytest.warns(UserWarning, match="widened"):
            out = pl.impute_local_average(ChannelSeries("s", 10.0, values), window_s=0.4)
        assert np.all(np.isfinite(out.values))
        assert out.values[10] == pytest.approx(7.0)  # mean of nearest neighbors

    def test_fully_missing_rejected(self):
        with pytest.raises(ValueError, match="fully missing"):
            pl.impute_local_average(ChannelSeries("s", 10.0, [np.nan, np.nan]))

    def test_interpolate_missing_linear(self):
        values = np.array([np.nan, 1.0, np.nan, np.nan, 4.0, np.nan])
        out = pl.interpolate_missing_linear(values)
        np.testing.assert_allclose(out, [1.0, 1.0, 2.0, 3.0, 4.0, 4.0], rtol=1e-12)


class TestZnorm:
    def test_symmetric_three_values(self):
        out, mean, std = pl.znorm(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=5e-5)
        assert mean == 2.0
        assert std == pytest.approx(math.sqrt(2.0 / 3.0), rel=1e-12)

    def test_constant_degenerate_rule(self):
        out, mean, std = pl.znorm(np.full(8, 5.5))
        np.testing.assert_array_equal(out, np.zeros(8))
        assert mean == 5.5 and std == 1.0

    def test_output_statistics(self):
        rng = np.random.default_rng(22)
        out, _, _ = pl.znorm(rng.normal(3.0, 7.0, size=4096))
        assert abs(out.mean()) < 1e-6
        assert abs(out.std() - 1.0) < 1e-6

    def test_denorm_left_inverse(self):
        rng = np.random.default_rng(23)
        values = rng.normal(60.0, 12.0, size=257)
        out, mean, std = pl.znorm(values)
        back = pl.denorm(out, mean, std)
        np.testing.assert_allclose(back, values, rtol=1e-5)

    def test_denorm_constant_channel(self):
        values = np.full(5, 42.0)
        out, mean, std = pl.znorm(values)
        np.testing.assert_allclose(pl.denorm(out, mean, std), values, rtol=1e-12)


class TestDiscretize:
    def test_ten_second_example(self):
        rate = 32.0
        sensors = np.zeros((2, int(10 * rate)))
        snippets = pl.discretize(sensors, None, rate, tau_s=4.0, overlap=0.5)
        assert [s.start_time for s in snippets] == [0.0, 2.0, 4.0, 6.0]

    def test_minimum_length_for_fifty_snippets(self):
        rate = 32.0
        # 102 s = 4 + 49*2 is the exact minimum for 50 half-overlapped 4s windows
        sensors = np.zeros((1, int(102 * rate)))
        snippets = pl.discretize(sensors, None, rate, 4.0, 0.5)
        assert len(snippets) == 50
        shorter = pl.discretize(np.zeros((1, int(102 * rate) - 64)), None, rate, 4.0, 0.5)
        assert len(shorter) == 49

    def test_zero_overlap_count(self):
        rate = 30.0
        sensors = np.zeros((1, int(10 * rate)))
        snippets = pl.discretize(sensors, None, rate, 3.0, 0.0)
        assert len(snippets) == 3  # floor(10/3)

    def test_too_short_warns_empty(self):
        with pytest.warns(UserWarning, match="shorter"):
            out = pl.discretize(np.zeros((1, 64)), None, 32.0, 4.0, 0.5)
        assert out == []

    def test_mean_hr_matches_window_mean(self):
        rng = np.random.default_rng(24)
        rate = 32.0
        n = int(20 * rate)
        sensors = rng.normal(size=(3, n))
        hr = rng.uniform(55, 180, size=n)
        snippets = pl.discretize(sensors, hr, rate, 4.0, 0.5)
        for k, s in enumerate(snippets):
            start = int(round(k * 2.0 * rate))
            assert s.mean_hr == pytest.approx(np.mean(hr[start : start + 128]), abs=1e-9)

    def test_sample_provenance(self):
        rng = np.random.default_rng(25)
        rate = 32.0
        sensors = rng.normal(size=(2, int(14 * rate)))
        snippets = pl.discretize(sensors, None, rate, 4.0, 0.5)
        for k, s in enumerate(snippets):
            start = int(round(s.start_time * rate))
            np.testing.assert_array_equal(s.sensors, sensors[:, start : start + 128])


class TestSegment:
    @staticmethod
    def make_snippets(count):
        return [pl.TimeSnippet(np.zeros((1, 4)), 70.0, float(i)) for i in range(count)]

    def test_counts(self):
        segments = pl.segment(self.make_snippets(120), 50, 12, "s1")
        assert len(segments) == 2
        assert all(seg.n_snippets == 50 for seg in segments)

    def test_exactly_one_segment(self):
        segments = pl.segment(self.make_snippets(50), 50, 12, "s1")
        assert len(segments) == 1
        seg = segments[0]
        assert seg.init_len == 12
        assert seg.n_snippets - seg.init_len == 38

    def test_one_short_warns_naming_subject(self):
        with pytest.warns(UserWarning, match="subject9"):
            out = pl.segment(self.make_snippets(49), 50, 12, "subject9")
        assert out == []

    def test_invalid_lengths_rejected(self):
        with pytest.raises(ValueError):
            pl.segment(self.make_snippets(10), 5, 5)


class TestFft:
    @staticmethod
    def dft_direct(x):
        # O(n^2) reference transform
        n = len(x)
        k = np.arange(n)
        return (x[None, :] * np.exp(-2j * np.pi * k[:, None] * k[None, :] / n)).sum(axis=1)

    def test_matches_direct_dft(self):
        rng = np.random.default_rng(26)
        for n in (8, 64, 256):
            x = rng.normal(size=n)
            np.testing.assert_allclose(pl.fft_complex(x), self.dft_direct(x), rtol=1e-9, atol=1e-9)

    def test_parseval_identity(self):
        rng = np.random.default_rng(27)
        x = rng.normal(size=256)
        spectrum = pl.fft_complex(x)
        time_energy = np.sum(x * x)
        freq_energy = np.sum(np.abs(spectrum) ** 2) / len(x)
        assert abs(time_energy - freq_energy) / time_energy < 1e-6

    def test_constant_signal_all_zero(self):
        out = pl.fft_magnitude(np.full(256, 3.7))
        assert out.shape == (128,)
        np.testing.assert_array_equal(out, np.zeros(128))

    def test_sine_peak_bin(self):
        n = 256
        x = np.sin(2 * np.pi * 8 * np.arange(n) / n)
        out = pl.fft_magnitude(x)
        assert np.argmax(out) + 1 == 8  # output index j holds bin j+1

    def test_output_is_znormed(self):
        rng = np.random.default_rng(28)
        out = pl.fft_magnitude(rng.normal(size=256))
        assert abs(out.mean()) < 1e-9
        assert abs(out.std() - 1.0) < 1e-9

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ValueError, match="power of two"):
            pl.fft_complex(np.zeros(100))


class TestDiscriminatorPairs:
    def test_balance_over_many_draws(self):
        rng = np.random.default_rng(29)
        by_subject = {"a": list(range(10)), "b": list(range(10, 20))}
        same = total = 0
        draws_needed = 10_000 // 20
        for _ in range(draws_needed):
            for _, _, label in pl.sample_discriminator_pairs(by_subject, rng):
                same += label
                total += 1
        assert total == 10_000
        assert abs(same / total - 0.5) <= 0.02

    def test_labels_match_subjects(self):
        rng = np.random.default_rng(30)
        by_subject = {"a": ["a0", "a1", "a2"], "b": ["b0", "b1"]}
        owner = {seg: s for s, segs in by_subject.items() for seg in segs}
        for seg, partner, label in pl.sample_discriminator_pairs(by_subject, rng):
            assert label == int(owner[seg] == owner[partner])

    def test_single_segment_subject_falls_back_to_itself(self):
        rng = np.random.default_rng(31)
        by_subject = {"a": ["a0"]}
        with pytest.warns(UserWarning, match="single-subject"):
            pairs = pl.sample_discriminator_pairs(by_subject, rng)
        assert pairs == [("a0", "a0", 1)]

    def test_fixed_seed_reproducible(self):
        by_subject = {"a": list(range(5)), "b": list(range(5, 9)), "c": [9]}
        p1 = pl.sample_discriminator_pairs(by_subject, np.random.default_rng(32))
        p2 = pl.sample_discriminator_pairs(by_subject, np.random.default_rng(32))
        assert p1 == p2


class TestPreprocessSubject:
    @staticmethod
    def make_record(duration_s=210.0, with_ppg=False, subject_id="s1"):
        rng = np.random.default_rng(33)
        n_acc = int(duration_s * 32)
        channels = [
            ChannelSeries(f"acc_{axis}", 32.0, rng.normal(scale=2.0, size=n_acc)) for axis in "xyz"
        ]
        if with_ppg:
            channels.append(ChannelSeries("ppg", 32.0, rng.normal(size=n_acc)))
        hr = 70 + 10 * np.sin(np.arange(int(duration_s)) / 30.0)
        channels.append(ChannelSeries("hr", 1.0, hr))
        return SubjectRecord(subject_id, channels, "synt")

    def test_shapes_and_stats(self):
        result = pl.preprocess_subject(self.make_record(), rate_hz=32.0, tau_s=4.0, overlap=0.5)
        assert result.channel_names == ["acc_x", "acc_y", "acc_z"]
        assert len(result.segments) == 2  # 210 s -> 104 snippets -> 2 segments
        seg = result.segments[0]
        assert seg.sensor_array().shape == (50, 3, 128)
        assert np.all(np.isfinite(seg.hr_array()))
        assert len(result.channel_stats) == 3

    def test_ppg_variant_carries_fft(self):
        result = pl.preprocess_subject(
            self.make_record(duration_s=500.0, with_ppg=True), rate_hz=32.0, tau_s=8.0, overlap=0.75,
            with_ppg_fft=True,
        )
        seg = result.segments[0]
        assert seg.sensor_array().shape[1:] == (4, 256)
        assert seg.fft_array().shape == (50, 128)

    def test_missing_ppg_rejected(self):
        with pytest.raises(ValueError, match="ppg"):
            pl.preprocess_subject(self.make_record(), with_ppg_fft=True)

    def test_determinism(self):
        r1 = pl.preprocess_subject(self.make_record())
        r2 = pl.preprocess_subject(self.make_record())
        np.testing.assert_array_equal(r1.segments[0].sensor_array(), r2.segments[0].sensor_array())
        np.testing.assert_array_equal(r1.segments[0].hr_array(), r2.segments[0].hr_array())

    def test_hr_population_stats(self):
        result = pl.preprocess_subject(self.make_record())
        mean, std = pl.hr_population_stats([result.segments])
        all_hr = np.concatenate([seg.hr_array() for seg in result.segments])
        assert mean == pytest.approx(all_hr.mean(), rel=1e-12)
        assert std == pytest.approx(all_hr.std(), rel=1e-12)
