import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tagstream import coincidence
from tagstream.coincidence import (
    CoincidenceError,
    CoincidenceHistogram,
    DelayCompensation,
    NoSignalError,
    accumulate,
    auto_compensate,
    coincidence_rate,
    empty_histogram,
    find_peak,
    histogram,
    histogram_csv,
    match_coincidences,
    rates_csv,
    reconstruct_times,
)
from tagstream.timebase import IDENTITY_CF, PS_PER_SECOND
from tagstream.ttagent import TagBlock


def block_of(tags, abs_second=0, channel=1, uncalibrated=False):
    return TagBlock(abs_second, channel, IDENTITY_CF,
                    np.asarray(sorted(tags), dtype=np.int64),
                    uncalibrated=uncalibrated)


def brute_force_pairs(t_a, t_b, half_window):
    """O(n*m) oracle: every (a, b) with |a - b| <= half_window, in the
    lexicographic (a index, b index) order of the sorted inputs."""
    out = []
    for a in sorted(t_a):
        for b in sorted(t_b):
            if abs(a - b) <= half_window:
                out.append((a, b))
    return out


tag_lists = st.lists(st.integers(0, PS_PER_SECOND - 1), max_size=40)


class TestMatch:
    @given(tags_a=tag_lists, tags_b=tag_lists,
           half_window=st.integers(1, 10**7))
    @settings(max_examples=150, deadline=None)
    def test_matches_brute_force_oracle(self, tags_a, tags_b, half_window):
        result = match_coincidences([block_of(tags_a)], [block_of(tags_b, channel=2)],
                                    half_window_ps=half_window)
        expected = brute_force_pairs(tags_a, tags_b, half_window)
        assert list(zip(result.t_a.tolist(), result.t_b.tolist())) == expected
        assert np.array_equal(result.dt, result.t_a - result.t_b)

    def test_window_boundary_is_inclusive(self):
        r = match_coincidences([block_of([0])], [block_of([1000], channel=2)],
                               half_window_ps=1000)
        assert r.n_pairs == 1 and int(r.dt[0]) == -1000

    def test_just_outside_window_is_excluded(self):
        r = match_coincidences([block_of([0])], [block_of([1001], channel=2)],
                               half_window_ps=1000)
        assert r.n_pairs == 0

    @given(tags_a=tag_lists, tags_b=tag_lists)
    @settings(max_examples=60, deadline=None)
    def test_pair_count_monotone_in_window(self, tags_a, tags_b):
        a = [block_of(tags_a)]
        b = [block_of(tags_b, channel=2)]
        narrow = match_coincidences(a, b, half_window_ps=5000).n_pairs
        wide = match_coincidences(a, b, half_window_ps=50_000).n_pairs
        assert narrow <= wide

    def test_compensation_shifts_dt(self):
        a = [block_of([500_000])]
        b = [block_of([400_000], channel=2)]
        plain = match_coincidences(a, b, half_window_ps=10**6)
        comp = match_coincidences(a, b, [DelayCompensation(1, -100_000)],
                                  half_window_ps=10**6)
        assert int(plain.dt[0]) == 100_000
        assert int(comp.dt[0]) == 0

    def test_compensation_on_unrelated_channel_is_inert(self):
        a = [block_of([500_000])]
        b = [block_of([400_000], channel=2)]
        plain = match_coincidences(a, b, half_window_ps=10**6)
        comp = match_coincidences(a, b, [DelayCompensation(7, 123)],
                                  half_window_ps=10**6)
        assert np.array_equal(plain.dt, comp.dt)

    def test_uncalibrated_blocks_are_excluded_and_counted(self):
        a = [block_of([100]), block_of([200], abs_second=1, uncalibrated=True)]
        b = [block_of([100], channel=2), block_of([200], abs_second=1, channel=2)]
        r = match_coincidences(a, b, half_window_ps=1000)
        assert r.excluded_uncalibrated_a == 1
        assert r.excluded_uncalibrated_b == 0
        assert r.overlap_seconds == (0,)
        assert r.n_pairs == 1

    def test_no_overlap_yields_empty_result(self):
        r = match_coincidences([block_of([1])],
                               [block_of([1], abs_second=5, channel=2)],
                               half_window_ps=1000)
        assert r.n_pairs == 0 and r.overlap_seconds == ()

    def test_multi_second_blocks_span_the_boundary(self):
        # a tag at the end of second 0 pairs with one at the start of second 1
        a = [block_of([PS_PER_SECOND - 100]), block_of([], abs_second=1)]
        b = [block_of([], channel=2), block_of([100], abs_second=1, channel=2)]
        r = match_coincidences(a, b, half_window_ps=1000)
        assert r.n_pairs == 1 and int(r.dt[0]) == -200


class TestReconstruct:
    def test_absolute_time_composition(self):
        times, seconds, excl = reconstruct_times(
            [block_of([5, 10], abs_second=3)])
        assert times.tolist() == [3 * PS_PER_SECOND + 5, 3 * PS_PER_SECOND + 10]
        assert seconds == {3} and excl == 0

    def test_output_is_sorted_across_blocks(self):
        times, _, _ = reconstruct_times(
            [block_of([999], abs_second=1), block_of([1])])
        assert times.tolist() == sorted(times.tolist())


class TestHistogram:
    def test_conservation_and_placement(self):
        dt = np.array([-10_000, -1, 0, 99, 100, 9_999, 10_000])
        h = histogram(dt, bin_width_ps=100, half_window_ps=10_000)
        assert h.total_pairs == 7
        assert int(h.bins.sum()) == 7
        assert h.n_bins == 200
        assert int(h.bins[0]) == 1          # dt = -10_000 in first bin
        assert int(h.bins[99]) == 1         # dt = -1
        assert int(h.bins[100]) == 2        # dt = 0 and 99
        assert int(h.bins[101]) == 1        # dt = 100
        assert int(h.bins[199]) == 2        # dt = 9_999 and the clamped +10_000

    def test_out_of_window_dt_rejected(self):
        with pytest.raises(CoincidenceError):
            histogram(np.array([10_001]), bin_width_ps=100, half_window_ps=10_000)

    def test_bin_width_must_divide_window(self):
        with pytest.raises(CoincidenceError):
            histogram(np.array([0]), bin_width_ps=300, half_window_ps=10_000)

    def test_bin_centers(self):
        h = empty_histogram(bin_width_ps=1000, half_window_ps=2000)
        assert h.bin_centers().tolist() == [-1500.0, -500.0, 500.0, 1500.0]

    def test_uniform_dt_fills_bins_uniformly(self):
        rng = np.random.default_rng(11)
        n, n_bins = 200_000, 200
        dt = rng.integers(-10_000, 10_000, n)
        h = histogram(dt, bin_width_ps=100, half_window_ps=10_000)
        expected = n / n_bins
        sigma = math.sqrt(expected * (1 - 1 / n_bins))
        assert np.all(np.abs(h.bins - expected) < 5 * sigma)

    @given(dt=st.lists(st.integers(-10_000, 10_000), max_size=200))
    @settings(max_examples=100)
    def test_counts_conserved_property(self, dt):
        h = histogram(np.array(dt, dtype=np.int64))
        assert int(h.bins.sum()) == len(dt) == h.total_pairs


class TestAccumulate:
    def test_empty_is_identity(self):
        h = histogram(np.array([0, 50, -300]))
        acc = accumulate(empty_histogram(), h)
        assert np.array_equal(acc.bins, h.bins)
        assert acc.total_pairs == h.total_pairs

    def test_accumulate_equals_joint_histogram(self):
        d1 = np.array([-5000, 0, 0, 700])
        d2 = np.array([0, 700, 9999])
        joint = histogram(np.concatenate([d1, d2]))
        acc = accumulate(histogram(d1), histogram(d2))
        assert np.array_equal(acc.bins, joint.bins)
        assert acc.total_pairs == joint.total_pairs

    def test_seconds_coverage_is_unioned(self):
        h1 = histogram(np.array([0]), abs_seconds_covered=(1, 2))
        h2 = histogram(np.array([0]), abs_seconds_covered=(2, 3))
        assert accumulate(h1, h2).abs_seconds_covered == frozenset({1, 2, 3})

    def test_shape_mismatch_rejected(self):
        with pytest.raises(CoincidenceError):
            accumulate(empty_histogram(bin_width_ps=100),
                       empty_histogram(bin_width_ps=200))


class TestFindPeak:
    def test_single_loaded_bin(self):
        h = empty_histogram(bin_width_ps=1000, half_window_ps=10**7)
        bins = h.bins.copy()
        idx = (7_000_000 + 10**7) // 1000  # bin containing dt = +7e6
        bins[idx] = 500
        h = CoincidenceHistogram(1000, 10**7, bins, total_pairs=500)
        peak = find_peak(h)
        assert abs(peak.center_ps - 7_000_500.0) < 500  # center of that bin
        assert peak.height == 500
        assert peak.background == 0.0

    def test_flat_histogram_is_no_signal(self):
        bins = np.full(200, 100, dtype=np.int64)
        h = CoincidenceHistogram(100, 10_000, bins, total_pairs=int(bins.sum()))
        with pytest.raises(NoSignalError):
            find_peak(h)

    def test_empty_histogram_is_no_signal(self):
        with pytest.raises(NoSignalError):
            find_peak(empty_histogram())

    def test_gaussian_peak_centroid_and_width(self):
        rng = np.random.default_rng(99)
        true_center, true_sigma = 2_345.0, 80.0
        dt = np.round(rng.normal(true_center, true_sigma, 50_000)).astype(np.int64)
        h = histogram(dt, bin_width_ps=100, half_window_ps=10_000)
        peak = find_peak(h)
        assert abs(peak.center_ps - true_center) < 50  # half a bin
        assert abs(peak.rms_width_ps - true_sigma) < 0.3 * true_sigma

    def test_peak_rides_above_uniform_background(self):
        rng = np.random.default_rng(5)
        bg = rng.integers(-10_000, 10_000, 20_000)
        sig = np.round(rng.normal(-4_000, 60, 3_000)).astype(np.int64)
        h = histogram(np.concatenate([bg, sig]))
        peak = find_peak(h)
        assert abs(peak.center_ps + 4_000) < 100
        assert peak.background > 0


class TestAutoCompensate:
    def make_correlated(self, delay_ps, n=3000, seed=0):
        rng = np.random.default_rng(seed)
        base = np.sort(rng.integers(2 * 10**7, PS_PER_SECOND - 2 * 10**7, n))
        return [block_of(base + delay_ps)], [block_of(base, channel=2)]

    def test_recovers_inserted_delay(self):
        a, b = self.make_correlated(7_000_000)
        comp = auto_compensate(a, b)
        assert comp.channel == 1
        assert abs(comp.delay_ps + 7_000_000) <= 1000  # one coarse bin

    def test_zero_delay_stays_near_zero(self):
        a, b = self.make_correlated(0)
        comp = auto_compensate(a, b)
        assert abs(comp.delay_ps) <= 1000

    def test_compensated_rerun_is_centered(self):
        a, b = self.make_correlated(-3_333_333)
        comp = auto_compensate(a, b)
        r = match_coincidences(a, b, [comp], half_window_ps=10_000)
        peak = find_peak(histogram(r))
        assert abs(peak.center_ps) <= 1000

    def test_ambiguous_stream_requires_explicit_channel(self):
        a, b = self.make_correlated(1000)
        a.append(block_of([5], channel=9))
        with pytest.raises(CoincidenceError):
            auto_compensate(a, b)
        comp = auto_compensate(a, b, channel=1)
        assert comp.channel == 1

    def test_delay_must_be_sub_second(self):
        with pytest.raises(CoincidenceError):
            DelayCompensation(1, 10**9)


class TestRates:
    def test_published_ratio_example(self):
        report = coincidence_rate(
            {0: 25_000},
            {1: {0: 600_000}, 2: {0: 550_000}},
        )
        assert report.coincidences.tolist() == [25_000]
        assert report.max_singles.tolist() == [600_000]
        assert abs(report.ratio[0] - 25_000 / 600_000) < 1e-12
        assert abs(report.ratio[0] - 0.041666667) < 1e-6

    def test_zero_singles_is_nan(self):
        report = coincidence_rate({3: 0}, {1: {3: 0}})
        assert np.isnan(report.ratio[0])

    def test_seconds_are_union_of_inputs(self):
        report = coincidence_rate({1: 5}, {1: {2: 100}})
        assert report.seconds.tolist() == [1, 2]
        assert report.coincidences.tolist() == [5, 0]
        assert report.max_singles.tolist() == [0, 100]


class TestCsv:
    def test_histogram_csv_schema(self):
        h = histogram(np.array([0]), bin_width_ps=1000, half_window_ps=2000)
        lines = histogram_csv(h).strip().split("\n")
        assert lines[0] == "bin_center_ps,count"
        assert lines[1] == "-1500.0,0"
        assert lines[3] == "500.0,1"
        assert len(lines) == 1 + h.n_bins

    def test_rates_csv_schema(self):
        report = coincidence_rate({0: 2500}, {1: {0: 60_000}, 2: {0: 0}})
        lines = rates_csv(report).strip().split("\n")
        assert lines[0] == "abs_second,coincidences,max_singles,ratio"
        assert lines[1] == "0,2500,60000,0.041667"

    def test_rates_csv_blank_ratio_for_nan(self):
        report = coincidence_rate({0: 0}, {1: {0: 0}})
        assert rates_csv(report).strip().split("\n")[1] == "0,0,0,"
