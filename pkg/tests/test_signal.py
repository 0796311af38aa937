import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fwl.core import FwlFrame, LabelVolume, PeakClass, PeakTable, Pose
from fwl.signal import (PreprocessSpec, accumulate, detect_frame_peaks, detect_peaks, downsample_index_map,
                        downsample_labels, merge_and_upsample, preprocess, select_strongest,
                        select_strongest_table, tile, to_original_bins, untile)

FWHM_K = 2 * math.sqrt(2 * math.log(2))


def gauss(T, mu, a, sigma):
    t = np.arange(T, dtype=float)
    return a * np.exp(-(t - mu) ** 2 / (2 * sigma ** 2))


def half_max_scan(w, k, amp):
    """Independent FWHM oracle: fine resampling by linear interpolation, then scan."""
    t = np.linspace(0, len(w) - 1, (len(w) - 1) * 1000 + 1)
    y = np.interp(t, np.arange(len(w)), w)
    above = y >= amp / 2
    i = int(round(k * 1000))
    lo = i
    while lo > 0 and above[lo - 1]:
        lo -= 1
    hi = i
    while hi < len(y) - 1 and above[hi + 1]:
        hi += 1
    return t[hi] - t[lo]


def test_zero_waveform_has_no_peaks():
    assert detect_peaks(np.zeros(50), 0.5) == []
    assert detect_peaks(np.full(50, 3.0), 0.5) == []
    with pytest.raises(ValueError):
        detect_peaks(np.zeros(5), 0.0)


def test_single_gaussian_example():
    w = gauss(700, 100.0, 50.0, 2.0)
    (p,) = detect_peaks(w, 1.0)
    assert abs(p.position - 100) <= 0.05
    assert abs(p.amplitude - 50) <= 0.5
    assert abs(p.width - 4.709) <= 0.3
    assert abs(p.width - half_max_scan(w, 100, p.amplitude)) < 0.01


def test_two_gaussians_ascending():
    w = gauss(200, 120, 5, 2) + gauss(200, 60, 8, 2)
    pk = detect_peaks(w, 1.0)
    assert [round(p.position) for p in pk] == [60, 120]
    brute = [k for k in range(1, 199) if w[k] > 1.0 and w[k] > w[k - 1] and w[k] > w[k + 1]]
    assert brute == [60, 120]


@settings(max_examples=300, deadline=None)
@given(st.floats(1.5, 6.0), st.floats(20, 80), st.floats(0.5, 1000))
def test_gaussian_recovery_property(sigma, mu, amp):
    w = gauss(100, mu, amp, sigma)
    (p,) = detect_peaks(w, amp * 0.1)
    assert abs(p.position - mu) < 0.05
    assert abs(p.amplitude - amp) / amp < 0.01
    assert abs(p.width - FWHM_K * sigma) < 0.3


def test_peak_on_plateau_edge_and_boundary_ignored():
    w = np.array([5.0, 1, 0, 0, 2, 2, 0, 0, 3])
    assert detect_peaks(w, 0.5) == []


def test_frame_peaks_match_per_waveform():
    rng = np.random.default_rng(0)
    vals = rng.poisson(1.0, (3, 4, 40)).astype(float)
    table = detect_frame_peaks(vals, 0.5)
    ref = [p for r in range(3) for c in range(4) for p in detect_peaks(vals[r, c], 0.5, (r, c))]
    assert table.to_peaks() == ref


def test_select_strongest_examples():
    w = gauss(100, 20, 5, 2) + gauss(100, 50, 9, 2) + gauss(100, 80, 3, 2)
    top = select_strongest(w, 2)
    assert sorted(round(p.amplitude) for p in top) == [5, 9]
    single = gauss(100, 30, 4, 2)
    assert len(select_strongest(single, 2)) == 1
    with pytest.raises(ValueError):
        select_strongest(w, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 4))
def test_select_strongest_matches_full_sort(seed, k):
    rng = np.random.default_rng(seed)
    w = np.zeros(600)
    for mu in rng.choice(np.arange(15, 585, 28), 20, replace=False):
        w += gauss(600, mu + rng.uniform(-2, 2), rng.uniform(1, 100), 2.0)
    all_pk = detect_peaks(w, 0.5)
    ref = sorted(all_pk, key=lambda p: -p.amplitude)[:k]
    got = select_strongest(w, k)
    assert sorted(p.amplitude for p in got) == sorted(p.amplitude for p in ref)


def test_select_strongest_table_per_pixel():
    vals = np.zeros((2, 1, 100))
    vals[0, 0] = gauss(100, 20, 5, 2) + gauss(100, 50, 9, 2) + gauss(100, 80, 3, 2)
    vals[1, 0] = gauss(100, 40, 2, 2)
    t = select_strongest_table(detect_frame_peaks(vals, 0.5), 2)
    assert len(t) == 3
    assert sorted(np.round(t.amplitude[t.rows == 0])) == [5, 9]


def test_accumulate_examples():
    f = FwlFrame(np.full((2, 2, 3), 2.0), Pose(), "a")
    assert np.array_equal(accumulate([f]).values, f.values)
    g = FwlFrame(np.full((2, 2, 3), 4.0), Pose(), "b")
    np.testing.assert_array_equal(accumulate([f, g]).values, 3.0)
    with pytest.raises(ValueError):
        accumulate([f, FwlFrame(np.zeros((2, 2, 4)), Pose(), "c")])
    with pytest.raises(ValueError):
        accumulate([f, FwlFrame(np.zeros((2, 2, 3)), Pose(translation=(1, 0, 0)), "d")])
    with pytest.raises(ValueError):
        accumulate([])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_accumulate_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    frames = [FwlFrame(rng.exponential(1.0, (2, 3, 5)), Pose(), str(i)) for i in range(7)]
    a = accumulate(frames).values
    b = accumulate([frames[i] for i in rng.permutation(7)]).values
    assert np.array_equal(a, b)


def test_preprocess_default_dims():
    f = FwlFrame(np.zeros((512, 400, 700)), Pose(), "x")
    out = preprocess(f, PreprocessSpec())
    assert out.dims == (332, 400, 256)
    tm = out.t_index_map
    assert tm[0] == 25 and tm[-1] == 699 and np.all(np.diff(tm) > 0)


def test_preprocess_identity():
    rng = np.random.default_rng(0)
    f = FwlFrame(rng.random((4, 5, 9)), Pose(), "x")
    out = preprocess(f, PreprocessSpec(0, 0, 9, 4))
    np.testing.assert_array_equal(out.values, f.values)
    np.testing.assert_array_equal(out.t_index_map, np.arange(9))


@given(st.integers(0, 50), st.integers(2, 700))
def test_index_map_formula(front, t_eff):
    for target in {1, 2, t_eff // 3 + 1, t_eff}:
        tm = downsample_index_map(front + t_eff, front, target)
        ref = [front + math.floor(k * (t_eff - 1) / max(target - 1, 1) + 0.5) for k in range(target)]
        assert tm.tolist() == ref
        if target > 1:
            assert tm[0] == front and tm[-1] == front + t_eff - 1 and np.all(np.diff(tm) > 0)


def test_preprocess_infeasible():
    f = FwlFrame(np.zeros((10, 4, 20)), Pose(), "x")
    with pytest.raises(ValueError):
        preprocess(f, PreprocessSpec(5, 0, 10, 4))
    with pytest.raises(ValueError):
        preprocess(f, PreprocessSpec(0, 15, 10, 4))


def test_tile_examples():
    f = FwlFrame(np.zeros((128, 128, 2)), Pose(), "x")
    tiles, lay = tile(f, 128)
    assert len(tiles) == 1 and lay.padded == (128, 128)
    f = FwlFrame(np.random.default_rng(0).random((332, 400, 2)), Pose(), "y")
    tiles, lay = tile(f, 128)
    assert len(tiles) == 12 and lay.padded == (384, 512)
    assert lay.origins[:5] == ((0, 0), (0, 128), (0, 256), (0, 384), (128, 0))
    np.testing.assert_array_equal(untile(tiles, lay).values, f.values)
    assert np.all(tiles[-1].values[332 - 256:] == 0)


def test_merge_single_tile_identity():
    lab = np.random.default_rng(0).integers(0, 4, (4, 4, 6)).astype(np.uint8)
    f = FwlFrame(np.zeros((4, 4, 6)), Pose(), "x")
    _, lay = tile(f, 4)
    out = merge_and_upsample([LabelVolume(lab)], lay, None, 6)
    np.testing.assert_array_equal(out.labels, lab)


def test_merge_upsample_cardinality():
    tm = downsample_index_map(700, 25, 256)
    lab = np.full((2, 2, 256), int(PeakClass.GHOST), dtype=np.uint8)
    f = FwlFrame(np.zeros((2, 2, 256)), Pose(), "x", tm)
    _, lay = tile(f, 2)
    out = merge_and_upsample([LabelVolume(lab)], lay, tm, 700)
    assert np.all((out.labels == PeakClass.GHOST).sum(-1) == 256)
    assert np.all(out.labels[:, :, :25] == PeakClass.NOISE)


def test_merge_layout_mismatch():
    f = FwlFrame(np.zeros((4, 8, 3)), Pose(), "x")
    _, lay = tile(f, 4)
    with pytest.raises(ValueError):
        merge_and_upsample([LabelVolume(np.zeros((4, 4, 3), np.uint8))], lay, None, 3)
    with pytest.raises(ValueError):
        merge_and_upsample([LabelVolume(np.zeros((4, 4, 3), np.uint8))] * 2, lay, np.array([0, 1]), 3)


def test_to_original_bins_interpolates():
    tm = np.array([25, 27, 30])
    np.testing.assert_allclose(to_original_bins([0, 0.5, 1.5, 2], tm), [25, 26, 28.5, 30])
    np.testing.assert_allclose(to_original_bins([1.25], None), [1.25])


def test_downsample_labels_follows_preprocess():
    lab = np.random.default_rng(0).integers(0, 4, (10, 3, 40)).astype(np.uint8)
    spec = PreprocessSpec(2, 5, 12, 3)
    d = downsample_labels(LabelVolume(lab), spec)
    f = preprocess(FwlFrame(lab.astype(float), Pose(), "x"), spec)
    np.testing.assert_array_equal(d.labels, f.values.astype(np.uint8))
    np.testing.assert_array_equal(d.t_index_map, f.t_index_map)
