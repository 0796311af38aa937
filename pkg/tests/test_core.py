import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fwl.core import (SPEED_OF_LIGHT, FwlFrame, LabelVolume, OrientedBox, Peak, PeakClass, PeakTable,
                      PointCloud, Pose, SensorConfig, Trajectory, bin_to_range, matrix_to_quat, peak_to_point,
                      peaks_to_points, pixel_to_direction, quat_to_matrix, range_to_bin)

DEF = SensorConfig()
ODD = replace(DEF, rows=511, cols=401)


def test_class_codes():
    assert [int(c) for c in PeakClass] == [0, 1, 2, 3, 255]
    assert len(PeakClass) == 5
    assert PeakClass.parse("ghost") is PeakClass.GHOST
    with pytest.raises(ValueError):
        PeakClass.parse("mirror")


def test_sensor_defaults_and_invariants():
    assert (DEF.rows, DEF.cols, DEF.bins) == (512, 400, 700)
    assert DEF.bin_duration == 1e-9 and DEF.max_range == 105.0
    with pytest.raises(ValueError):
        replace(DEF, max_range=120.0)
    with pytest.raises(ValueError):
        replace(DEF, h_fov=180.0)
    with pytest.raises(ValueError):
        replace(DEF, rows=0)


def test_bin_to_range_examples():
    assert bin_to_range(0, DEF) == 0.0
    assert bin_to_range(700, DEF) == pytest.approx(105.0, rel=0.01)
    assert bin_to_range(100, DEF) == pytest.approx(100 * 2.998e8 * 1e-9 / 2, abs=1e-12)
    assert bin_to_range(100, DEF) == pytest.approx(14.99, abs=1e-9)
    with pytest.raises(ValueError):
        bin_to_range(-0.1, DEF)
    with pytest.raises(ValueError):
        bin_to_range(700.5, DEF)
    assert SPEED_OF_LIGHT == 2.998e8


@given(st.floats(0, 700))
def test_range_roundtrip(t):
    assert abs(range_to_bin(bin_to_range(t, DEF), DEF) - t) < 1e-9


def test_pixel_directions():
    np.testing.assert_allclose(pixel_to_direction((255, 200), ODD), [1, 0, 0], atol=1e-15)
    d = pixel_to_direction((0, 0), DEF)
    az = math.atan2(d[1], d[0])
    el = math.asin(d[2])
    assert az == pytest.approx(math.radians(60)) and el == pytest.approx(math.radians(35))
    d = pixel_to_direction((511, 399), DEF)
    assert math.atan2(d[1], d[0]) == pytest.approx(-math.radians(60))
    assert math.asin(d[2]) == pytest.approx(-math.radians(35))
    with pytest.raises(ValueError):
        pixel_to_direction((512, 0), DEF)


@given(st.integers(0, 511), st.integers(0, 399))
def test_pixel_direction_mirror_symmetry(r, c):
    a = pixel_to_direction((r, c), DEF)
    b = pixel_to_direction((511 - r, 399 - c), DEF)
    assert abs(np.linalg.norm(a) - 1) < 1e-12
    np.testing.assert_allclose([a[0], a[1], a[2]], [b[0], -b[1], -b[2]], atol=1e-12)


def _boresight_peak(range_m, cfg=ODD):
    return Peak((255, 200), range_to_bin(range_m, cfg), 1.0, 2.0)


def test_peak_to_point_examples():
    pk = _boresight_peak(10.0)
    np.testing.assert_allclose(peak_to_point(pk, Pose(), ODD).xyz[0], [10, 0, 0], atol=1e-12)
    np.testing.assert_allclose(peak_to_point(pk, Pose(translation=(1, 2, 3)), ODD).xyz[0], [11, 2, 3],
                               atol=1e-12)
    np.testing.assert_allclose(peak_to_point(pk, Pose.from_yaw(math.pi / 2), ODD).xyz[0], [0, 10, 0],
                               atol=1e-12)
    cloud = peak_to_point(pk, Pose(), ODD)
    assert tuple(cloud.source[0]) == (255, 200, pk.position)


def _quat(draw_floats):
    q = np.asarray(draw_floats, dtype=float)
    return tuple(q / np.linalg.norm(q))


quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1).map(_quat)
vecs = st.lists(st.floats(-20, 20), min_size=3, max_size=3).map(tuple)


@settings(max_examples=50)
@given(quats, vecs, quats, vecs, st.integers(0, 510), st.integers(0, 400), st.floats(1, 600))
def test_peak_to_point_equivariance(qa, ta, qb, tb, r, c, t):
    A, B = Pose(qa, ta), Pose(qb, tb)
    pk = Peak((r, c), t, 1.0, 1.0)
    lhs = peak_to_point(pk, A.compose(B), ODD).xyz
    rhs = A.apply(peak_to_point(pk, B, ODD).xyz)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@given(quats, vecs)
def test_pose_inverse_and_quaternion_roundtrip(q, t):
    p = Pose(q, t)
    ident = p.compose(p.inverse())
    np.testing.assert_allclose(ident.matrix(), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(ident.translation, 0, atol=1e-9)
    R = quat_to_matrix(q)
    np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)


def test_pose_validation():
    with pytest.raises(ValueError):
        Pose((0, 0, 0, 2.0))


def test_trajectory_requires_increasing_time():
    with pytest.raises(ValueError):
        Trajectory([Pose(timestamp=1.0), Pose(timestamp=1.0)])
    tr = Trajectory([Pose(translation=(i, 0, 0), timestamp=i) for i in range(3)])
    np.testing.assert_array_equal(tr.positions[:, 0], [0, 1, 2])


def test_frame_invariants():
    v = np.zeros((2, 3, 4))
    f = FwlFrame(v, Pose(), "a")
    assert f.dims == (2, 3, 4)
    with pytest.raises(ValueError):
        f.values[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        FwlFrame(v - 1.0, Pose(), "b")
    with pytest.raises(ValueError):
        FwlFrame(v, Pose(), "c", t_index_map=np.array([0, 2, 2, 5]))
    np.testing.assert_array_equal(FwlFrame(v, Pose(), "d", np.array([1, 3, 4, 9])).original_bins(), [1, 3, 4, 9])


def test_frame_storage_is_row_major_and_bijective():
    H, W, T = 3, 4, 5
    flat = np.arange(H * W * T, dtype=float)
    f = FwlFrame(flat.reshape(H, W, T), Pose(), "x")
    seen = np.zeros(H * W * T, dtype=int)
    for h in range(H):
        for w in range(W):
            for t in range(T):
                seen[int(f.values[h, w, t])] += 1
                assert f.values[h, w, t] == (h * W + w) * T + t
    assert np.all(seen == 1)


def test_label_volume_validation():
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 7, dtype=np.uint8))
    lv = LabelVolume.filled((2, 2, 3))
    assert np.all(lv.labels == PeakClass.NOISE)


def test_peak_invariants_and_table_roundtrip():
    with pytest.raises(ValueError):
        Peak((0, 0), 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        Peak((0, 0), 1.0, 1.0, -1.0)
    peaks = [Peak((1, 2), 3.5, 2.0, 1.5, PeakClass.GHOST), Peak((0, 1), 1.0, 1.0, 1.0, PeakClass.GLASS)]
    t = PeakTable.from_peaks(peaks)
    assert t.to_peaks() == peaks
    assert len(PeakTable.concat([t, PeakTable.empty(), t])) == 4
    assert list(t.sorted().rows) == [0, 1]


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))
    c = PointCloud(np.zeros((2, 3)))
    assert np.all(c.labels == PeakClass.UNDEFINED)


def test_peaks_to_points_uses_original_bins():
    cfg = SensorConfig.toy()
    t = PeakTable([0], [0], [40.0], [1.0], [2.0], [PeakClass.OBJECT])
    cloud = peaks_to_points(t, Pose(), cfg)
    assert np.linalg.norm(cloud.xyz[0]) == pytest.approx(bin_to_range(40.0, cfg))
    assert cloud.labels[0] == PeakClass.OBJECT


def test_oriented_box():
    b = OrientedBox.axis_aligned((1, 0, 0), (1, 2, 3), yaw=math.pi / 2)
    # local x (half 1) now points along world y, local y (half 2) along -x
    assert b.contains(np.array([[2.9, 0.9, 0], [-0.9, 0, 2.9]])).all()
    assert not b.contains(np.array([[1, 1.5, 0]]))[0]
    assert b.corners().shape == (8, 3)
    with pytest.raises(ValueError):
        OrientedBox((0, 0, 0), ((1, 0, 0), (1, 0, 0), (0, 0, 1)), (1, 1, 1))
