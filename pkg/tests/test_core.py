import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepchange.core import (Point, PointCloud, SpatialIndex, XyzFormatError,
                             XyzParseError, grid_subsample, knn, load_xyz,
                             radius_query_2d, save_xyz)
from helpers import brute_knn, brute_radius_2d


def test_point_rejects_nonfinite():
    with pytest.raises(ValueError):
        Point(0.0, np.nan, 0.0)
    with pytest.raises(ValueError):
        Point(np.inf, 0.0, 0.0)


def test_pointcloud_validates_shapes():
    xyz = np.zeros((3, 3))
    with pytest.raises(ValueError):
        PointCloud(xyz, labels=[1, 2])
    with pytest.raises(ValueError):
        PointCloud(xyz, features=np.zeros((2, 4)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, 0.0, np.nan]]))


class TestLoadXyz:
    def test_unlabeled(self, tmp_path):
        p = tmp_path / "a.xyz"
        p.write_text("0 0 0\n1 2 3\n")
        pc = load_xyz(p)
        assert pc.n_points == 2
        assert pc.labels is None
        np.testing.assert_allclose(pc.xyz[1], [1, 2, 3])

    def test_labeled(self, tmp_path):
        p = tmp_path / "a.xyz"
        p.write_text("0 0 0 2\n")
        pc = load_xyz(p)
        assert pc.n_points == 1
        assert pc.labels.tolist() == [2]

    def test_malformed_line_reports_lineno(self, tmp_path):
        p = tmp_path / "a.xyz"
        p.write_text("0 0 abc\n")
        with pytest.raises(XyzParseError, match=":1:"):
            load_xyz(p)

    def test_mixed_columns_is_format_error(self, tmp_path):
        p = tmp_path / "a.xyz"
        p.write_text("0 0 0\n1 1 1 3\n")
        with pytest.raises(XyzFormatError):
            load_xyz(p)

    def test_comments_and_blanks_skipped(self, tmp_path):
        p = tmp_path / "a.xyz"
        p.write_text("# header\n\n0 0 0\n")
        assert load_xyz(p).n_points == 1

    def test_roundtrip_9_significant_digits(self, tmp_path, rng):
        xyz = rng.uniform(-1000, 1000, (50, 3))
        labels = rng.integers(0, 7, 50)
        pc = PointCloud(xyz, labels=labels)
        path = tmp_path / "r.xyz"
        save_xyz(pc, path)
        back = load_xyz(path)
        np.testing.assert_allclose(back.xyz, pc.xyz, rtol=1e-8)
        assert back.labels.tolist() == labels.tolist()
        # A second write of the re-read cloud is byte-identical.
        path2 = tmp_path / "r2.xyz"
        save_xyz(back, path2)
        assert path.read_bytes() == path2.read_bytes()


class TestGridSubsample:
    def test_single_voxel_centroid(self):
        pc = PointCloud([[0, 0, 0], [0.1, 0, 0]])
        out = grid_subsample(pc, 1.0)
        assert out.n_points == 1
        np.testing.assert_allclose(out.xyz[0], [0.05, 0, 0])

    def test_distinct_voxels_untouched(self):
        pc = PointCloud([[0, 0, 0], [2, 0, 0]])
        out = grid_subsample(pc, 1.0)
        assert out.n_points == 2

    def test_rejects_bad_dl(self):
        with pytest.raises(ValueError):
            grid_subsample(PointCloud([[0, 0, 0]]), 0.0)

    def test_unit_cube_octants(self, rng):
        xyz = rng.uniform(0, 1, (1000, 3))
        out = grid_subsample(PointCloud(xyz), 0.5)
        assert out.n_points <= 8
        # Brute-force voxel binning oracle.
        keys = np.floor(xyz / 0.5).astype(int)
        expected = {}
        for k, p in zip(map(tuple, keys), xyz):
            expected.setdefault(k, []).append(p)
        assert out.n_points == len(expected)
        got = {tuple(np.floor(c / 0.5).astype(int)): c for c in out.xyz}
        for k, pts in expected.items():
            np.testing.assert_allclose(got[k], np.mean(pts, axis=0), atol=1e-12)

    def test_majority_labels(self):
        pc = PointCloud([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0]], labels=[1, 2, 2])
        out = grid_subsample(pc, 1.0)
        assert out.labels.tolist() == [2]

    def test_majority_tie_prefers_lower_label(self):
        pc = PointCloud([[0, 0, 0], [0.1, 0, 0]], labels=[5, 3])
        assert grid_subsample(pc, 1.0).labels.tolist() == [3]

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        xyz = rng.uniform(-10, 10, (rng.integers(1, 200), 3))
        once = grid_subsample(PointCloud(xyz), 0.7)
        twice = grid_subsample(once, 0.7)
        a = once.xyz[np.lexsort(once.xyz.T)]
        b = twice.xyz[np.lexsort(twice.xyz.T)]
        np.testing.assert_array_equal(a, b)


class TestSpatialQueries:
    def test_knn_simple(self):
        idx = SpatialIndex(PointCloud([[0, 0, 0], [5, 0, 0]]))
        res = knn(idx, Point(1, 0, 0), 1)
        assert res == [(0, 1.0)]

    def test_knn_exhaustion(self):
        idx = SpatialIndex(PointCloud([[0, 0, 0], [5, 0, 0]]))
        res = knn(idx, Point(0, 0, 0), 10)
        assert [i for i, _ in res] == [0, 1]

    def test_knn_tie_breaks_toward_lower_id(self):
        idx = SpatialIndex(PointCloud([[1, 0, 0], [-1, 0, 0], [0, 1, 0]]))
        res = knn(idx, Point(0, 0, 0), 2)
        assert [i for i, _ in res] == [0, 1]

    def test_empty_index_query_error(self):
        idx = SpatialIndex(PointCloud(np.zeros((0, 3))))
        with pytest.raises(ValueError):
            idx.knn(Point(0, 0, 0), 1)
        with pytest.raises(ValueError):
            idx.radius_query_2d((0, 0), 1.0)

    def test_radius_vertical_cylinder_ignores_z(self):
        idx = SpatialIndex(PointCloud([[0, 0, 100], [2, 0, 0]]))
        assert radius_query_2d(idx, (0, 0), 1.0) == [0]

    def test_radius_rejects_bad_radius(self):
        idx = SpatialIndex(PointCloud([[0, 0, 0]]))
        with pytest.raises(ValueError):
            radius_query_2d(idx, (0, 0), 0.0)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_knn_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        xyz = rng.uniform(-5, 5, (200, 3))
        idx = SpatialIndex(PointCloud(xyz))
        q = Point(*rng.uniform(-5, 5, 3))
        got = idx.knn(q, 7)
        want = brute_knn(xyz, q.as_array(), 7)
        assert [i for i, _ in got] == [i for i, _ in want]
        np.testing.assert_allclose([d for _, d in got], [d for _, d in want],
                                   rtol=1e-12)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_radius_2d_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        xyz = rng.uniform(-5, 5, (500, 3))
        idx = SpatialIndex(PointCloud(xyz))
        center = rng.uniform(-5, 5, 2)
        r = rng.uniform(0.5, 4.0)
        assert idx.radius_query_2d(center, r) == brute_radius_2d(xyz, center, r)
