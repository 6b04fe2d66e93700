import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from qconsol.errors import DomainError, EvaluationError
from qconsol.geometry import Primitive, SyntheticScene, camera_ring
from qconsol.metrics import (Correspondences, build_report, consistency_from, correspondences,
                             cross_view_consistency, depth_rmse, feature_psnr, read_pgm,
                             report_csv, sample_surface_points, to_gray, write_pgm, write_report)
from qconsol.pipeline import build_scenario, run_pipeline
from qconsol.qfield import DepthSupervision, FeatureField, LayerSpec, QuerySet, render_field_queries

from .configs import tiny_config


def _scene():
    return SyntheticScene((Primitive("sphere", (0, 0, 0), [0.5], density=20.0),
                           Primitive("box", (0.2, 0.1, 0.5), (0.2, 0.2, 0.2), density=20.0)), (3,))


def _cams(n=4):
    return camera_ring(n, 3.0, 25.0, size=32, fov_deg=40, t_near=1.5, t_far=4.5)


def _constant(vectors, res=8):
    return QuerySet(0, [np.stack([np.broadcast_to(np.asarray(v, float), (res, res, len(v))) for v in vectors])])


class TestSurfacePoints:
    def test_on_surface(self):
        scene = _scene()
        pts = sample_surface_points(scene, _cams(), 64, seed=0)
        assert pts.shape == (64, 3)
        assert np.all(scene.density(pts) >= 0.5 * scene.max_density)

    def test_seeded(self):
        a = sample_surface_points(_scene(), _cams(), 16, seed=4)
        b = sample_surface_points(_scene(), _cams(), 16, seed=4)
        npt.assert_array_equal(a, b)


class TestConsistency:
    def test_identical_constant_maps(self):
        cams = _cams()
        qs = _constant([[0.3, -1.0, 2.0]] * 4)
        npt.assert_array_equal(cross_view_consistency(qs, _scene(), cams, 64, 0), [0.0])

    def test_two_views_d_over_m(self):
        cams = _cams(4)[:2]
        a, b = np.array([3.0, 4.0, 0.0]), np.array([4.0, 3.0, 0.0])
        qs = _constant([a, b])
        got = cross_view_consistency(qs, _scene(), cams, 64, 0)
        assert got[0] == pytest.approx(np.linalg.norm(a - b) / 5.0, rel=1e-12)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_orthogonal_invariance(self, seed):
        rng = np.random.default_rng(seed)
        cams = _cams()
        corr = correspondences(_scene(), cams, 48, 1)
        maps = rng.normal(size=(4, 8, 8, 5))
        rot = ortho_group.rvs(5, random_state=seed % (2 ** 32))
        a = consistency_from(QuerySet(0, [maps]), corr, cams)
        b = consistency_from(QuerySet(0, [maps @ rot]), corr, cams)
        npt.assert_allclose(a, b, rtol=1e-10)

    def test_deterministic(self):
        cams = _cams()
        qs = QuerySet(0, [np.random.default_rng(0).normal(size=(4, 8, 8, 3))])
        a = cross_view_consistency(qs, _scene(), cams, 32, 5)
        b = cross_view_consistency(qs, _scene(), cams, 32, 5)
        npt.assert_array_equal(a, b)

    def test_errors(self):
        cams = _cams(2)
        with pytest.raises(DomainError):
            correspondences(_scene(), cams[:1], 10, 0)
        with pytest.raises(DomainError):
            correspondences(_scene(), cams, 0, 0)
        corr = Correspondences(np.zeros((3, 3)), np.zeros((2, 3, 2)), np.zeros((2, 3), dtype=bool))
        with pytest.raises(EvaluationError):
            consistency_from(_constant([[1.0], [1.0]]), corr, cams)
        with pytest.raises(DomainError):
            consistency_from(_constant([[1.0]] * 3), corr, cams)

    def test_occlusion(self):
        # opposite cameras: the far side of the sphere is hidden from each
        cams = _cams(2)
        corr = correspondences(_scene(), cams, 64, 2)
        assert corr.visible.any(axis=1).all()
        assert not (corr.visible[0] & corr.visible[1]).all()


class TestPSNR:
    @pytest.mark.parametrize("peak,e", [(1.0, 0.1), (4.0, 0.01)])
    def test_uniform_error(self, peak, e):
        ref = np.zeros((4, 4, 2))
        ref[0, 0, 0] = -peak
        assert feature_psnr(ref + e, ref) == pytest.approx(20 * math.log10(peak / e), abs=1e-9)

    def test_doubling_error(self):
        rng = np.random.default_rng(0)
        ref, err = rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8, 3))
        drop = feature_psnr(ref + 0.1 * err, ref) - feature_psnr(ref + 0.2 * err, ref)
        assert drop == pytest.approx(20 * math.log10(2), abs=1e-9)

    def test_identical_and_mismatch(self):
        x = np.ones((2, 2))
        assert feature_psnr(x, x) == math.inf
        with pytest.raises(DomainError):
            feature_psnr(x, np.ones((2, 3)))


class TestDepthRMSE:
    def _setup(self):
        field = FeatureField((LayerSpec(0, 8, 2),), seed=3)
        cams = _cams(3)
        depth = np.stack([render_field_queries(field, c, 0, 16)[1] for c in cams])
        return field, cams, depth

    def test_perfect_depth(self):
        field, cams, depth = self._setup()
        sup = DepthSupervision({8: depth}, {8: np.ones_like(depth, dtype=bool)})
        assert depth_rmse(field, sup, cams, 16) == 0.0

    def test_view_order(self):
        field, cams, depth = self._setup()
        mask = np.random.default_rng(0).random(depth.shape) > 0.3
        target = depth + 0.1 * np.random.default_rng(1).normal(size=depth.shape)
        a = depth_rmse(field, DepthSupervision({8: target}, {8: mask}), cams, 16)
        order = [2, 0, 1]
        b = depth_rmse(field, DepthSupervision({8: target[order]}, {8: mask[order]}),
                       [cams[i] for i in order], 16)
        assert a == pytest.approx(b, rel=1e-12)

    def test_empty_mask(self):
        field, cams, depth = self._setup()
        with pytest.raises(EvaluationError):
            depth_rmse(field, DepthSupervision({8: depth}, {8: np.zeros_like(depth, dtype=bool)}), cams, 16)


class TestImages:
    def test_zero_map_mid_gray(self):
        npt.assert_array_equal(to_gray(np.zeros((4, 4, 5))), np.full((4, 12), 128, dtype=np.uint8))

    def test_clipping_and_fewer_channels(self):
        img = to_gray(np.array([[[10.0]], [[-10.0]]]))
        npt.assert_array_equal(img, [[255], [0]])

    def test_pgm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
        write_pgm(tmp_path / "a.pgm", img)
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")
        npt.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)


@pytest.fixture(scope="module")
def tiny_run():
    return run_pipeline(build_scenario(tiny_config()), "full")


class TestReport:
    def test_rows(self, tiny_run):
        rep = build_report(tiny_run)
        assert len(rep.rows) == len(tiny_run.extracted) + 1
        assert rep.rows[-1]["interval_index"] == "final"
        assert list(rep.rows[0]) == ["interval_index", "timestep", "consistency_layer_0",
                                     "consistency_layer_1", "depth_rmse", "feature_psnr"]
        assert len(rep.series) == len(tiny_run.extracted)
        for row in rep.rows:
            assert all(np.isfinite(v) and v >= 0 for k, v in row.items() if k != "interval_index")

    def test_files_and_byte_identical_csv(self, tiny_run, tmp_path):
        write_report(tiny_run, tmp_path / "a", figures=True)
        write_report(tiny_run, tmp_path / "b", figures=False)
        csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
        assert csv_a == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert csv_a.decode() == report_csv(build_report(tiny_run))
        assert (tmp_path / "a" / "consistency.png").stat().st_size > 0
        assert (tmp_path / "a" / "queries.png").stat().st_size > 0
        assert not (tmp_path / "b" / "consistency.png").exists()
        names = sorted(p.name for p in (tmp_path / "a" / "images").iterdir())
        assert names == sorted(f"view{v}_layer{l}.pgm" for v in range(3) for l in (0, 1))

    def test_unguided_has_nan_field_columns(self):
        art = run_pipeline(build_scenario(tiny_config()), "unguided_baseline")
        rep = build_report(art)
        assert math.isnan(rep.depth_rmse) and math.isnan(rep.feature_psnr)
        assert np.all(np.isfinite(rep.consistency))

    def test_unwritable(self, tiny_run, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            write_report(tiny_run, blocker / "out", figures=False)
