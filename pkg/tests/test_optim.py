import types

import numpy as np
import pytest

from conftest import small_scene, turntable_cameras
from sketch3d import geometry as G
from sketch3d.contour import ContourConfig
from sketch3d.losses import LossConfig, PerceptualBackend
from sketch3d.optim import (
    NumericalAbort,
    OptimizeConfig,
    OptState,
    adam_step,
    curve_mask,
    fps_sample,
    init_strokes,
    optimize,
    quadric_mask,
    render_strokes_view,
)
from sketch3d.raster2d import ImageBuffer
from sketch3d.scene import ParamGradient, StrokeSet, pack_params, unpack_params


def one_quadric_state():
    s = StrokeSet([], [G.Superquadric(alpha=(0.5, 0.5, 0.5), epsilon=(1, 1))])
    return s, OptState.init(s)


class TestAdam:
    def test_first_step_magnitude(self):
        _, st = one_quadric_state()
        g = ParamGradient.zeros(0, 1)
        g.data[11] = 1.0  # translation z
        st2 = adam_step(st, g, lr=1e-3)
        assert st.params[11] - st2.params[11] == pytest.approx(1e-3, rel=1e-6)

    def test_zero_gradient_freezes(self):
        _, st = one_quadric_state()
        g = ParamGradient.zeros(0, 1)
        for _ in range(5):
            st = adam_step(st, g)
        assert np.array_equal(st.params, OptState.init(StrokeSet([], [G.Superquadric(
            alpha=(0.5, 0.5, 0.5), epsilon=(1, 1))])).params)

    def test_constant_gradient_sign_consistency(self):
        _, st = one_quadric_state()
        g = ParamGradient.zeros(0, 1)
        g.data[11] = 0.5
        values = [st.params[11]]
        for _ in range(1000):
            st = adam_step(st, g)
            values.append(st.params[11])
        diffs = np.diff(values)
        assert np.all(diffs < 0.0)

    def test_constraint_projection(self):
        s = StrokeSet([], [G.Superquadric(alpha=(0.12, 0.5, 0.98), epsilon=(0.12, 1.85))])
        st = OptState.init(s)
        g = ParamGradient.zeros(0, 1)
        g.data[:] = -50.0  # push everything up hard
        st = adam_step(st, g, lr=10.0)
        out = unpack_params(st.params, 0, 1).quadrics[0]
        assert np.all(out.alpha <= 1.0) and np.all(out.alpha >= 0.1)
        assert np.all(out.epsilon <= 1.9) and np.all(out.epsilon >= 0.1)
        assert np.linalg.norm(out.rotation) == pytest.approx(1.0, abs=1e-12)

    def test_nan_gradient_aborts(self):
        _, st = one_quadric_state()
        g = ParamGradient.zeros(0, 1)
        g.data[3] = np.nan
        with pytest.raises(NumericalAbort):
            adam_step(st, g)

    def test_stage_mask_freezes_other_params(self):
        s = StrokeSet(
            [G.CubicBezier3D((0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0))],
            [G.Superquadric(alpha=(0.5, 0.5, 0.5), epsilon=(1, 1))],
        )
        st = OptState.init(s)
        g = ParamGradient(np.ones(24), 1, 1)
        st2 = adam_step(st, g, update_mask=quadric_mask(1, 1))
        assert np.array_equal(st2.params[:12], st.params[:12])
        assert not np.array_equal(st2.params[12:], st.params[12:])
        st3 = adam_step(st, g, update_mask=curve_mask(1, 1))
        assert np.array_equal(st3.params[12:], st.params[12:])


class TestFPS:
    def test_square_corners(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
        out = fps_sample(pts, 2, seed=3)  # seed 3 starts at (0,0,0) here
        d = np.linalg.norm(out[1] - out[0])
        assert d == pytest.approx(np.sqrt(2))

    def test_k_equals_count(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(10, 3))
        out = fps_sample(pts, 10, seed=1)
        assert sorted(map(tuple, out)) == sorted(map(tuple, pts))

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            fps_sample(np.zeros((3, 3)), 4)

    def test_spread_dominates_random_subsets(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(60, 3))
        k = 8

        def min_pairwise(sub):
            d = np.linalg.norm(sub[:, None, :] - sub[None, :, :], axis=2)
            return d[np.triu_indices(len(sub), 1)].min()

        for seed in range(100):
            fps_spread = min_pairwise(fps_sample(pts, k, seed=seed))
            ridx = np.random.default_rng(1000 + seed).choice(60, k, replace=False)
            assert fps_spread >= min_pairwise(pts[ridx]) - 1e-12


class TestInit:
    @staticmethod
    def _dataset(points=None, segments=None):
        return types.SimpleNamespace(
            views=[], points=points, segments=segments,
            bbox=(np.array([-1.0, -1, -1]), np.array([1.0, 1, 1])),
        )

    def test_no_curves(self):
        rng = np.random.default_rng(0)
        ds = self._dataset(points=rng.uniform(-1, 1, (50, 3)))
        s = init_strokes(ds, 0, 3, "fps-points", seed=1)
        assert s.n_ind == 0 and s.n_dep == 3

    def test_fps_corners_opposite(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]])
        ds = self._dataset(points=pts)
        s = init_strokes(ds, 0, 2, "fps-points", seed=0)
        c0, c1 = s.quadrics[0].translation, s.quadrics[1].translation
        assert np.linalg.norm(c1 - c0) == pytest.approx(np.sqrt(2))

    def test_invariants_hold_across_seeds(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(-2, 2, (80, 3))
        segs = rng.uniform(-2, 2, (15, 2, 3))
        for seed in range(100):
            method = ("random-bbox", "fps-points", "line-segments")[seed % 3]
            ds = self._dataset(points=pts, segments=segs)
            s = init_strokes(ds, 4, 2, method, seed=seed)
            assert s.n_ind == 4 and s.n_dep == 2
            for q in s.quadrics:
                assert np.all(q.alpha >= 0.1) and np.all(q.alpha <= 1.0)
                assert np.all(q.epsilon >= 0.1) and np.all(q.epsilon <= 1.9)
                assert np.linalg.norm(q.rotation) == pytest.approx(1.0, abs=1e-9)
            for c in s.curves:
                assert np.all(np.isfinite(c.control_points))

    def test_missing_data_errors(self):
        with pytest.raises(ValueError):
            init_strokes(self._dataset(), 2, 0, "fps-points")
        with pytest.raises(ValueError):
            init_strokes(self._dataset(), 2, 0, "line-segments")
        with pytest.raises(ValueError):
            init_strokes(self._dataset(), 1, 0, "nope")


def synthetic_dataset(scene, n_views=3, res=72):
    ccfg = ContourConfig(n_samples=48)
    views = []
    for cam in turntable_cameras(n_views, res=res):
        _, _, comp = render_strokes_view(scene, cam, ccfg)
        views.append((comp, cam))
    return types.SimpleNamespace(
        views=views, points=None, segments=None,
        bbox=(np.array([-1.2] * 3), np.array([1.2] * 3)),
    )


class TestOptimize:
    def test_self_match_stationary_100_steps(self):
        scene = small_scene(n_curves=2)
        ds = synthetic_dataset(scene)
        cfg = OptimizeConfig(steps=100, view_batch=2, seed=0,
                             contour=ContourConfig(n_samples=48),
                             loss=LossConfig(backend="pixel-l2"))
        out, hist = optimize(ds, scene, cfg)
        assert np.abs(pack_params(out) - pack_params(scene)).max() < 1e-6
        assert all(loss == 0.0 for _, _, loss in hist)

    def test_stage_isolation_bitwise(self):
        scene = small_scene(n_curves=2)
        ds = synthetic_dataset(scene)
        rng = np.random.default_rng(1)
        start = unpack_params(pack_params(scene) + rng.normal(0, 0.05, scene.n_params), 2, 1)
        cfg = OptimizeConfig(steps=10, stage_split=0.5, view_batch=2, seed=0,
                             contour=ContourConfig(n_samples=48),
                             loss=LossConfig(backend="pixel-l2"))
        seen = {}

        def snoop(step, strokes):
            seen[step] = pack_params(strokes)

        cfg.checkpoint_every = 1
        cfg.on_checkpoint = snoop
        optimize(ds, start, cfg)
        p0 = pack_params(start)
        for step, p in seen.items():
            if step < 5:  # quadric stage: curves bitwise frozen
                assert np.array_equal(p[:24], p0[:24])
            else:  # curve stage: quadrics bitwise frozen vs end of stage 1
                assert np.array_equal(p[24:], seen[4][24:])

    def test_determinism(self):
        scene = small_scene(n_curves=2)
        ds = synthetic_dataset(scene)
        rng = np.random.default_rng(2)
        start = unpack_params(pack_params(scene) + rng.normal(0, 0.03, scene.n_params), 2, 1)
        cfg = OptimizeConfig(steps=12, view_batch=2, seed=11,
                             contour=ContourConfig(n_samples=48),
                             loss=LossConfig(backend="pixel-l2"))
        out1, hist1 = optimize(ds, start, cfg)
        out2, hist2 = optimize(ds, start, cfg)
        assert hist1 == hist2
        assert np.array_equal(pack_params(out1), pack_params(out2))

    def test_nan_loss_aborts_with_step(self):
        scene = small_scene(n_curves=1)
        ds = synthetic_dataset(scene, n_views=2)

        class NaNBackend(PerceptualBackend):
            def structural(self, target, render):
                return np.nan, ImageBuffer(np.zeros(render.shape))

            def semantic(self, target, render):
                return 0.0, ImageBuffer(np.zeros(render.shape))

        cfg = OptimizeConfig(steps=3, view_batch=1, contour=ContourConfig(n_samples=48))
        with pytest.raises(NumericalAbort) as exc:
            optimize(ds, scene, cfg, backend=NaNBackend())
        assert exc.value.step == 0

    def test_curves_only_skips_stage_one_and_robust(self):
        scene = StrokeSet(small_scene(n_curves=2).curves, [])
        ds = synthetic_dataset(scene)
        cfg = OptimizeConfig(steps=4, stage_split=0.5, view_batch=1, seed=0,
                             contour=ContourConfig(n_samples=48),
                             loss=LossConfig(backend="pixel-l2"))
        _, hist = optimize(ds, scene, cfg)
        assert all(stage == "curves-phase" for _, stage, _ in hist)
