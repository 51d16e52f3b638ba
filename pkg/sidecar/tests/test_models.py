import numpy as np
import pytest


def gradient_spot_check(fn, target, render, n_pixels=10, h=1e-2):
    """Relative agreement of grad*h with the actual loss change, probed at
    the pixels carrying the largest gradient (near-zero-gradient pixels make
    a 20% relative comparison ill-posed)."""
    _, grad = fn(target, render)
    flat = np.argsort(np.abs(grad).ravel())[::-1][:n_pixels]
    worst = 0.0
    for idx in flat:
        i, j, c = np.unravel_index(idx, grad.shape)
        up = render.copy()
        up[i, j, c] = np.clip(up[i, j, c] + h, 0, 1)
        dn = render.copy()
        dn[i, j, c] = np.clip(dn[i, j, c] - h, 0, 1)
        actual = (fn(target, up)[0] - fn(target, dn)[0]) / (up[i, j, c] - dn[i, j, c])
        predicted = grad[i, j, c]
        worst = max(worst, abs(actual - predicted) / max(abs(actual), abs(predicted)))
    return worst


class TestStructural:
    def test_self_similarity(self, models):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
        loss, grad = models.structural(img, img)
        assert abs(loss) < 1e-5
        assert np.abs(grad).max() < 1e-4

    def test_white_vs_black_separates(self, models):
        white = np.ones((64, 64, 3), dtype=np.float32)
        black = np.zeros((64, 64, 3), dtype=np.float32)
        loss, _ = models.structural(white, black)
        assert loss > 0.3

    def test_gradient_spot_check(self, models):
        rng = np.random.default_rng(2)
        target = rng.uniform(0, 1, (48, 48, 3)).astype(np.float32)
        render = np.clip(target + rng.normal(0, 0.2, target.shape), 0, 1).astype(np.float32)
        worst = gradient_spot_check(models.structural, target, render)
        assert worst < 0.2

    def test_finite_gradients(self, models):
        rng = np.random.default_rng(3)
        t = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        r = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        loss, grad = models.structural(t, r)
        assert np.isfinite(loss) and np.isfinite(grad).all()
        assert loss >= 0.0


class TestSemantic:
    def test_self_similarity(self, models):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 1, (96, 96, 3)).astype(np.float32)
        loss, _ = models.semantic(img, img)
        assert abs(loss) < 1e-5

    def test_symmetry(self, models):
        rng = np.random.default_rng(5)
        a = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
        b = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
        assert models.semantic(a, b)[0] == pytest.approx(models.semantic(b, a)[0], abs=1e-6)

    def test_translation_stability(self, models):
        # a 4 px shift of a 224-square image barely moves the embedding
        rng = np.random.default_rng(6)
        base = rng.uniform(0, 1, (224, 224, 3)).astype(np.float32)
        from scipy import ndimage

        smooth = ndimage.gaussian_filter(base, sigma=(12, 12, 0)).astype(np.float32)
        smooth = (smooth - smooth.min()) / (smooth.max() - smooth.min())
        shifted = np.roll(smooth, 4, axis=1)
        loss, _ = models.semantic(smooth, shifted)
        assert loss < 0.05

    def test_gradient_spot_check(self, models):
        # structured inputs with a solid embedding gap; noise images embed
        # almost identically and give a degenerate, sub-float32 loss. The
        # encoder's curvature is steep, so the step is smaller than the
        # structural check's (autograd matches float64 FD at h=1e-6 to 0.1%)
        from scipy import ndimage

        rng1, rng2 = np.random.default_rng(1), np.random.default_rng(2)
        a = ndimage.gaussian_filter(rng1.uniform(0, 1, (64, 64, 3)), sigma=(6, 6, 0))
        target = ((a - a.min()) / (a.max() - a.min())).astype(np.float32)
        b = ndimage.gaussian_filter(rng2.uniform(0, 1, (64, 64, 3)), sigma=(4, 4, 0))
        render = ((b - b.min()) / (b.max() - b.min())).astype(np.float32)
        worst = gradient_spot_check(models.semantic, target, render, h=1e-4)
        assert worst < 0.2

    def test_range(self, models):
        rng = np.random.default_rng(8)
        a = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
        b = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
        loss, _ = models.semantic(a, b)
        assert 0.0 <= loss <= 2.0
