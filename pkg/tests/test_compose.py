import numpy as np
import pytest

from sketch3d.compose import composite, composite_backward
from sketch3d.raster2d import ImageBuffer


def buffers(seed=0, shape=(12, 16)):
    rng = np.random.default_rng(seed)
    return ImageBuffer(rng.uniform(0, 1, shape)), ImageBuffer(rng.uniform(0, 1, shape))


def test_white_identity():
    a, _ = buffers()
    out = composite(a, ImageBuffer.white(*a.shape))
    assert np.array_equal(out.data, a.data)


def test_product():
    a = ImageBuffer(np.full((4, 4), 0.5))
    b = ImageBuffer(np.full((4, 4), 0.5))
    assert np.allclose(composite(a, b).data, 0.25)


def test_commutative_associative():
    a, b = buffers(1)
    c, _ = buffers(2)
    assert np.array_equal(composite(a, b).data, composite(b, a).data)
    assert np.allclose(
        composite(composite(a, b), c).data, composite(a, composite(b, c)).data, atol=1e-15
    )


def test_ink_never_lightens():
    a, b = buffers(3)
    out = composite(a, b)
    assert np.all(out.data <= a.data + 1e-15)
    assert np.all(out.data <= b.data + 1e-15)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_dimension_mismatch():
    a = ImageBuffer(np.ones((4, 4)))
    b = ImageBuffer(np.ones((4, 5)))
    with pytest.raises(ValueError):
        composite(a, b)


class TestBackward:
    def test_white_branch_passthrough(self):
        a, _ = buffers(4)
        go = ImageBuffer(np.random.default_rng(5).normal(size=a.shape))
        g_ind, g_dep = composite_backward(a, ImageBuffer.white(*a.shape), go)
        assert np.array_equal(g_ind.data, go.data)

    def test_zero_grad(self):
        a, b = buffers(6)
        g_ind, g_dep = composite_backward(a, b, ImageBuffer(np.zeros(a.shape)))
        assert np.all(g_ind.data == 0.0) and np.all(g_dep.data == 0.0)

    def test_matches_fd(self):
        a, b = buffers(7, shape=(6, 7))
        rng = np.random.default_rng(8)
        go = ImageBuffer(rng.normal(size=a.shape))
        g_ind, g_dep = composite_backward(a, b, go)
        h = 1e-7

        def loss(x, y):
            return float((composite(x, y).data * go.data).sum())

        for (i, j) in [(0, 0), (2, 3), (5, 6)]:
            pa = a.data.copy()
            pa[i, j] += h
            ma = a.data.copy()
            ma[i, j] -= h
            fd = (loss(ImageBuffer(pa), b) - loss(ImageBuffer(ma), b)) / (2 * h)
            assert abs(fd - g_ind.data[i, j]) < 1e-6 * max(1.0, abs(fd))
            pb = b.data.copy()
            pb[i, j] += h
            mb = b.data.copy()
            mb[i, j] -= h
            fd = (loss(a, ImageBuffer(pb)) - loss(a, ImageBuffer(mb))) / (2 * h)
            assert abs(fd - g_dep.data[i, j]) < 1e-6 * max(1.0, abs(fd))
