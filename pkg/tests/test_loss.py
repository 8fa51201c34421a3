import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmnet import loss as L
from cmnet import tensor as T
from cmnet.errors import ShapeError, UsageError
from cmnet.rng import make_rng
from cmnet.tensor import Tensor


def full(shape, v):
    return Tensor(np.full(shape, float(v)), precision="double")


def test_alpha_l1_examples():
    s = (1, 1, 4, 4)
    assert L.alpha_l1(full(s, 0.3), full(s, 0.3)).item() == 0
    assert L.alpha_l1(full(s, 0), full(s, 1)).item() == 1
    assert L.alpha_l1(full(s, 0.25), full(s, 0.75)).item() == 0.5
    with pytest.raises(ShapeError):
        L.alpha_l1(full(s, 0), full((1, 1, 4, 2), 0))


def test_pyramid_reconstruction(rng):
    x = Tensor(rng.random((2, 1, 32, 48)), precision="double")
    bands = L.laplacian_pyramid(x, 5)
    assert len(bands) == 5 and bands[-1].shape == (2, 1, 2, 3)
    assert np.abs(L.rebuild(bands).data - x.data).max() < 1e-6


def test_pyramid_constant_image():
    bands = L.laplacian_pyramid(full((1, 1, 32, 32), 0.4), 5)
    for b in bands[:-1]:
        assert np.all(b.data == 0)
    np.testing.assert_allclose(bands[-1].data, 0.4, atol=1e-15)


def test_pyramid_indivisible():
    with pytest.raises(ShapeError):
        L.laplacian_pyramid(full((1, 1, 24, 32), 0), 5)


def test_pyramid_golden_band_energies():
    x = Tensor(make_rng(7, "golden").random((1, 1, 32, 32)), precision="double")
    energies = [float(np.sum(b.data ** 2)) for b in L.laplacian_pyramid(x, 5)]
    golden = [73.3806451025145, 1.0667625496848077, 0.051478876063725316,
              0.0011152293433385537, 0.9807232205071653]
    np.testing.assert_allclose(energies, golden, rtol=1e-12)


def test_lap_loss_weights():
    # a difference living only in the coarsest Gaussian level is weighted by 16
    a, b = full((1, 1, 16, 16), 0.5), full((1, 1, 16, 16), 0.25)
    assert L.lap_loss(a, b).item() == pytest.approx(16 * 0.25, abs=1e-12)
    # per-level weights recovered from a direct band computation
    rng = np.random.default_rng(3)
    p = Tensor(rng.random((1, 1, 16, 16)), precision="double")
    g = Tensor(rng.random((1, 1, 16, 16)), precision="double")
    levels = [np.abs(x.data - y.data).mean() for x, y in zip(L.laplacian_pyramid(p), L.laplacian_pyramid(g))]
    expected = sum(w * v for w, v in zip([1, 2, 4, 8, 16], levels))
    assert L.lap_loss(p, g).item() == pytest.approx(expected, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (1, 1, 16, 16), elements=st.floats(0, 1)),
       arrays(np.float64, (1, 1, 16, 16), elements=st.floats(0, 1)))
def test_lap_loss_symmetric_nonnegative(a, b):
    ta, tb = Tensor(a), Tensor(b)
    assert L.lap_loss(ta, ta).item() == 0
    ab, ba = L.lap_loss(ta, tb).item(), L.lap_loss(tb, ta).item()
    assert ab >= 0 and ab == pytest.approx(ba, rel=1e-12, abs=1e-15)


def test_fg_l1_examples():
    s3, s1 = (1, 3, 4, 4), (1, 1, 4, 4)
    assert L.fg_l1(full(s3, 0.9), full(s3, 0.1), full(s1, 0)).item() == 0
    assert L.fg_l1(full(s3, 0.5), full(s3, 0.5), full(s1, 1)).item() == 0
    a = np.zeros(s1)
    a[..., :2, :] = 0.3
    half = L.fg_l1(full(s3, 0.6), full(s3, 0.4), Tensor(a)).item()
    assert half == pytest.approx(0.2, abs=1e-12)


def test_fg_l1_mask_is_strict():
    a = np.zeros((1, 1, 2, 2))
    a[0, 0, 0, 0] = 1e-9
    pred = np.zeros((1, 3, 2, 2))
    pred[:, :, 0, 0] = 1.0
    pred[:, :, 1, 1] = 5.0
    assert L.fg_l1(Tensor(pred), Tensor(np.zeros_like(pred)), Tensor(a)).item() == 1.0


def test_total_loss_examples():
    one = lambda v: full((1, 1, 1, 1), v)
    br = L.total_loss([(one(0.3), one(0.5), one(2.0))])
    assert br.total.item() == pytest.approx(0.3 + 0.5 + 0.2, abs=1e-15)
    assert L.total_loss([(one(0), one(0), one(0))]).total.item() == 0
    two = L.total_loss([(one(0.3), one(0.5), one(2.0))] * 2)
    assert two.total.item() == pytest.approx(2 * br.total.item(), abs=1e-15)
    assert set(two.values()) == {"l1a", "lap", "l1fg", "loss"}
    with pytest.raises(UsageError):
        L.total_loss([])


@pytest.mark.parametrize("which", ["alpha_l1", "lap_loss", "fg_l1"])
def test_loss_gradients(which, rng):
    p = Tensor(rng.random((1, 3 if which == "fg_l1" else 1, 16, 16)), requires_grad=True)
    g = Tensor(rng.random(p.shape))
    a = Tensor(np.where(rng.random((1, 1, 16, 16)) < 0.4, 0.0, rng.random((1, 1, 16, 16))))
    fns = {"alpha_l1": lambda: L.alpha_l1(p, g), "lap_loss": lambda: L.lap_loss(p, g),
           "fg_l1": lambda: L.fg_l1(p, g, a)}
    assert T.check_gradients(fns[which], [p], eps=1e-6) < 1e-5
