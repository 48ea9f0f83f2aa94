import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dagankit.photometric import PhotometricConfig, l1, photometric_error, psnr, ssim
from dagankit.tensor import ShapeError

images = arrays(np.float64, (1, 3, 6, 6), elements=st.floats(0, 1))


def test_ssim_self_is_one(rng):
    img = rng.uniform(size=(1, 3, 8, 8))
    assert ssim(img, img).item() == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_pair():
    c1 = 1e-4
    value = ssim(np.zeros((1, 3, 5, 5)), np.ones((1, 3, 5, 5))).item()
    assert value == pytest.approx(c1 / (1 + c1), rel=1e-9)
    assert value == pytest.approx(9.999e-5, rel=1e-4)


@settings(max_examples=30, deadline=None)
@given(images, images)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b).item()
    assert s == pytest.approx(ssim(b, a).item(), abs=1e-12)
    assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9


@settings(max_examples=30, deadline=None)
@given(images, images)
def test_pe_non_negative_and_zero_on_self(a, b):
    assert photometric_error(a, a).item() == pytest.approx(0.0, abs=1e-12)
    assert photometric_error(a, b).item() >= -1e-12


def test_pe_constant_pair():
    v = photometric_error(np.zeros((1, 3, 5, 5)), np.ones((1, 3, 5, 5))).item()
    assert v == pytest.approx(0.8 * (1 - 1e-4 / (1 + 1e-4)) + 0.2, rel=1e-12)
    assert v == pytest.approx(0.99992, abs=1e-5)


def test_pe_alpha_zero_is_l1(rng):
    a, b = rng.uniform(size=(1, 3, 6, 6)), rng.uniform(size=(1, 3, 6, 6))
    assert photometric_error(a, b, PhotometricConfig(alpha=0.0)).item() == pytest.approx(np.abs(a - b).mean())


def test_pe_mask_restricts_pixels(rng):
    a = rng.uniform(size=(1, 3, 6, 6))
    b = a.copy()
    b[..., 0] += 0.5
    mask = np.ones((1, 1, 6, 6), dtype=bool)
    mask[..., :2] = False
    cfg = PhotometricConfig(alpha=0.0)
    assert photometric_error(a, b, cfg, mask=mask).item() == pytest.approx(0.0)
    with pytest.raises(ValueError):
        photometric_error(a, b, mask=np.zeros((1, 1, 6, 6), dtype=bool))


def test_config_validation():
    with pytest.raises(ValueError):
        PhotometricConfig(alpha=1.5)
    with pytest.raises(ValueError):
        PhotometricConfig(window=4)
    with pytest.raises(ValueError):
        PhotometricConfig(c1=0.0)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        photometric_error(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 5, 5)))
    with pytest.raises(ShapeError):
        psnr(np.zeros(3), np.zeros(4))


def test_metric_examples():
    img = np.random.default_rng(0).uniform(size=(3, 8, 8))
    assert psnr(img, img) == 99.0
    a, b = np.zeros((3, 4, 4)), np.full((3, 4, 4), 0.1)  # mse 0.01
    assert psnr(a, b) == pytest.approx(20.0)
    assert l1(np.zeros(4), np.full(4, 0.25)) == 0.25
    assert l1(np.zeros((3, 2, 2)), np.ones((3, 2, 2))) == 1.0
