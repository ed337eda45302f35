import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from fastsplat import loss_metrics as lm


def ssim_oracle(x, y):
    """Channel-wise SSIM with scipy's mirror-mode Gaussian filter (radius 5, sigma 1.5)."""
    out = []
    for c in range(x.shape[2]):
        f = lambda a: gaussian_filter(a, 1.5, mode="mirror", truncate=5 / 1.5)
        a, b = x[..., c], y[..., c]
        ma, mb = f(a), f(b)
        saa, sbb, sab = f(a * a) - ma ** 2, f(b * b) - mb ** 2, f(a * b) - ma * mb
        out.append((2 * ma * mb + lm.C1) * (2 * sab + lm.C2)
                   / ((ma ** 2 + mb ** 2 + lm.C1) * (saa + sbb + lm.C2)))
    return np.mean(out)


def test_identical_images_give_zero_loss(rng):
    x = rng.uniform(size=(20, 24, 3))
    loss, grad = lm.training_loss(x, x)
    assert abs(loss) < 1e-12 and np.abs(grad).max() < 1e-12


def test_constant_images_formula():
    a, b = 0.7, 0.4
    loss, _ = lm.training_loss(np.full((16, 16, 3), a), np.full((16, 16, 3), b))
    s = (2 * a * b + lm.C1) / (a * a + b * b + lm.C1)
    assert loss == pytest.approx(0.8 * 0.3 + 0.2 * (1 - s), rel=1e-12)


def test_ssim_matches_independent_filter(rng):
    x = rng.uniform(size=(19, 23, 3))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert lm.ssim(x, y) == pytest.approx(ssim_oracle(x, y), abs=1e-12)


def test_loss_gradient_matches_finite_differences(rng):
    x = rng.uniform(size=(16, 16, 3))
    y = rng.uniform(size=(16, 16, 3))
    _, grad = lm.training_loss(x, y)
    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (lm.training_loss(xp, y)[0] - lm.training_loss(xm, y)[0]) / (2 * h)
    rel = np.abs(grad - num) / np.maximum(np.abs(num), 1e-3 * np.abs(num).max())
    assert rel.max() < 1e-4


def test_gradient_flows_above_one():
    x = np.full((12, 12, 3), 0.5)
    x[5, 5, 0] = 1.3
    y = np.full((12, 12, 3), 0.5)
    _, grad = lm.training_loss(x, y)
    assert grad[5, 5, 0] > 0


def test_gradient_keeps_float32():
    x = np.full((12, 12, 3), 0.5, np.float32)
    assert lm.training_loss(x, x + 0.1)[1].dtype == np.float32


def test_psnr_examples(rng):
    y = rng.uniform(size=(8, 8, 3))
    assert lm.psnr(y, y) == float("inf")
    x = y + np.sqrt(1e-3) * np.where(rng.uniform(size=y.shape) < 0.5, -1, 1)
    assert lm.psnr(x, y) == pytest.approx(30.0, abs=1e-9)
    z = rng.uniform(size=y.shape)
    assert lm.psnr(z, y) == pytest.approx(-10 * np.log10(np.mean((z - y) ** 2)), rel=1e-12)


def test_blur_rows_sum_to_one():
    for n in (1, 3, 11, 40):
        assert np.allclose(lm.blur_matrix(n).sum(axis=1), 1.0)


def test_metrics_csv_round_trip(tmp_path):
    rows = [(0, 31.25, 0.9512), (1, 28.5, 0.9)]
    lm.write_metrics_csv(tmp_path / "m.csv", rows)
    back = lm.read_metrics_csv(tmp_path / "m.csv")
    assert [(int(v), p, s) for v, p, s in back] == rows
