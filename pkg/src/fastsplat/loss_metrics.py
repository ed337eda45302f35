"""Training loss (L1 + D-SSIM) with its exact gradient, and evaluation metrics."""
from __future__ import annotations

import csv
from functools import lru_cache

import numpy as np

L1_WEIGHT = 0.8
DSSIM_WEIGHT = 0.2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _reflect(j: int, n: int) -> int:
    """Mirror index without repeating the edge sample (d c b | a b c d | c b a)."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    j = j % period
    return period - j if j >= n else j


@lru_cache(maxsize=32)
def blur_matrix(n: int, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """(n, n) matrix applying the normalized 1D Gaussian window with reflect padding."""
    half = window // 2
    taps = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    taps /= taps.sum()
    B = np.zeros((n, n))
    for i in range(n):
        for k, w in zip(range(-half, half + 1), taps):
            B[i, _reflect(i + k, n)] += w
    B.setflags(write=False)
    return B


def _blur(img, BH, BW):
    return np.einsum("ij,jkc,lk->ilc", BH, img, BW, optimize=True)


def _blur_adjoint(img, BH, BW):
    return np.einsum("ji,jkc,kl->ilc", BH, img, BW, optimize=True)


def _as_hwc(img):
    img = np.asarray(img, np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim_map(x, y):
    x, y = _as_hwc(x), _as_hwc(y)
    BH, BW = blur_matrix(x.shape[0]), blur_matrix(x.shape[1])
    mx, my = _blur(x, BH, BW), _blur(y, BH, BW)
    sxx = _blur(x * x, BH, BW) - mx * mx
    syy = _blur(y * y, BH, BW) - my * my
    sxy = _blur(x * y, BH, BW) - mx * my
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return num / den


def ssim(x, y) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) and reflect padding."""
    return float(ssim_map(x, y).mean())


def ssim_grad(x, y, upstream: float = 1.0):
    """(SSIM, d SSIM / d x) for the mean SSIM."""
    shape = np.shape(x)
    x, y = _as_hwc(x), _as_hwc(y)
    BH, BW = blur_matrix(x.shape[0]), blur_matrix(x.shape[1])
    mx, my = _blur(x, BH, BW), _blur(y, BH, BW)
    sxx = _blur(x * x, BH, BW) - mx * mx
    syy = _blur(y * y, BH, BW) - my * my
    sxy = _blur(x * y, BH, BW) - mx * my
    A1 = 2 * mx * my + C1
    A2 = 2 * sxy + C2
    B1 = mx * mx + my * my + C1
    B2 = sxx + syy + C2
    S = A1 * A2 / (B1 * B2)
    g = upstream / S.size
    dA1 = g * A2 / (B1 * B2)
    dA2 = g * A1 / (B1 * B2)
    dB1 = -g * S / B1
    dB2 = -g * S / B2
    d_mx = 2 * my * dA1 - 2 * my * dA2 + 2 * mx * dB1 - 2 * mx * dB2
    d_exx = dB2
    d_exy = 2 * dA2
    dx = (_blur_adjoint(d_mx, BH, BW) + 2 * x * _blur_adjoint(d_exx, BH, BW)
          + y * _blur_adjoint(d_exy, BH, BW))
    return float(S.mean()), dx.reshape(shape)


def training_loss(rendered, target, l1_weight: float = L1_WEIGHT, dssim_weight: float = DSSIM_WEIGHT):
    """0.8 * L1 + 0.2 * (1 - SSIM) on the unclipped render, with d loss / d rendered."""
    rendered = np.asarray(rendered)
    x = rendered.astype(np.float64)
    y = np.asarray(target, np.float64)
    diff = x - y
    l1 = np.abs(diff).mean()
    s, ds = ssim_grad(x, y, -dssim_weight)
    loss = l1_weight * l1 + dssim_weight * (1 - s)
    grad = l1_weight * np.sign(diff) / diff.size + ds
    return float(loss), grad.astype(rendered.dtype)


def psnr(rendered, target) -> float:
    """10 log10(1 / MSE) on [0, 1] images; ``inf`` for identical inputs."""
    mse = float(np.mean((np.asarray(rendered, np.float64) - np.asarray(target, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def write_metrics_csv(path, rows) -> None:
    """``rows`` holds (view id, PSNR, SSIM) triples."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view", "psnr", "ssim"])
        for view, p, s in rows:
            w.writerow([view, f"{p:.6f}", f"{s:.6f}"])


def read_metrics_csv(path) -> list[tuple[str, float, float]]:
    with open(path, newline="") as f:
        return [(r["view"], float(r["psnr"]), float(r["ssim"])) for r in csv.DictReader(f)]
