"""Mip-Splatting style anti-aliasing: sampling rates, 3D smoothing, 2D Mip filter."""
from __future__ import annotations

import numpy as np

KAPPA_3D = 0.2
MIP_VARIANCE = 0.1
CLASSIC_DILATION = 0.3
RECOMPUTE_INTERVAL = 100
SCREEN_MARGIN = 0.15

AA_MODES = ("off", "filter3d_original", "filter3d_clip", "full")


def filter_modes(aa: str) -> tuple[str | None, bool]:
    """(3D filter formulation, 2D Mip filter enabled) for an ``aa`` config value."""
    table = {"off": (None, False), "filter3d_original": ("original", False),
             "filter3d_clip": ("clip", False), "full": ("clip", True)}
    if aa not in table:
        raise ValueError(f"unknown aa mode {aa!r}; expected one of {AA_MODES}")
    return table[aa]


def default_dilation(aa: str) -> float:
    return MIP_VARIANCE if filter_modes(aa)[1] else CLASSIC_DILATION


def compute_sampling_rates(means: np.ndarray, cameras, fallback: float) -> np.ndarray:
    """Per-Gaussian maximal sampling rate max_n f_n / d_n over views that see the mean.

    A view sees a mean when it lies beyond the near plane and projects inside the
    image enlarged by 15% on each side. Gaussians seen by no view get ``fallback``.
    """
    means = np.asarray(means, np.float64)
    nu = np.zeros(means.shape[0])
    for cam in cameras:
        p = means @ cam.rotation.T + cam.translation
        z = p[:, 2]
        front = z > cam.near
        zs = np.where(front, z, 1.0)
        u = cam.fx * p[:, 0] / zs + cam.cx
        v = cam.fy * p[:, 1] / zs + cam.cy
        mx, my = SCREEN_MARGIN * cam.width, SCREEN_MARGIN * cam.height
        inside = front & (u >= -mx) & (u <= cam.width + mx) & (v >= -my) & (v <= cam.height + my)
        nu = np.where(inside, np.maximum(nu, cam.focal / zs), nu)
    return np.where(nu > 0, nu, fallback)


def filter3d_variance(nu_hat, kappa=KAPPA_3D):
    return kappa / np.asarray(nu_hat) ** 2


def apply_3d_filter_original(scales, opacity, nu_hat, kappa=KAPPA_3D):
    """Smoothed scales and volume-compensated opacity."""
    scales = np.asarray(scales)
    var = filter3d_variance(nu_hat, kappa)
    var = np.asarray(var)[..., None] if np.ndim(scales) > np.ndim(var) else var
    s2 = scales * scales
    filtered = np.sqrt(s2 + var)
    ratio = np.prod(scales / filtered, axis=-1)
    return filtered, np.asarray(opacity) * ratio


def apply_3d_filter_clip(log_scales: np.ndarray, nu_hat, kappa=KAPPA_3D) -> np.ndarray:
    """Clamp scales from below at sqrt(kappa)/nu in place (log space)."""
    floor = np.log(np.sqrt(kappa) / np.asarray(nu_hat, np.float64))
    floor = floor.astype(log_scales.dtype)[:, None]
    np.maximum(log_scales, floor, out=log_scales)
    return log_scales


def mip_compensation(det_pre, det_post, opacity):
    """Opacity scaled by sqrt(det_pre / det_post)."""
    det_pre = np.maximum(np.asarray(det_pre, np.float64), 0.0)
    return np.asarray(opacity) * np.sqrt(det_pre / np.asarray(det_post, np.float64))
