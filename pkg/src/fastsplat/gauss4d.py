"""Space-time Gaussians: 4D rotation from two quaternions, conditioning on time.

A 4D Gaussian is sliced at time t into an ordinary 3D Gaussian whose opacity
is scaled by the temporal marginal. Everything after the slice is the 3D
pipeline unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import QUAT_EPS, ColumnStore
from .raster_forward import Geometry, RenderResult, RenderSettings, render_geometry

VAR_T_FLOOR = 1e-8
SCALE_T_FLOOR = 1e-4


@dataclass
class Store4D(ColumnStore):
    """Raw 4D Gaussian parameters; column 3 of ``means``/``log_scales`` is time."""

    means: np.ndarray
    log_scales: np.ndarray
    quat_left: np.ndarray
    quat_right: np.ndarray
    opacity_logits: np.ndarray
    sh_dc: np.ndarray
    sh_rest: np.ndarray

    def __post_init__(self):
        self._check_shapes()

    @staticmethod
    def row_shapes() -> dict[str, tuple]:
        return {"means": (4,), "log_scales": (4,), "quat_left": (4,), "quat_right": (4,),
                "opacity_logits": (1,), "sh_dc": (3,), "sh_rest": (15, 3)}

    def scales(self) -> np.ndarray:
        return activate_scales4(self.log_scales)

    @classmethod
    def from_static(cls, store: core.ParameterStore, mean_t=0.5, log_scale_t=np.log(1e3)) -> "Store4D":
        """Lift a 3D store to 4D with no space-time coupling."""
        n = len(store)
        dt = store.dtype
        ql = np.empty((n, 4), dt)
        qr = np.empty((n, 4), dt)
        for i, q in enumerate(store.quaternions.astype(np.float64)):
            R = np.eye(4)
            R[:3, :3] = core.rotation_matrices(q)
            a, b = isoclinic_from_rotation(R)
            ql[i], qr[i] = a, b
        means = np.concatenate([store.means, np.full((n, 1), mean_t, dt)], axis=1)
        ls = np.concatenate([store.log_scales, np.full((n, 1), log_scale_t, dt)], axis=1)
        return cls(means, ls, ql, qr, store.opacity_logits.copy(), store.sh_dc.copy(),
                   store.sh_rest.copy())


def activate_scales4(log_scales):
    s = np.exp(log_scales)
    s[..., 3] = np.maximum(s[..., 3], SCALE_T_FLOOR)
    return s


# 4D rotations ----------------------------------------------------------------

def _left_basis():
    """E[k] with L(a) = sum_k a_k E[k], the left-isoclinic matrix of a quaternion."""
    E = np.zeros((4, 4, 4))
    for k in range(4):
        a = np.zeros(4)
        a[k] = 1
        E[k] = left_isoclinic(a)
    return E


def left_isoclinic(q) -> np.ndarray:
    a, b, c, d = np.moveaxis(np.asarray(q), -1, 0)
    return np.stack([np.stack([a, -b, -c, -d], -1), np.stack([b, a, -d, c], -1),
                     np.stack([c, d, a, -b], -1), np.stack([d, -c, b, a], -1)], -2)


def right_isoclinic(q) -> np.ndarray:
    p, q_, r, s = np.moveaxis(np.asarray(q), -1, 0)
    return np.stack([np.stack([p, -q_, -r, -s], -1), np.stack([q_, p, s, -r], -1),
                     np.stack([r, -s, p, q_], -1), np.stack([s, r, -q_, p], -1)], -2)


_EL = _left_basis()
_ER = np.stack([right_isoclinic(np.eye(4)[k]) for k in range(4)])


def _normalize(q):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    ok = n >= QUAT_EPS
    return np.where(ok, q / np.where(ok, n, 1), np.array([1, 0, 0, 0], q.dtype)), n[..., 0], ok[..., 0]


def rot4_from_isoclinic(ql, qr) -> np.ndarray:
    """R4 = L(ql / |ql|) R(qr / |qr|); raises for a degenerate quaternion in scalar use."""
    ql = np.asarray(ql)
    qr = np.asarray(qr)
    a, _, oka = _normalize(ql)
    b, _, okb = _normalize(qr)
    if ql.ndim == 1 and not (oka and okb):
        raise core.DegenerateError("quaternion norm below 1e-4")
    return left_isoclinic(a) @ right_isoclinic(b)


def isoclinic_from_rotation(R4) -> tuple[np.ndarray, np.ndarray]:
    """Unit quaternion pair (ql, qr) with L(ql) R(qr) = R4, up to a joint sign."""
    R4 = np.asarray(R4, np.float64)
    # the 16 products E_k F_l are orthogonal with squared norm 4
    P = np.array([[np.sum(R4 * (_EL[k] @ _ER[l])) / 4 for l in range(4)] for k in range(4)])
    U, S, Vt = np.linalg.svd(P)
    a = U[:, 0] * np.sqrt(S[0])
    b = Vt[0] * np.sqrt(S[0])
    if a[np.argmax(np.abs(a))] < 0:
        a, b = -a, -b
    return a / np.linalg.norm(a), b / np.linalg.norm(b)


def covariance4d(store: Store4D):
    R = rot4_from_isoclinic(store.quat_left, store.quat_right)
    s = activate_scales4(store.log_scales)
    M = R * s[:, None, :]
    return M @ np.swapaxes(M, -1, -2), R, s


# conditioning ------------------------------------------------------------------

def condition_at_time(mean4, cov4, t):
    """Conditional 3D mean and covariance of a 4D Gaussian at time ``t`` (Schur complement)."""
    mean4 = np.asarray(mean4)
    cov4 = np.asarray(cov4)
    c = cov4[..., 3, 3]
    if np.any(c < VAR_T_FLOOR):
        if np.ndim(c) == 0:
            raise core.DegenerateError("temporal variance below floor")
    c = np.maximum(c, VAR_T_FLOOR)
    b = cov4[..., :3, 3]
    dt = t - mean4[..., 3]
    mean3 = mean4[..., :3] + b * (dt / c)[..., None]
    cov3 = cov4[..., :3, :3] - b[..., :, None] * b[..., None, :] / c[..., None, None]
    return mean3, cov3


def marginal_weight(mean_t, var_t, t):
    """Peak-one temporal weight exp(-(t - mean_t)^2 / (2 var_t))."""
    d = t - np.asarray(mean_t)
    return np.exp(-0.5 * d * d / np.asarray(var_t))


@dataclass
class SliceCache:
    t: float
    cov4: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    sigmoid: np.ndarray
    weight: np.ndarray


def slice_geometry(store: Store4D, t: float) -> tuple[Geometry, SliceCache]:
    dt = store.dtype
    cov4, R, s = covariance4d(store)
    c = cov4[:, 3, 3]
    valid = (np.linalg.norm(store.quat_left, axis=1) >= QUAT_EPS) & \
            (np.linalg.norm(store.quat_right, axis=1) >= QUAT_EPS) & (c >= VAR_T_FLOOR)
    mean3, cov3 = condition_at_time(store.means, cov4, dt.type(t))
    cov3 = np.triu(cov3) + np.swapaxes(np.triu(cov3, 1), -1, -2)
    sig = core.activate_opacity(store.opacity_logits[:, 0])
    w = marginal_weight(store.means[:, 3], np.maximum(c, VAR_T_FLOOR), dt.type(t)).astype(dt)
    geom = Geometry(mean3.astype(dt), cov3.astype(dt), (sig * w).astype(dt), store.sh_coeffs(), valid)
    return geom, SliceCache(t, cov4, R, s, sig, w)


def render_4d(camera, store: Store4D, t: float, settings: RenderSettings | None = None,
              background=(0, 0, 0), sh_degree: int = 3, record=None) -> RenderResult:
    """Slice at ``t`` and render with the 3D pipeline."""
    settings = settings or RenderSettings()
    if settings.filter3d is not None:
        raise ValueError("the 3D smoothing filter is not defined for 4D Gaussians")
    geom, cache = slice_geometry(store, t)
    result = render_geometry(camera, geom, settings, background, sh_degree, record)
    result.view.geometry_cache = cache
    return result


def backward_4d(result: RenderResult, store: Store4D, d_image, mode=None) -> tuple[Store4D, np.ndarray]:
    """Gradients of all raw 4D parameters (returned as a :class:`Store4D`) and d mean2d."""
    from .raster_backward import render_backward

    gg = render_backward(result, d_image, mode)
    cache: SliceCache = result.view.geometry_cache
    f8 = np.float64
    cov4 = cache.cov4.astype(f8)
    mu = store.means.astype(f8)
    c = np.maximum(cov4[:, 3, 3], VAR_T_FLOOR)
    b = cov4[:, :3, 3]
    d = cache.t - mu[:, 3]
    dm3 = gg.means.astype(f8)
    G = gg.cov3d.astype(f8)
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    dop = gg.opacity.astype(f8)
    w = cache.weight.astype(f8)
    sig = cache.sigmoid.astype(f8)

    bdm = np.sum(b * dm3, axis=1)
    Gb = np.einsum("nij,nj->ni", G, b)
    bGb = np.sum(b * Gb, axis=1)
    dw = dop * sig
    d_mu = np.zeros_like(mu)
    d_mu[:, :3] = dm3
    d_mu[:, 3] = -bdm / c + dw * w * d / c
    db = dm3 * (d / c)[:, None] - 2 * Gb / c[:, None]
    dc = -bdm * d / c ** 2 + bGb / c ** 2 + dw * w * 0.5 * d * d / c ** 2

    D = np.zeros((len(mu), 4, 4))
    D[:, :3, :3] = G
    D[:, :3, 3] = db
    D[:, 3, 3] = dc
    R = cache.rotation.astype(f8)
    s = cache.scales.astype(f8)
    M = R * s[:, None, :]
    dM = (D + np.swapaxes(D, -1, -2)) @ M
    dR = dM * s[:, None, :]
    ds = np.sum(dM * R, axis=1)
    raw_s = np.exp(store.log_scales.astype(f8))
    floored = np.zeros_like(raw_s, bool)
    floored[:, 3] = raw_s[:, 3] < SCALE_T_FLOOR
    d_logs = np.where(floored, 0, ds * raw_s)

    ql = store.quat_left.astype(f8)
    qr = store.quat_right.astype(f8)
    a, na, oka = _normalize(ql)
    p, npr, okp = _normalize(qr)
    na = np.where(oka, na, 1.0)
    npr = np.where(okp, npr, 1.0)
    Lm = left_isoclinic(a)
    Rm = right_isoclinic(p)
    dL = dR @ np.swapaxes(Rm, -1, -2)
    dRr = np.swapaxes(Lm, -1, -2) @ dR
    da = np.einsum("nij,kij->nk", dL, _EL)
    dp = np.einsum("nij,kij->nk", dRr, _ER)
    dql = (da - a * np.sum(a * da, axis=1, keepdims=True)) / na[:, None]
    dqr = (dp - p * np.sum(p * dp, axis=1, keepdims=True)) / npr[:, None]

    dlogit = dop * w * sig * (1 - sig)
    valid = result.view.geometry.valid
    dt = store.dtype
    grads = Store4D(d_mu.astype(dt), d_logs.astype(dt), dql.astype(dt), dqr.astype(dt),
                    dlogit[:, None].astype(dt), gg.sh[:, 0].astype(dt), gg.sh[:, 1:].astype(dt))
    for arr in grads.arrays().values():
        arr[~valid] = 0
    return grads, gg.mean2d
