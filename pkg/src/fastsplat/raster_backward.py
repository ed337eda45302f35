"""Backward pass: blending adjoints (per-pixel or per-bucket) and projection chain rule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import DensifyStats, GradientStore
from .kernels import GRAD_WIDTH, kernels, merge_instances
from .raster_forward import GeometryCache, RenderResult, ViewState, kernel_scalars

# below this pre-dilation determinant the analytic Mip gradient is dropped
MIP_DET_FLOOR = 1e-8


@dataclass
class SplatGrads:
    """Per-Gaussian gradients w.r.t. the projected splat quantities."""

    mean2d: np.ndarray      # (N, 2)
    conic: np.ndarray       # (N, 3) for (a, b, c) with quadratic a dx^2 + 2 b dx dy + c dy^2
    eff_opacity: np.ndarray  # (N,)
    rgb: np.ndarray         # (N, 3)
    merge_ops: int = 0


@dataclass
class GeometryGrads:
    means: np.ndarray
    cov3d: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    mean2d: np.ndarray


def blend_backward(view: ViewState, d_image: np.ndarray, mode: str | None = None) -> SplatGrads:
    """Adjoint of the blending stage, merged per Gaussian in tile-major order.

    ``per_pixel`` replays each pixel's fragment list from the start; ``per_gaussian``
    restores the checkpointed transmittance at every 32-entry bucket boundary and
    replays only that bucket. Both feed the same per-instance buffers.
    """
    mode = mode or view.settings.backward
    sp = view.splats
    dt = sp.mean2d.dtype
    n = sp.mean2d.shape[0]
    inst = view.instances
    inst_grad = np.zeros((len(inst), GRAD_WIDTH), dt)
    work = np.zeros(view.grid.n_tiles, np.int64)
    d_img = np.ascontiguousarray(d_image, dt)
    rgb = sp.rgb if view.colors is None else view.colors
    response, tau, gcut, amax = kernel_scalars(view.settings, dt)
    args = (inst.tile_ranges, inst.gaussian_index, np.ascontiguousarray(sp.mean2d),
            np.ascontiguousarray(sp.conic), np.ascontiguousarray(sp.eff_opacity),
            np.ascontiguousarray(rgb), view.background, view.xs, view.ys, view.grid.tiles_x,
            response, tau, gcut, amax, view.count, d_img)
    k = kernels(dt)
    if mode == "per_pixel":
        k["backward_pixel"](*args, inst_grad, work)
    elif mode == "per_gaussian":
        if view.checkpoints is None:
            raise ValueError("per-Gaussian backward needs a forward pass with checkpoints")
        k["backward_bucket"](*args, view.ck_offsets, view.checkpoints, inst_grad, work)
    else:
        raise ValueError(f"unknown backward mode {mode!r}")
    out = np.zeros((n, GRAD_WIDTH), dt)
    merge_instances(inst.gaussian_index, inst_grad, out)
    return SplatGrads(out[:, 0:2], out[:, 2:5], out[:, 5], out[:, 6:9], int(work.sum()))


def backward_project(view: ViewState, g: SplatGrads) -> GeometryGrads:
    """Chain splat gradients through color, Mip compensation, conic and EWA projection."""
    sp = view.splats
    cam = view.camera
    geom = view.geometry
    dt = sp.mean2d.dtype
    vis = sp.visible
    n = sp.mean2d.shape[0]

    # colour: clipped channels pass no gradient
    d_raw = np.where(sp.rgb_raw > 0, g.rgb, 0).astype(dt)
    if view.colors is not None:
        d_raw[:] = 0
    d_sh = sp.sh_basis[:, :, None] * d_raw[:, None, :]
    jac = core.sh_basis_jacobian(sp.dirs, view.sh_degree)
    d_dirs = np.einsum("nkc,nc,nkj->nj", geom.sh, d_raw, jac)
    d_means = (d_dirs - sp.dirs * np.sum(sp.dirs * d_dirs, axis=1, keepdims=True)) / sp.dir_norm[:, None]

    # opacity and compensation
    d_opacity = g.eff_opacity * sp.compensation
    a, b, c = sp.conic[:, 0], sp.conic[:, 1], sp.conic[:, 2]
    K = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    GK = np.stack([np.stack([g.conic[:, 0], 0.5 * g.conic[:, 1]], -1),
                   np.stack([0.5 * g.conic[:, 1], g.conic[:, 2]], -1)], -2)
    d_cov2d = -(K @ GK @ K)
    if view.settings.mip and not view.settings.mip_detach:
        d_cov2d = d_cov2d + _mip_compensation_grad(sp, view.settings.effective_dilation,
                                                   g.eff_opacity * sp.opacity)

    # EWA projection: cov2d = T cov3d T^T with T = J W
    Rw = cam.rotation.astype(dt)
    T = sp.jacobian @ Rw
    d_cov3d = np.swapaxes(T, -1, -2) @ d_cov2d @ T
    d_T = 2.0 * d_cov2d @ T @ geom.cov3d
    d_J = d_T @ Rw.T

    x, y = sp.cam_points[:, 0], sp.cam_points[:, 1]
    z = np.where(vis, sp.cam_points[:, 2], 1)
    fx, fy = cam.fx, cam.fy
    rx = -sp.jacobian[:, 0, 2] * z / fx
    ry = -sp.jacobian[:, 1, 2] * z / fy
    drx_dx = np.where(sp.free_x, 1 / z, 0)
    drx_dz = np.where(sp.free_x, -x / (z * z), 0)
    dry_dy = np.where(sp.free_y, 1 / z, 0)
    dry_dz = np.where(sp.free_y, -y / (z * z), 0)
    d_t = np.zeros((n, 3), dt)
    d_t[:, 0] = d_J[:, 0, 2] * (-fx / z) * drx_dx + g.mean2d[:, 0] * fx / z
    d_t[:, 1] = d_J[:, 1, 2] * (-fy / z) * dry_dy + g.mean2d[:, 1] * fy / z
    d_t[:, 2] = (d_J[:, 0, 0] * (-fx / (z * z))
                 + d_J[:, 0, 2] * (fx * rx / (z * z) - fx / z * drx_dz)
                 + d_J[:, 1, 1] * (-fy / (z * z))
                 + d_J[:, 1, 2] * (fy * ry / (z * z) - fy / z * dry_dz)
                 - g.mean2d[:, 0] * fx * x / (z * z)
                 - g.mean2d[:, 1] * fy * y / (z * z))
    d_means = d_means + d_t @ Rw

    mask = vis[:, None]
    return GeometryGrads(np.where(mask, d_means, 0), np.where(mask[..., None], d_cov3d, 0),
                         np.where(vis, d_opacity, 0), np.where(mask[..., None], d_sh, 0),
                         np.where(mask, g.mean2d, 0))


def _mip_compensation_grad(sp, dilation, d_comp):
    """d comp / d cov2d (pre-dilation) scaled by ``d_comp``; symmetric full-matrix form."""
    s00, s01, s11 = sp.cov2d[:, 0, 0], sp.cov2d[:, 0, 1], sp.cov2d[:, 1, 1]
    det_pre = s00 * s11 - s01 * s01
    det_post = sp.det
    ok = (det_pre > MIP_DET_FLOOR) & sp.visible
    comp = np.where(ok, sp.compensation, 1)

    def adj(a, b, c):
        return np.stack([np.stack([c, -b], -1), np.stack([-b, a], -1)], -2)

    d_pre = adj(s00, s01, s11)
    d_post = adj(s00 + dilation, s01, s11 + dilation)
    dr = (d_pre * det_post[:, None, None] - det_pre[:, None, None] * d_post) / (det_post ** 2)[:, None, None]
    scale = np.where(ok, d_comp * 0.5 / comp, 0)
    return scale[:, None, None] * dr


def geometry_3d_backward(store: core.ParameterStore, cache: GeometryCache,
                         gg: GeometryGrads) -> GradientStore:
    d_R, d_fs = core.build_covariance3d_backward(cache.rotation, cache.filtered_scales, gg.cov3d)
    s = cache.scales
    opacity = core.activate_opacity(store.opacity_logits[:, 0])
    d_op = gg.opacity * cache.opacity_factor
    if cache.filter_variance is not None:
        fs = cache.filtered_scales
        var = cache.filter_variance[:, None]
        d_s = d_fs * s / fs
        d_s = d_s + (gg.opacity * opacity * cache.opacity_factor)[:, None] * var / (s * fs * fs)
    else:
        d_s = d_fs
    grads = GradientStore(
        means=gg.means.astype(store.dtype),
        log_scales=(d_s * s).astype(store.dtype),
        quaternions=core.rotation_matrices_backward(store.quaternions, d_R).astype(store.dtype),
        opacity_logits=(d_op * opacity * (1 - opacity))[:, None].astype(store.dtype),
        sh_dc=gg.sh[:, 0, :].astype(store.dtype),
        sh_rest=gg.sh[:, 1:, :].astype(store.dtype),
    )
    valid = core.quaternion_valid(store.quaternions)
    for arr in grads.arrays().values():
        arr[~valid] = 0
    return grads


def render_backward(result: RenderResult, d_image: np.ndarray, mode: str | None = None) -> GeometryGrads:
    """Gradients w.r.t. the world-space geometry of any render."""
    g = blend_backward(result.view, d_image, mode)
    gg = backward_project(result.view, g)
    gg.merge_ops = g.merge_ops
    return gg


def backward(result: RenderResult, store: core.ParameterStore, d_image: np.ndarray,
             mode: str | None = None) -> tuple[GradientStore, np.ndarray]:
    """Parameter gradients for a 3D render plus the per-Gaussian screen-space mean gradient."""
    gg = render_backward(result, d_image, mode)
    grads = geometry_3d_backward(store, result.view.geometry_cache, gg)
    return grads, gg.mean2d


def backward_per_pixel(result, store, d_image):
    return backward(result, store, d_image, "per_pixel")


def backward_per_gaussian(result, store, d_image):
    return backward(result, store, d_image, "per_gaussian")


def accumulate_densify_stats(stats: DensifyStats, d_mean2d: np.ndarray, visible: np.ndarray) -> None:
    """Add |d mean2d| and a visibility count for every visible Gaussian."""
    norms = np.linalg.norm(np.asarray(d_mean2d, np.float64), axis=1)
    stats.grad_accum[visible] += norms[visible]
    stats.visible_count[visible] += 1
