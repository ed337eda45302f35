"""Forward rendering: preprocessing, binning and tiled front-to-back blending."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import antialias, binning, core
from .binning import TileGrid, TileInstanceList
from .camera import Camera, invert_cov2d_batch, projection_jacobian, project_points, transform_points
from .kernels import BUCKET, TILE_PIXELS, kernels

ALPHA_MAX = 0.99
T_MIN = 1e-4


@dataclass(frozen=True)
class RenderSettings:
    bounding: str = "exact"            # square | rect | rect_opacity | exact
    sort: str = "two_stage"            # combined | two_stage
    truncation: str = "classic"        # classic | response
    sigma_cut: float = 3.33
    early_stop: str = "blend_then_stop"  # or skip_before_blend
    backward: str = "per_gaussian"     # per_pixel | per_gaussian
    aa: str = "off"
    dilation: float | None = None      # None picks the aa mode's default
    mip_detach: bool = True
    tau_alpha: float = binning.TAU_ALPHA
    alpha_max: float = ALPHA_MAX
    t_min: float = T_MIN
    kappa3d: float = antialias.KAPPA_3D

    def __post_init__(self):
        choices = {"bounding": binning.BOUNDING_MODES, "sort": ("combined", "two_stage"),
                   "truncation": ("classic", "response"),
                   "early_stop": ("blend_then_stop", "skip_before_blend"),
                   "backward": ("per_pixel", "per_gaussian"), "aa": antialias.AA_MODES}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name}={getattr(self, name)!r} not in {allowed}")

    @property
    def filter3d(self):
        return antialias.filter_modes(self.aa)[0]

    @property
    def mip(self) -> bool:
        return antialias.filter_modes(self.aa)[1]

    @property
    def effective_dilation(self) -> float:
        return antialias.default_dilation(self.aa) if self.dilation is None else self.dilation


@dataclass
class Geometry:
    """World-space Gaussians ready for projection."""

    means: np.ndarray
    cov3d: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    valid: np.ndarray


@dataclass
class GeometryCache:
    rotation: np.ndarray
    scales: np.ndarray
    filtered_scales: np.ndarray
    opacity_factor: np.ndarray
    filter_variance: np.ndarray | None


def geometry_3d(store: core.ParameterStore, settings: RenderSettings,
                nu_hat=None) -> tuple[Geometry, GeometryCache]:
    scales = core.activate_scales(store.log_scales)
    rotation = core.rotation_matrices(store.quaternions)
    valid = core.quaternion_valid(store.quaternions) & np.all(np.isfinite(scales) & (scales > 0), axis=1)
    opacity = core.activate_opacity(store.opacity_logits[:, 0])
    factor = np.ones_like(opacity)
    filtered = scales
    var = None
    if settings.filter3d == "original" and nu_hat is not None:
        var = antialias.filter3d_variance(np.asarray(nu_hat), settings.kappa3d).astype(scales.dtype)
        filtered, _ = antialias.apply_3d_filter_original(scales, 1.0, nu_hat, settings.kappa3d)
        filtered = filtered.astype(scales.dtype)
        factor = np.prod(scales / filtered, axis=1)
    cov = core.build_covariance3d(rotation, filtered)
    geom = Geometry(store.means, cov, opacity * factor, store.sh_coeffs(), valid)
    return geom, GeometryCache(rotation, scales, filtered, factor, var)


@dataclass
class Splats:
    """Per-view projected Gaussians (uncompacted: one row per Gaussian)."""

    cam_points: np.ndarray
    mean2d: np.ndarray
    jacobian: np.ndarray
    free_x: np.ndarray
    free_y: np.ndarray
    cov2d: np.ndarray          # before dilation
    conic: np.ndarray
    det: np.ndarray            # after dilation
    compensation: np.ndarray
    opacity: np.ndarray        # geometry opacity (before compensation)
    eff_opacity: np.ndarray
    dirs: np.ndarray
    dir_norm: np.ndarray
    sh_basis: np.ndarray
    rgb_raw: np.ndarray
    rgb: np.ndarray
    visible: np.ndarray

    @property
    def depth(self):
        return self.cam_points[:, 2]


def project_gaussians(camera: Camera, geom: Geometry, settings: RenderSettings,
                      sh_degree: int = 3) -> Splats:
    dt = geom.means.dtype
    pts = transform_points(camera, geom.means)
    in_front = pts[:, 2] > camera.near
    safe = pts.copy()
    safe[~in_front, 2] = 1
    mean2d = project_points(camera, safe)
    J, free_x, free_y = projection_jacobian(camera, safe)
    T = J @ camera.rotation.astype(dt)
    full = T @ geom.cov3d @ np.swapaxes(T, -1, -2)
    cov2d = np.empty_like(full)
    cov2d[:, 0, 0] = full[:, 0, 0]
    cov2d[:, 1, 1] = full[:, 1, 1]
    cov2d[:, 0, 1] = cov2d[:, 1, 0] = full[:, 0, 1]
    inv = invert_cov2d_batch(cov2d, dt.type(settings.effective_dilation))
    visible = geom.valid & in_front & inv.valid
    if settings.mip:
        comp = np.sqrt(inv.det_ratio).astype(dt)
    else:
        comp = np.ones(len(geom.means), dt)
    eff = geom.opacity * comp
    d = geom.means - camera.center.astype(dt)
    dn = np.linalg.norm(d, axis=1)
    dn = np.where(dn > 0, dn, 1).astype(dt)
    dirs = d / dn[:, None]
    basis = core.sh_basis(dirs, sh_degree)
    raw = np.einsum("nk,nkc->nc", basis, geom.sh) + dt.type(0.5)
    rgb = np.maximum(raw, 0)
    return Splats(pts, mean2d, J, free_x, free_y, cov2d, inv.conic, inv.det, comp, geom.opacity,
                  eff, dirs, dn, basis, raw, rgb, visible)


def bound_splats(splats: Splats, grid: TileGrid, settings: RenderSettings):
    """Pixel rectangles and truncation limits for the active bounding mode."""
    dil = settings.effective_dilation
    cov = splats.cov2d.astype(np.float64) + dil * np.eye(2)
    eff = splats.eff_opacity.astype(np.float64)
    q_opaque = binning.truncation_limit(eff, settings.tau_alpha, settings.truncation,
                                        settings.sigma_cut, opacity_aware=True)
    mode = settings.bounding
    if mode == "square":
        half = binning.half_extents_square(cov)
        q_box = np.full_like(eff, np.inf)
    else:
        q_box = binning.truncation_limit(eff, settings.tau_alpha, settings.truncation,
                                         settings.sigma_cut, opacity_aware=(mode != "rect"))
        half = binning.half_extents_rect(cov, q_box)
    empty = ~splats.visible | (q_box < 0)
    rects = binning.pixel_rects(splats.mean2d.astype(np.float64), half, grid.width, grid.height, empty)
    return rects, q_opaque


@dataclass
class ViewState:
    """Everything the backward pass needs from a forward render."""

    camera: Camera
    settings: RenderSettings
    grid: TileGrid
    background: np.ndarray
    sh_degree: int
    splats: Splats
    instances: TileInstanceList
    count: np.ndarray
    checkpoints: np.ndarray | None
    ck_offsets: np.ndarray
    sort_stats: binning.SortStats
    xs: np.ndarray
    ys: np.ndarray
    geometry: Geometry | None = None
    geometry_cache: GeometryCache | None = None
    colors: np.ndarray | None = None
    timings: dict = field(default_factory=dict)


@dataclass
class RenderResult:
    image: np.ndarray              # H x W x 3, not clipped
    transmittance: np.ndarray      # H x W
    n_contrib: np.ndarray          # H x W
    view: ViewState = field(repr=False)

    @property
    def visible(self) -> np.ndarray:
        return self.view.splats.visible


def kernel_scalars(settings: RenderSettings, dt):
    F = np.dtype(dt).type
    gcut = np.exp(-0.5 * settings.sigma_cut ** 2)
    return (settings.truncation == "response", F(settings.tau_alpha), F(gcut),
            F(settings.alpha_max))


def rasterize(camera: Camera, splats: Splats, settings: RenderSettings, background,
              sh_degree: int = 3, record: bool | None = None, colors=None) -> RenderResult:
    """Bin, sort and blend projected splats."""
    dt = splats.mean2d.dtype
    F = dt.type
    t0 = time.perf_counter()
    grid = TileGrid(camera.width, camera.height)
    rects, q_opaque = bound_splats(splats, grid, settings)
    exact = settings.bounding == "exact"
    inst = binning.build_instances(splats.mean2d, splats.conic, q_opaque, rects,
                                   splats.depth, grid, exact)
    t1 = time.perf_counter()
    if settings.sort == "two_stage":
        inst, _, stats = binning.sort_two_stage(inst)
    else:
        inst, _, stats = binning.sort_combined(inst)
    ranges = binning.build_tile_ranges(inst, grid)
    t2 = time.perf_counter()
    if record is None:
        record = settings.backward == "per_gaussian"
    lengths = ranges[:, 1] - ranges[:, 0]
    nb = (lengths + BUCKET - 1) // BUCKET
    ck_off = np.zeros(grid.n_tiles + 1, np.int64)
    np.cumsum(nb, out=ck_off[1:])
    ckpt = np.empty((int(ck_off[-1]) if record else 0, TILE_PIXELS, 4), dt)
    H, W = camera.height, camera.width
    color = np.zeros((H, W, 3), dt)
    trans = np.ones((H, W), dt)
    count = np.zeros((H, W), np.int64)
    xs = (np.arange(W) + 0.5).astype(dt)
    ys = (np.arange(H) + 0.5).astype(dt)
    bg = np.asarray(background, dt).reshape(3)
    rgb = splats.rgb if colors is None else np.ascontiguousarray(colors, dt)
    response, tau, gcut, amax = kernel_scalars(settings, dt)
    kernels(dt)["forward"](ranges, inst.gaussian_index, np.ascontiguousarray(splats.mean2d),
                           np.ascontiguousarray(splats.conic), np.ascontiguousarray(splats.eff_opacity),
                           np.ascontiguousarray(rgb), bg, xs, ys, grid.tiles_x, response, tau, gcut,
                           amax, F(settings.t_min), settings.early_stop == "skip_before_blend",
                           ck_off, record, color, trans, count, ckpt)
    t3 = time.perf_counter()
    view = ViewState(camera, settings, grid, bg, sh_degree, splats, inst, count,
                     ckpt if record else None, ck_off, stats, xs, ys)
    view.timings.update(bin=t1 - t0, sort=t2 - t1, blend=t3 - t2)
    view.colors = None if colors is None else rgb
    return RenderResult(color, trans, count, view)


def render_geometry(camera: Camera, geom: Geometry, settings: RenderSettings, background=(0, 0, 0),
                    sh_degree: int = 3, record: bool | None = None, colors=None) -> RenderResult:
    t0 = time.perf_counter()
    splats = project_gaussians(camera, geom, settings, sh_degree)
    t1 = time.perf_counter()
    result = rasterize(camera, splats, settings, background, sh_degree, record, colors)
    result.view.geometry = geom
    result.view.timings["project"] = t1 - t0
    return result


def render(camera: Camera, store: core.ParameterStore, settings: RenderSettings | None = None,
           background=(0, 0, 0), sh_degree: int = 3, nu_hat=None, record: bool | None = None,
           colors=None) -> RenderResult:
    """Render ``store`` from ``camera``; the result keeps intermediates for backward."""
    settings = settings or RenderSettings()
    geom, cache = geometry_3d(store, settings, nu_hat)
    result = render_geometry(camera, geom, settings, background, sh_degree, record, colors)
    result.view.geometry_cache = cache
    return result


# scalar helpers mirroring the kernels ---------------------------------------

def fragment_alpha(conic, mean2d, pixel, opacity, truncation="classic", sigma_cut=3.33,
                   tau_alpha=binning.TAU_ALPHA, alpha_max=ALPHA_MAX):
    """Blending alpha of one splat at ``pixel``; ``None`` when the fragment is skipped."""
    a, b, c = conic
    dx = mean2d[0] - pixel[0]
    dy = mean2d[1] - pixel[1]
    G = np.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy))
    al = opacity * G
    if truncation == "response":
        if G < np.exp(-0.5 * sigma_cut ** 2):
            return None
    elif al < tau_alpha:
        return None
    return min(alpha_max, al)


def blend_fragments(alphas, colors, background, t_min=T_MIN, skip_before=False):
    """Front-to-back blend of an already ordered fragment list for one pixel."""
    C = np.zeros(3)
    T = 1.0
    for al, col in zip(alphas, colors):
        Tn = T * (1 - al)
        if skip_before and Tn < t_min:
            break
        C += al * T * np.asarray(col, float)
        T = Tn
        if not skip_before and T < t_min:
            break
    return C + T * np.asarray(background, float), T


# image output ---------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 pixmap; clipping and rounding happen only here."""
    data = to_uint8(image)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary P6 pixmap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float32) / maxval
