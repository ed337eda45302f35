"""Datasets of posed (optionally timestamped) images and the synthetic scene generator."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import core
from .camera import Camera, load_cameras, look_at, save_cameras
from .config import ConfigError
from .raster_forward import RenderSettings, read_ppm, render, write_ppm


@dataclass
class Frame:
    image: np.ndarray   # H x W x 3 float
    camera: Camera
    time: float = 0.5
    split: str = "train"


@dataclass
class Dataset:
    frames: list[Frame]
    init: object = None          # initial ParameterStore (or Store4D)
    ground_truth: object = None  # only for synthetic scenes
    meta: dict = field(default_factory=dict)

    @property
    def train(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "train"]

    @property
    def test(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "test"]

    def validate(self) -> None:
        if not self.train:
            raise ConfigError("dataset has no training frames")
        for f in self.frames:
            if f.image.shape != (f.camera.height, f.camera.width, 3):
                raise ConfigError(f"image of shape {f.image.shape} does not match its camera")
        if self.init is None:
            raise ConfigError("dataset has no initial point set")


# on-disk layout ----------------------------------------------------------------
#   cameras.txt   one camera per line (see camera.save_cameras)
#   manifest.txt  "<image> <camera index> <time> <split>" per frame
#   images/*.ppm  targets
#   init.ply      initial Gaussians; gt.ply optional

def save_dataset(root, ds: Dataset) -> None:
    from .plyio import write_ply

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    cams = [f.camera for f in ds.frames]
    save_cameras(root / "cameras.txt", cams)
    lines = ["# image camera time split"]
    for i, f in enumerate(ds.frames):
        name = f"images/{i:04d}.ppm"
        write_ppm(root / name, f.image)
        lines.append(f"{name} {i} {f.time!r} {f.split}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    if ds.init is not None:
        write_ply(root / "init.ply", ds.init)
    if ds.ground_truth is not None:
        write_ply(root / "gt.ply", ds.ground_truth)


def load_dataset(root, dtype=np.float32) -> Dataset:
    from .plyio import read_ply

    root = Path(root)
    try:
        cams = load_cameras(root / "cameras.txt")
        rows = [ln.split() for ln in (root / "manifest.txt").read_text().splitlines()
                if ln.strip() and not ln.startswith("#")]
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot load dataset {root}: {e}") from None
    frames = []
    for row in rows:
        if len(row) != 4 or row[3] not in ("train", "test"):
            raise ConfigError(f"bad manifest line: {' '.join(row)}")
        try:
            img = read_ppm(root / row[0]).astype(np.float64)
            frames.append(Frame(img, cams[int(row[1])], float(row[2]), row[3]))
        except (OSError, IndexError, ValueError) as e:
            raise ConfigError(f"bad manifest line {' '.join(row)}: {e}") from None
    init = read_ply(root / "init.ply", dtype) if (root / "init.ply").exists() else None
    gt = read_ply(root / "gt.ply", dtype) if (root / "gt.ply").exists() else None
    ds = Dataset(frames, init, gt)
    ds.validate()
    return ds


# synthetic scenes ------------------------------------------------------------------

def sphere_cameras(n: int, radius: float, resolution: int, fov_deg: float = 60.0,
                   rng=None, z_band: float = 0.75) -> list[Camera]:
    """Cameras on a sphere (Fibonacci spiral in a latitude band) looking at the origin."""
    rng = rng if rng is not None else np.random.default_rng(0)
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    cams = []
    phase = rng.uniform(0, 2 * np.pi)
    golden = np.pi * (3 - np.sqrt(5))
    for i in range(n):
        z = z_band * (1 - 2 * (i + 0.5) / n)
        r = np.sqrt(1 - z * z)
        a = phase + golden * i
        eye = radius * np.array([r * np.cos(a), r * np.sin(a), z])
        cams.append(Camera(look_at(eye, [0, 0, 0]), f, f, resolution / 2, resolution / 2,
                           resolution, resolution))
    return cams


def random_gaussians(n: int, rng, half_box: float = 0.5, scale_range=(0.02, 0.08),
                     opacity_range=(0.5, 0.95), sh_noise: float = 0.05, dtype=np.float64):
    """Well-conditioned random Gaussians inside a centred box."""
    means = rng.uniform(-half_box, half_box, (n, 3))
    log_scales = np.log(rng.uniform(*scale_range, (n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opac = core.inverse_sigmoid(rng.uniform(*opacity_range, (n, 1)))
    rgb = rng.uniform(0.1, 0.9, (n, 3))
    dc = (rgb - 0.5) / core.SH_C0
    rest = rng.normal(0, sh_noise, (n, 15, 3))
    return core.ParameterStore(means, log_scales, quats, opac, dc, rest).astype(dtype)


def init_from_points(points, colors, dtype=np.float32, opacity: float = 0.1) -> core.ParameterStore:
    """Structure-from-motion style start: isotropic scales from 3-NN spacing, low opacity."""
    points = np.asarray(points, np.float64)
    n = len(points)
    if n > 1:
        k = min(4, n)
        d, _ = cKDTree(points).query(points, k=k)
        spacing = np.sqrt(np.mean(d[:, 1:] ** 2, axis=1))
    else:
        spacing = np.full(n, 0.01)
    spacing = np.maximum(spacing, 1e-7)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1
    return core.ParameterStore(
        means=points, log_scales=np.repeat(np.log(spacing)[:, None], 3, axis=1), quaternions=quats,
        opacity_logits=np.full((n, 1), core.inverse_sigmoid(opacity)),
        sh_dc=(np.asarray(colors, np.float64) - 0.5) / core.SH_C0,
        sh_rest=np.zeros((n, 15, 3))).astype(dtype)


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[0] // factor, img.shape[1] // factor
    return img[:h * factor, :w * factor].reshape(h, factor, w, factor, -1).mean(axis=(1, 3))


def render_target(camera: Camera, store, supersample: int = 1, background=(0, 0, 0),
                  settings: RenderSettings | None = None, time: float | None = None) -> np.ndarray:
    """Ground-truth image; ``supersample`` > 1 integrates each pixel over a finer grid."""
    from .gauss4d import Store4D, render_4d

    cam = camera.scaled(supersample) if supersample != 1 else camera
    if isinstance(store, Store4D):
        img = render_4d(cam, store, 0.5 if time is None else time, settings, background).image
    else:
        img = render(cam, store, settings, background).image
    img = np.asarray(img, np.float64)
    return box_downsample(img, supersample) if supersample != 1 else img


def synth_scene(seed: int = 0, n_gaussians: int = 2000, n_cameras: int = 64, resolution: int = 128,
                n_init: int | None = None, n_test: int = 8, supersample: int = 1,
                init_noise: float = 0.01, radius: float = 2.2, dynamic: bool = False,
                background=(0, 0, 0)) -> Dataset:
    """Self-rendered scene: random Gaussians in a unit box seen from cameras on a sphere.

    ``n_init`` ground-truth means (with noise and their base colours) seed the
    initial model. With ``dynamic`` the ground truth moves linearly in time and
    every frame gets its own timestamp.
    """
    if n_gaussians < 1 or n_cameras < 1:
        raise ConfigError("synth_scene needs at least one Gaussian and one camera")
    rng = np.random.default_rng(seed)
    gt = random_gaussians(n_gaussians, rng)
    if dynamic:
        gt = _moving(gt, rng)
    cams = sphere_cameras(n_cameras + n_test, radius, resolution, rng=rng)
    test_ids = set(np.linspace(0, n_cameras + n_test - 1, n_test).round().astype(int).tolist()) if n_test else set()
    frames = []
    for i, cam in enumerate(cams):
        t = float(rng.uniform(0, 1)) if dynamic else 0.5
        img = render_target(cam, gt, supersample, background, time=t)
        frames.append(Frame(img, cam, t, "test" if i in test_ids else "train"))
    n_init = n_gaussians if n_init is None else min(n_init, n_gaussians)
    pick = np.sort(rng.choice(n_gaussians, n_init, replace=False))
    pts = gt.means[pick, :3] + rng.normal(0, init_noise, (n_init, 3))
    colors = np.clip(core.SH_C0 * gt.sh_dc[pick] + 0.5, 0, 1)
    init = init_from_points(pts, colors, np.float32)
    meta = {"seed": seed, "n_gaussians": n_gaussians, "resolution": resolution,
            "supersample": supersample, "radius": radius}
    return Dataset(frames, init, gt, meta)


def toy_scene(seed: int = 0, supersample: int = 1, dynamic: bool = False) -> Dataset:
    """2000 ground-truth Gaussians, 500 initial points, 64 training views and 8 test views at 128x128."""
    return synth_scene(seed, 2000, 64, 128, n_init=500, n_test=8, supersample=supersample,
                       dynamic=dynamic)


def _moving(gt: core.ParameterStore, rng):
    """4D ground truth whose spatial mean drifts linearly with time."""
    from .gauss4d import Store4D, isoclinic_from_rotation

    s4 = Store4D.from_static(gt, mean_t=0.5, log_scale_t=np.log(0.5))
    # couple space and time by shearing the 4D covariance: x(t) = x + v (t - 0.5)
    vel = rng.normal(0, 0.15, (len(gt), 3))
    cov3 = core.build_covariance3d(core.rotation_matrices(gt.quaternions), np.exp(gt.log_scales))
    st = 0.5
    cov4 = np.zeros((len(gt), 4, 4))
    cov4[:, :3, :3] = cov3 + st ** 2 * vel[:, :, None] * vel[:, None, :]
    cov4[:, :3, 3] = cov4[:, 3, :3] = st ** 2 * vel
    cov4[:, 3, 3] = st ** 2
    w, V = np.linalg.eigh(cov4)
    for i in range(len(gt)):
        R = V[i]
        if np.linalg.det(R) < 0:
            R = R.copy()
            R[:, 0] = -R[:, 0]
        a, b = isoclinic_from_rotation(R)
        s4.quat_left[i], s4.quat_right[i] = a, b
    s4.log_scales[:] = 0.5 * np.log(np.maximum(w, 1e-12))
    return s4
