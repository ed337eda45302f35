"""Finite-difference gradient checking of the full render + backward pipeline.

The loss is the mean squared error of the render against a fixed random
target. Central differences are always taken in 64-bit; the analytic
gradient is computed in the precision under test.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import core
from .camera import Camera, look_at
from .gauss4d import Store4D, backward_4d, render_4d
from .raster_backward import backward
from .raster_forward import RenderSettings, render

# initial step per parameter class (64-bit central differences)
STEP = {"means": 1e-5, "log_scales": 1e-4, "quaternions": 1e-4, "quat_left": 1e-4,
        "quat_right": 1e-4, "opacity_logits": 1e-4, "sh_dc": 1e-3, "sh_rest": 1e-3}
# D(h) and D(h/2) further apart than this (relative) means a truncation
# threshold was crossed inside the stencil; the step is then halved
CONSISTENCY = 1e-4
MAX_HALVINGS = 8
# coordinates whose |gradient| is below this fraction of the class maximum are
# compared against the class maximum instead of their own magnitude
FLOOR_FRACTION = 1e-3
TOLERANCE = {"float64": 1e-6, "float32": 1e-3}
# share of coordinates that must pass in each precision
REQUIRED_FRACTION = {"float64": 1.0, "float32": 0.99}


@dataclass
class CheckScene:
    name: str
    store: object
    camera: Camera
    settings: RenderSettings
    target: np.ndarray
    background: np.ndarray
    nu_hat: np.ndarray | None = None
    time: float = 0.5

    def render(self, store):
        if isinstance(store, Store4D):
            return render_4d(self.camera, store, self.time, self.settings, self.background)
        nu = None if self.nu_hat is None else self.nu_hat.astype(store.dtype)
        return render(self.camera, store, self.settings, self.background, 3, nu_hat=nu)

    def loss(self, store) -> float:
        img = np.asarray(self.render(store).image, np.float64)
        return float(np.mean((img - self.target) ** 2))

    def analytic(self, store) -> dict[str, np.ndarray]:
        res = self.render(store)
        img = np.asarray(res.image, np.float64)
        d_img = (2.0 * (img - self.target) / img.size).astype(store.dtype)
        fn = backward_4d if isinstance(store, Store4D) else backward
        grads, _ = fn(res, store, d_img)
        return {k: np.asarray(v, np.float64) for k, v in grads.arrays().items()}


@dataclass
class ClassReport:
    name: str
    max_rel: float
    mean_rel: float
    frac_within: float
    passed: bool


@dataclass
class CheckReport:
    scene: str
    dtype: str
    classes: list[ClassReport] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.classes)

    def lines(self) -> list[str]:
        out = []
        for c in self.classes:
            flag = "ok" if c.passed else "FAIL"
            out.append(f"{self.scene} {self.dtype} {c.name:15s} max_rel={c.max_rel:.2e} "
                       f"mean_rel={c.mean_rel:.2e} within={c.frac_within:.4f} {flag}")
        return out


def random_store(rng, n: int) -> core.ParameterStore:
    return core.ParameterStore(
        means=rng.normal(0, 0.5, (n, 3)), log_scales=np.log(rng.uniform(0.08, 0.3, (n, 3))),
        quaternions=rng.normal(size=(n, 4)), opacity_logits=rng.normal(0.5, 1.0, (n, 1)),
        sh_dc=rng.normal(0, 0.6, (n, 3)), sh_rest=rng.normal(0, 0.1, (n, 15, 3)))


def random_store4d(rng, n: int) -> Store4D:
    s = random_store(rng, n)
    return Store4D(np.concatenate([s.means, rng.uniform(0.3, 0.7, (n, 1))], axis=1),
                   np.log(rng.uniform(0.1, 0.4, (n, 4))), rng.normal(size=(n, 4)),
                   rng.normal(size=(n, 4)), s.opacity_logits, s.sh_dc, s.sh_rest)


# settings exercised by the default scene list, one per seed
SCENE_VARIANTS = (
    ("plain", dict()),
    ("response_full_aa", dict(truncation="response", aa="full", mip_detach=False)),
    ("filter3d_per_pixel", dict(aa="filter3d_original", backward="per_pixel")),
    ("clip_skip_before", dict(aa="filter3d_clip", early_stop="skip_before_blend",
                              bounding="rect_opacity")),
    ("gauss4d", dict()),
)


def make_scene(seed: int, n: int = 32, size: int = 32, variant: int | None = None) -> CheckScene:
    """Seeded random scene; ``variant`` picks the settings (default: seed modulo the list)."""
    rng = np.random.default_rng(seed)
    name, kw = SCENE_VARIANTS[(seed if variant is None else variant) % len(SCENE_VARIANTS)]
    store = random_store4d(rng, n) if name == "gauss4d" else random_store(rng, n)
    eye = rng.normal(size=3)
    eye = 4.0 * eye / np.linalg.norm(eye)
    f = 1.25 * size
    cam = Camera(look_at(eye, [0, 0, 0]), f, f, size / 2, size / 2, size, size)
    nu = rng.uniform(4.0, 12.0, n) if "aa" in kw else None
    return CheckScene(f"{name}#{seed}", store, cam, RenderSettings(**kw),
                      rng.uniform(0, 1, (size, size, 3)), rng.uniform(0, 0.3, 3), nu,
                      float(rng.uniform(0.4, 0.6)))


def _central(scene, store, flat, i, h):
    old = flat[i]
    flat[i] = old + h
    lp = scene.loss(store)
    flat[i] = old - h
    lm = scene.loss(store)
    flat[i] = old
    return (lp - lm) / (2 * h)


def finite_difference(scene: CheckScene, store) -> dict[str, np.ndarray]:
    """Richardson-extrapolated central differences for every coordinate.

    The loss is only piecewise smooth (opacity and response cutoffs). Where
    the two step sizes disagree the stencil straddles a cutoff, so the step is
    halved until both land on the same smooth piece.
    """
    out = {}
    for name, arr in store.arrays().items():
        flat = arr.reshape(-1)
        h = np.full(flat.size, STEP[name])
        d1 = np.array([_central(scene, store, flat, i, h[i]) for i in range(flat.size)])
        d2 = np.array([_central(scene, store, flat, i, h[i] / 2) for i in range(flat.size)])
        scale = float(np.abs(d2).max(initial=0.0))
        for i in range(flat.size):
            for _ in range(MAX_HALVINGS):
                ref = max(abs(d2[i]), FLOOR_FRACTION * scale, 1e-300)
                if abs(d1[i] - d2[i]) <= CONSISTENCY * ref:
                    break
                h[i] /= 2
                d1[i] = d2[i]
                d2[i] = _central(scene, store, flat, i, h[i] / 2)
        out[name] = ((4 * d2 - d1) / 3).reshape(arr.shape)
    return out


def relative_errors(analytic: np.ndarray, numeric: np.ndarray,
                    floor_fraction: float = FLOOR_FRACTION) -> np.ndarray:
    scale = float(np.abs(numeric).max()) if numeric.size else 0.0
    if scale == 0.0:
        return np.where(analytic == 0, 0.0, np.inf).astype(np.float64)
    denom = np.maximum(np.abs(numeric), floor_fraction * scale)
    return np.abs(analytic - numeric) / denom


def compare(scene_name: str, dtype: str, analytic: dict, numeric: dict) -> CheckReport:
    report = CheckReport(scene_name, dtype)
    tol = TOLERANCE[dtype]
    for name, num in numeric.items():
        err = relative_errors(analytic[name], num).reshape(-1)
        within = float(np.mean(err <= tol)) if err.size else 1.0
        report.classes.append(ClassReport(name, float(err.max(initial=0.0)),
                                          float(err.mean()) if err.size else 0.0, within,
                                          within >= REQUIRED_FRACTION[dtype]))
    return report


def check_scene(scene: CheckScene, dtypes=("float64", "float32")) -> list[CheckReport]:
    t0 = time.perf_counter()
    ref = scene.store.astype(np.float64)
    numeric = finite_difference(scene, ref.copy())
    reports = []
    for dt in dtypes:
        analytic = scene.analytic(scene.store.astype(np.dtype(dt)))
        reports.append(compare(scene.name, dt, analytic, numeric))
    reports[-1].seconds = time.perf_counter() - t0
    return reports


def gradient_check(seeds=range(5), n: int = 32, size: int = 32, dtypes=("float64", "float32"),
                   log=print) -> list[CheckReport]:
    """Check every scene in ``seeds``; ``log`` receives one line per class."""
    reports = []
    for seed in seeds:
        for rep in check_scene(make_scene(seed, n, size), dtypes):
            for line in rep.lines():
                log(line)
            reports.append(rep)
    return reports
