"""The optimization loop wiring rendering, loss, gradients, Adam and density control."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import antialias, binning, densify, optim
from .config import ConfigError, TrainConfig
from .core import DensifyStats
from .dataset import Dataset, Frame
from .gauss4d import Store4D, backward_4d, render_4d
from .loss_metrics import psnr, ssim, training_loss
from .raster_backward import accumulate_densify_stats, backward
from .raster_forward import render


@dataclass
class TrainResult:
    store: object
    state: optim.AdamState
    losses: list = field(default_factory=list)
    events: list = field(default_factory=list)
    log: list = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0
    nu_hat: np.ndarray | None = None


class _Rates:
    """Wraps the sampling-rate array so Morton reordering can permute it in place."""

    def __init__(self, values):
        self.values = values

    def reindex(self, index):
        if self.values is not None:
            self.values = self.values[index]


def _dtype(config):
    return np.float64 if config.dtype == "float64" else np.float32


def initial_store(config: TrainConfig, dataset: Dataset):
    store = dataset.init.astype(_dtype(config))
    if config.gauss4d and not isinstance(store, Store4D):
        store = Store4D.from_static(store, mean_t=0.5, log_scale_t=np.log(0.5))
    if not config.gauss4d and isinstance(store, Store4D):
        raise ConfigError("a 4D initial model needs gauss4d=true")
    return store


def render_frame(store, frame: Frame, settings, config, sh_degree=3, nu_hat=None):
    bg = np.asarray(config.background, float)
    if isinstance(store, Store4D):
        return render_4d(frame.camera, store, frame.time, settings, bg, sh_degree)
    return render(frame.camera, store, settings, bg, sh_degree, nu_hat=nu_hat)


def _backward_fn(store):
    return backward_4d if isinstance(store, Store4D) else backward


def _add_grads(acc, grads):
    if acc is None:
        return grads
    for k, v in grads.arrays().items():
        getattr(acc, k)[...] += v
    return acc


def _sampling_rates(store, frames, extent):
    if isinstance(store, Store4D):
        return None
    return antialias.compute_sampling_rates(store.means, [f.camera for f in frames], 1.0 / extent)


def train(config: TrainConfig, dataset: Dataset, log=None, store=None) -> TrainResult:
    """Run ``config.total_iterations`` steps on the training frames of ``dataset``."""
    config.validate()
    dataset.validate()
    emit = log or (lambda line: None)
    store = initial_store(config, dataset) if store is None else store
    if isinstance(store, Store4D) != config.gauss4d:
        raise ConfigError("model dimensionality does not match the gauss4d setting")
    settings = config.render_settings()
    schedule = config.densify_schedule()
    lr_schedule = config.lr_schedule()
    frames = dataset.train
    extent = densify.scene_extent([f.camera for f in frames])
    state = optim.AdamState.zeros_like(store)
    stats = DensifyStats.zeros(len(store))
    rng = np.random.default_rng(config.seed)
    rates = _Rates(_sampling_rates(store, frames, extent) if settings.filter3d else None)
    result = TrainResult(store, state)
    bwd = _backward_fn(store)
    order: list[int] = []
    t_start = time.perf_counter()
    out = Path(config.output) if config.output else None

    for it in range(1, config.total_iterations + 1):
        sh_degree = densify.sh_active_degree(it, schedule.sh_ramp)
        lrs = lr_schedule.rates(it - 1, extent)
        lrs["quat_left"] = lrs["quat_right"] = lrs["quaternions"]
        n = len(store)
        batch = []
        for _ in range(config.batch_size):
            if not order:
                order = list(rng.permutation(len(frames)))
            batch.append(frames[order.pop()])
        acc = None
        touched = np.zeros(n, bool)
        loss_sum = 0.0
        fused = config.optimizer.startswith("fused_backward")
        for b, frame in enumerate(batch):
            res = render_frame(store, frame, settings, config, sh_degree, rates.values)
            loss, d_img = training_loss(res.image, frame.image)
            loss_sum += loss
            touched |= optim.rendered_mask(res, n)
            last = b == len(batch) - 1
            if fused and last:
                grads, d_mean2d = _fused_step(res, store, d_img, state, lrs, acc, touched, bwd,
                                              config.optimizer.endswith("skip_invisible"))
            else:
                grads, d_mean2d = bwd(res, store, d_img)
                acc = _add_grads(acc, grads)
            if it <= schedule.end:
                cam = frame.camera
                scale = np.array([0.5 * cam.width, 0.5 * cam.height])
                accumulate_densify_stats(stats, d_mean2d * scale, optim.rendered_mask(res, n))
        if not fused:
            if config.optimizer == "reference":
                optim.adam_step_reference(store, acc, state, lrs)
            else:
                optim.adam_step_fused(store, acc, state, lrs)
        result.losses.append(loss_sum / len(batch))
        if settings.filter3d == "clip" and rates.values is not None:
            antialias.apply_3d_filter_clip(store.log_scales, rates.values, settings.kappa3d)

        if schedule.densify_now(it):
            companions = {"nu": rates.values} if rates.values is not None else None
            ev = densify.densify_and_prune(store, stats, extent, state,
                                           np.random.default_rng([config.seed, it]), schedule, it,
                                           companions)
            if companions:
                rates.values = companions["nu"]
            result.events.append(ev)
            emit(ev.log_line())
        if schedule.reset_now(it):
            densify.opacity_reset(store, state)
            emit(f"opacity reset it={it}")
        if schedule.morton_now(it):
            binning.morton_reorder(store, state, stats, rates)
            emit(f"morton reorder it={it}")
        if settings.filter3d and it % config.aa_recompute_interval == 0:
            rates.values = _sampling_rates(store, frames, extent)
        if out is not None and it % config.checkpoint_interval == 0:
            save_checkpoint(out / f"checkpoint_{it:05d}", store, state, config, it)
        if it % 100 == 0 or it == config.total_iterations:
            line = f"it={it} loss={result.losses[-1]:.5f} n={len(store)}"
            result.log.append(line)
            emit(line)
    result.store = store
    result.steps = config.total_iterations
    result.seconds = time.perf_counter() - t_start
    result.nu_hat = rates.values
    if out is not None:
        save_checkpoint(out / "final", store, state, config, config.total_iterations)
    return result


def _fused_step(res, store, d_img, state, lrs, acc, touched, bwd, skip_invisible):
    """Backward of the last batch image with the Adam update folded into the merge."""
    return optim.fused_backward_update(res, store, d_img, state, lrs, skip_invisible,
                                       backward_fn=bwd, accumulated=acc, touched=touched)


def evaluate(store, frames, config: TrainConfig, scale: float = 1.0, targets=None, nu_hat=None):
    """(PSNR, SSIM) per frame on clipped renders; ``scale`` changes the render resolution."""
    settings = config.render_settings()
    out = []
    for i, frame in enumerate(frames):
        cam = frame.camera.scaled(scale) if scale != 1 else frame.camera
        f = Frame(frame.image, cam, frame.time, frame.split)
        img = np.clip(render_frame(store, f, settings, config, 3, nu_hat).image, 0, 1)
        target = frame.image if targets is None else targets[i]
        out.append((psnr(img, target), ssim(img, target)))
    return out


def save_checkpoint(path, store, state: optim.AdamState, config: TrainConfig, it: int) -> None:
    """PLY + config + optimizer-state sidecar."""
    from .plyio import write_ply

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_ply(path / "model.ply", store)
    config.save(path / "config.json")
    np.savez(path / "optimizer.npz", **{f"m_{k}": v for k, v in state.m.items()},
             **{f"v_{k}": v for k, v in state.v.items()})
    (path / "state.json").write_text(json.dumps({"iteration": it, "step": state.step}))


def load_checkpoint(path, dtype=np.float32):
    from .plyio import read_ply

    path = Path(path)
    store = read_ply(path / "model.ply", dtype)
    config = TrainConfig.load(path / "config.json")
    meta = json.loads((path / "state.json").read_text())
    data = np.load(path / "optimizer.npz")
    state = optim.AdamState({k: data[f"m_{k}"] for k in store.names()},
                            {k: data[f"v_{k}"] for k in store.names()}, meta["step"])
    return store, state, config, meta["iteration"]
