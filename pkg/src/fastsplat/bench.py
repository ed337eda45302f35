"""Per-stage timing and algorithmic work counters, written as CSV."""
from __future__ import annotations

import csv
import time
from dataclasses import replace

import numpy as np

from . import binning, optim
from .config import TrainConfig
from .gauss4d import Store4D, slice_geometry
from .loss_metrics import training_loss
from .raster_backward import blend_backward
from .raster_forward import geometry_3d, project_gaussians, bound_splats
from .train import _backward_fn, render_frame

TIMING_COLUMNS = ("project", "bin", "sort", "blend", "backward", "optimizer")
WORK_COLUMNS = ("instances_square", "instances_rect", "instances_rect_opacity", "instances_exact",
                "sort_key_bytes_combined", "sort_key_bytes_two_stage",
                "merge_ops_per_pixel", "merge_ops_per_gaussian")
COLUMNS = ("frame", "n_gaussians") + TIMING_COLUMNS + WORK_COLUMNS


def instance_counts(camera, store, settings, t: float = 0.5, nu_hat=None) -> dict[str, int]:
    """Tile instances produced by every bounding mode for one view."""
    if isinstance(store, Store4D):
        geom, _ = slice_geometry(store, t)
    else:
        geom, _ = geometry_3d(store, settings, nu_hat)
    splats = project_gaussians(camera, geom, settings)
    grid = binning.TileGrid(camera.width, camera.height)
    out = {}
    for mode in binning.BOUNDING_MODES:
        rects, q = bound_splats(splats, grid, replace(settings, bounding=mode))
        inst = binning.build_instances(splats.mean2d, splats.conic, q, rects, splats.depth, grid,
                                       mode == "exact")
        out[f"instances_{mode}"] = len(inst)
        if mode == settings.bounding:
            out["sort_key_bytes_combined"] = binning.sort_combined(inst)[2].key_bytes
            out["sort_key_bytes_two_stage"] = binning.sort_two_stage(inst)[2].key_bytes
    return out


def synthetic_sort_workload(n_instances: int = 100_000, tiles_per_gaussian: int = 8,
                            n_tiles: int = 4096, seed: int = 0) -> binning.TileInstanceList:
    """Gaussian-major instances, each Gaussian touching ``tiles_per_gaussian`` distinct tiles."""
    rng = np.random.default_rng(seed)
    n_g = n_instances // tiles_per_gaussian
    depth = rng.uniform(0.2, 100.0, n_g).astype(np.float32)
    tiles = np.stack([rng.choice(n_tiles, tiles_per_gaussian, replace=False) for _ in range(n_g)])
    g = np.repeat(np.arange(n_g), tiles_per_gaussian)
    bits = binning.TileGrid(n_tiles * binning.TILE_SIZE, binning.TILE_SIZE).tile_key_bits
    return binning.TileInstanceList(g, tiles.reshape(-1).astype(np.uint32),
                                    binning.depth_keys(depth)[g], key_bits_tile=bits)


def bench_frame(store, frame, config: TrainConfig, sh_degree: int = 3, nu_hat=None,
                state=None) -> dict:
    """Time one training iteration on ``frame`` and count its work; ``store`` is updated."""
    settings = config.render_settings()
    res = render_frame(store, frame, settings, config, sh_degree, nu_hat)
    row = {k: res.view.timings.get(k, 0.0) for k in ("project", "bin", "sort", "blend")}
    _, d_img = training_loss(res.image, frame.image)
    t0 = time.perf_counter()
    grads, _ = _backward_fn(store)(res, store, d_img)
    row["backward"] = time.perf_counter() - t0
    # work counters on the pre-update parameters
    row.update(instance_counts(frame.camera, store, settings, frame.time, nu_hat))
    for mode, key in (("per_pixel", "merge_ops_per_pixel"), ("per_gaussian", "merge_ops_per_gaussian")):
        if mode == "per_gaussian" and res.view.checkpoints is None:
            res = render_frame(store, frame, replace(settings, backward="per_gaussian"), config,
                               sh_degree, nu_hat)
        row[key] = blend_backward(res.view, d_img, mode).merge_ops
    state = state if state is not None else optim.AdamState.zeros_like(store)
    lrs = config.lr_schedule().rates(0)
    lrs["quat_left"] = lrs["quat_right"] = lrs["quaternions"]
    t0 = time.perf_counter()
    if config.optimizer == "reference":
        optim.adam_step_reference(store, grads, state, lrs)
    else:
        optim.adam_step_fused(store, grads, state, lrs)
    row["optimizer"] = time.perf_counter() - t0
    row["n_gaussians"] = len(store)
    return row


def bench(config: TrainConfig, dataset, store=None, n_frames: int = 8, repeats: int = 1,
          nu_hat=None) -> list[dict]:
    """One row per frame: stage times (best of ``repeats``) and work counters.

    Runs on a copy of ``store`` (default: the dataset initialization).
    """
    from .train import initial_store

    base = initial_store(config, dataset) if store is None else store
    frames = dataset.train[:n_frames]
    # warm-up compiles the kernels so the first row is not dominated by JIT time
    bench_frame(base.copy(), frames[0], config, nu_hat=nu_hat)
    rows = []
    for i, frame in enumerate(frames):
        best = None
        for _ in range(repeats):
            row = bench_frame(base.copy(), frame, config, nu_hat=nu_hat)
            if best is None:
                best = row
            else:
                for k in TIMING_COLUMNS:
                    best[k] = min(best[k], row[k])
        best["frame"] = i
        rows.append(best)
    return rows


def write_bench_csv(path_or_file, rows: list[dict]) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(f, fieldnames=COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if k in TIMING_COLUMNS else r[k]) for k in COLUMNS})
    finally:
        if own:
            f.close()


def summarize(rows: list[dict]) -> dict:
    """Column sums over frames (times in seconds)."""
    return {k: sum(r[k] for r in rows) for k in TIMING_COLUMNS + WORK_COLUMNS}
