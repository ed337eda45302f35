"""Command-line entry point: synth, train, render, grad-check, bench.

Exit codes: 0 success, 1 invalid input (config, dataset, files), 2 a check
failed (grad-check above tolerance).
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CHECK_FAILED = 2
WORKERS_ENV = "FASTSPLAT_WORKERS"


class CheckFailed(Exception):
    pass


def set_workers(env=os.environ) -> int | None:
    """Apply the worker-count environment variable to the parallel backend."""
    raw = env.get(WORKERS_ENV)
    if not raw:
        return None
    import numba

    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if not 1 <= n <= numba.config.NUMBA_NUM_THREADS:
        raise ConfigError(f"{WORKERS_ENV}={n} outside 1..{numba.config.NUMBA_NUM_THREADS}")
    numba.set_num_threads(n)
    return n


def load_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    return cfg.with_overrides(args.set or [])


def _dtype(cfg):
    return np.float64 if cfg.dtype == "float64" else np.float32


def _load_model(path, dtype):
    from .plyio import read_ply

    p = Path(path)
    if p.is_dir():
        p = p / "model.ply"
    try:
        return read_ply(p, dtype)
    except OSError as e:
        raise ConfigError(f"cannot read model {p}: {e}") from None


# subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    from .dataset import save_dataset, synth_scene

    ds = synth_scene(args.seed, args.gaussians, args.cameras, args.resolution, n_init=args.init,
                     n_test=args.test, supersample=args.supersample, dynamic=args.dynamic)
    save_dataset(args.out, ds)
    print(f"wrote {len(ds.frames)} frames ({len(ds.train)} train, {len(ds.test)} test) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataset import load_dataset
    from .loss_metrics import write_metrics_csv
    from .train import evaluate, train

    cfg = load_config(args)
    if args.dataset:
        cfg = _replace(cfg, dataset=args.dataset)
    if args.out:
        cfg = _replace(cfg, output=args.out)
    if not cfg.dataset:
        raise ConfigError("no dataset given (--dataset or the config's dataset key)")
    ds = load_dataset(cfg.dataset, _dtype(cfg))
    result = train(cfg, ds, log=print)
    print(f"trained {result.steps} iterations in {result.seconds:.1f} s, {len(result.store)} Gaussians")
    if ds.test:
        scores = evaluate(result.store, ds.test, cfg, nu_hat=result.nu_hat)
        rows = [(i, p, s) for i, (p, s) in enumerate(scores)]
        print(f"test psnr={np.mean([p for _, p, _ in rows]):.3f} ssim={np.mean([s for _, _, s in rows]):.4f}")
        if cfg.output:
            write_metrics_csv(Path(cfg.output) / "metrics.csv", rows)
    return EXIT_OK


def _replace(cfg: TrainConfig, **kw) -> TrainConfig:
    data = cfg.to_dict()
    data.update(kw)
    return TrainConfig.from_dict(data)


def cmd_render(args) -> int:
    from .camera import load_cameras
    from .raster_forward import write_ppm
    from .train import render_frame
    from .dataset import Frame

    cfg = load_config(args)
    store = _load_model(args.model, _dtype(cfg))
    if cfg.gauss4d != hasattr(store, "quat_left"):
        cfg = _replace(cfg, gauss4d=hasattr(store, "quat_left"))
    try:
        cams = load_cameras(args.cameras)
    except OSError as e:
        raise ConfigError(f"cannot read cameras {args.cameras}: {e}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = cfg.render_settings()
    if settings.filter3d:
        from . import antialias, densify

        nu = antialias.compute_sampling_rates(store.means, cams, 1.0 / densify.scene_extent(cams))
    else:
        nu = None
    for i, cam in enumerate(cams):
        frame = Frame(np.zeros((cam.height, cam.width, 3)), cam, args.time)
        img = render_frame(store, frame, settings, cfg, 3, nu).image
        write_ppm(out / f"{i:04d}.ppm", img)
    print(f"rendered {len(cams)} views to {out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import gradient_check

    dtypes = ("float64", "float32") if args.dtype == "both" else (args.dtype,)
    reports = gradient_check(range(args.seed, args.seed + args.scenes), args.gaussians, args.size,
                             dtypes)
    failed = [r for r in reports if not r.passed]
    print(f"grad-check: {len(reports) - len(failed)}/{len(reports)} scene checks passed")
    if failed:
        raise CheckFailed("gradient check above tolerance")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench, summarize, write_bench_csv
    from .dataset import load_dataset, synth_scene

    cfg = load_config(args)
    if args.dataset or cfg.dataset:
        ds = load_dataset(args.dataset or cfg.dataset, _dtype(cfg))
    else:
        ds = synth_scene(cfg.seed, n_init=500, n_cameras=max(args.frames, 1), n_test=0,
                         dynamic=cfg.gauss4d)
    store = _load_model(args.model, _dtype(cfg)) if args.model else None
    rows = bench(cfg, ds, store, args.frames, args.repeats)
    if args.out:
        write_bench_csv(args.out, rows)
    else:
        write_bench_csv(sys.stdout, rows)
    tot = summarize(rows)
    print("total " + " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                              for k, v in tot.items()), file=sys.stderr)
    return EXIT_OK


# parser -----------------------------------------------------------------------

def _config_args(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fastsplat", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaussians", type=int, default=2000)
    p.add_argument("--cameras", type=int, default=64)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--init", type=int, default=500, help="initial points drawn from the ground truth")
    p.add_argument("--test", type=int, default=8, help="extra held-out views")
    p.add_argument("--supersample", type=int, default=1)
    p.add_argument("--dynamic", action="store_true", help="moving 4D ground truth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize a model on a dataset")
    _config_args(p)
    p.add_argument("--dataset")
    p.add_argument("--out", help="output directory for checkpoints and metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a model from a camera file")
    _config_args(p)
    p.add_argument("--model", required=True, help="PLY file or checkpoint directory")
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--time", type=float, default=0.5, help="timestamp for 4D models")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("grad-check", help="compare analytic gradients with finite differences")
    p.add_argument("--scenes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gaussians", type=int, default=32)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--dtype", choices=("float64", "float32", "both"), default="both")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench", help="per-stage timings and work counters as CSV")
    _config_args(p)
    p.add_argument("--dataset")
    p.add_argument("--model", help="benchmark a trained model instead of the initialization")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        set_workers()
        return args.func(args)
    except CheckFailed as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
