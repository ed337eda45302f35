"""Train space-time Gaussians on a moving synthetic scene and render it at several times.

Run: python demos/dynamic_scene.py [output directory]
"""
import sys
from pathlib import Path

import numpy as np

from fastsplat.config import TrainConfig
from fastsplat.dataset import synth_scene
from fastsplat.gauss4d import render_4d
from fastsplat.raster_forward import write_ppm
from fastsplat.train import evaluate, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "dynamic_out")
out.mkdir(parents=True, exist_ok=True)

ds = synth_scene(seed=1, n_gaussians=400, n_cameras=32, resolution=64, n_init=200, n_test=4, dynamic=True)
cfg = TrainConfig.toy(400, gauss4d=True)
result = train(cfg, ds)
scores = evaluate(result.store, ds.test, cfg)
print(f"{len(result.store)} space-time Gaussians, held-out PSNR {np.mean([p for p, _ in scores]):.2f} dB")

cam = ds.test[0].camera
for t in (0.0, 0.5, 1.0):
    write_ppm(out / f"t{t:.1f}.ppm", render_4d(cam, result.store, t).image)
print(f"renders at t = 0, 0.5, 1 written to {out}")
