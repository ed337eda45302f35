"""Fit the synthetic toy scene from 500 noisy points and report held-out quality.

Run: python demos/train_toy.py [iterations] [output directory]
The full 2000-iteration run takes a few minutes on one CPU core.
"""
import sys

import numpy as np

from fastsplat.config import TrainConfig
from fastsplat.dataset import toy_scene
from fastsplat.loss_metrics import write_metrics_csv
from fastsplat.train import evaluate, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 500
out = sys.argv[2] if len(sys.argv) > 2 else ""

ds = toy_scene(seed=0)
print(f"{len(ds.train)} training views, {len(ds.test)} test views, {len(ds.init)} initial Gaussians")

cfg = TrainConfig.toy(2000, total_iterations=iterations, output=out)
result = train(cfg, ds, log=lambda line: print(line) if "densify" in line or "it=" in line else None)
print(f"{result.steps} iterations in {result.seconds:.1f} s, {len(result.store)} Gaussians")

scores = evaluate(result.store, ds.test, cfg)
print(f"held-out PSNR {np.mean([p for p, _ in scores]):.2f} dB, SSIM {np.mean([s for _, s in scores]):.4f}")
if out:
    write_metrics_csv(f"{out}/metrics.csv", [(i, p, s) for i, (p, s) in enumerate(scores)])
    print(f"model and metrics in {out}")
