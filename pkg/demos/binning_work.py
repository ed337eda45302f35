"""How much work each bounding and sorting strategy does on one view.

Run: python demos/binning_work.py
"""
import numpy as np

from fastsplat.bench import instance_counts, synthetic_sort_workload
from fastsplat.binning import sort_combined, sort_two_stage
from fastsplat.dataset import toy_scene
from fastsplat.raster_forward import RenderSettings

ds = toy_scene(seed=0)
frame = ds.train[0]
counts = instance_counts(frame.camera, ds.ground_truth, RenderSettings())
for mode in ("square", "rect", "rect_opacity", "exact"):
    print(f"{mode:13s} {counts[f'instances_{mode}']:7d} tile instances")

# Sorting 1e5 instances with eight tiles per Gaussian, as in the complexity argument.
inst = synthetic_sort_workload(100_000)
_, p1, s1 = sort_combined(inst)
_, p2, s2 = sort_two_stage(inst)
print(f"combined sort : {s1.passes} radix passes, {s1.key_bytes} key bytes")
print(f"two-stage sort: {s2.passes} radix passes, {s2.key_bytes} key bytes "
      f"(ratio {s2.key_bytes / s1.key_bytes:.3f}), same order: {np.array_equal(p1, p2)}")
