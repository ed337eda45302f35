"""Adaptive density control: clone, split, prune, opacity reset and schedules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import QUAT_EPS, DensifyStats, ParameterStore, inverse_sigmoid, rotation_matrices

SPLIT_DIVISOR = 1.6
SPLIT_CHILDREN = 2
CLONE_SCALE_FRACTION = 0.01
PRUNE_SCALE_FRACTION = 0.1
RESET_OPACITY = 0.01

# number of array gathers performed by densification events, for tests
GATHER_COUNT = {"n": 0}


@dataclass
class DensifySchedule:
    warmup: int = 600
    interval: int = 100
    end: int = 14900
    opacity_reset_interval: int = 3000
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.05
    morton_interval: int = 5000
    sh_ramp: int = 1000

    def densify_now(self, it: int) -> bool:
        """True at 1-based iteration ``it`` when a densify/prune event fires."""
        return self.warmup <= it <= self.end and it % self.interval == 0

    def reset_now(self, it: int) -> bool:
        return it <= self.end and it % self.opacity_reset_interval == 0

    def morton_now(self, it: int) -> bool:
        return self.morton_interval > 0 and it <= self.end and it % self.morton_interval == 0


@dataclass
class DensifyEvent:
    iteration: int
    clones: int
    splits: int
    pruned: int
    n_after: int

    def log_line(self) -> str:
        return (f"densify it={self.iteration} clones={self.clones} splits={self.splits} "
                f"pruned={self.pruned} n={self.n_after}")


def sh_active_degree(it: int, ramp: int = 1000) -> int:
    return min(3, it // ramp)


def scene_extent(cameras) -> float:
    """1.1 times the largest camera-centre distance from their centroid (1.0 for one view)."""
    centers = np.array([c.center for c in cameras], np.float64)
    if len(centers) < 2:
        return 1.0
    radius = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
    return 1.1 * float(radius) if radius > 0 else 1.0


def _gather(arr, index):
    GATHER_COUNT["n"] += 1
    return arr[index]


def _quat_norm(store, rows):
    if hasattr(store, "quat_left"):
        return np.minimum(np.linalg.norm(store.quat_left[rows], axis=1),
                          np.linalg.norm(store.quat_right[rows], axis=1))
    return np.linalg.norm(store.quaternions[rows], axis=1)


def _split_offsets(store, parents, rng):
    """Spatial offsets drawn from each parent's (spatial marginal) distribution."""
    if hasattr(store, "quat_left"):
        from .gauss4d import activate_scales4, rot4_from_isoclinic

        rot = rot4_from_isoclinic(store.quat_left[parents].astype(np.float64),
                                  store.quat_right[parents].astype(np.float64))
        scales = activate_scales4(store.log_scales[parents].astype(np.float64))
        z = rng.standard_normal((len(parents), 4))
        return np.einsum("nij,nj->ni", rot, scales * z)[:, :3]
    scales = np.exp(store.log_scales[parents].astype(np.float64))
    rot = rotation_matrices(store.quaternions[parents].astype(np.float64))
    z = rng.standard_normal((len(parents), 3))
    return np.einsum("nij,nj->ni", rot, scales * z)


def densify_and_prune(store: ParameterStore, stats: DensifyStats, extent: float,
                      state=None, rng: np.random.Generator | None = None,
                      schedule: DensifySchedule | None = None, iteration: int = 0,
                      companions: dict | None = None) -> DensifyEvent:
    """One densification event, in place on ``store``, ``state`` and ``stats``.

    New rows are laid out as: surviving originals, clones, split children.
    Every parameter and moment array is gathered exactly once. ``companions``
    maps names to extra per-Gaussian arrays that are gathered alongside and
    returned through the same dict.
    """
    schedule = schedule or DensifySchedule()
    rng = rng if rng is not None else np.random.default_rng(iteration)
    n = len(store)
    count = stats.visible_count
    avg = np.where(count > 0, stats.grad_accum / np.maximum(count, 1), 0.0)
    selected = avg > schedule.grad_threshold
    spatial = store.log_scales[:, :3].astype(np.float64)
    max_scale = np.exp(spatial).max(axis=1) if n else np.zeros(0)
    clone = selected & (max_scale <= CLONE_SCALE_FRACTION * extent)
    split = selected & ~clone
    clone_idx = np.flatnonzero(clone)
    split_idx = np.flatnonzero(split)

    src = np.concatenate([np.flatnonzero(~split), clone_idx,
                          np.repeat(split_idx, SPLIT_CHILDREN)]).astype(np.int64)
    n_keep = n - len(split_idx)
    is_child = np.zeros(len(src), bool)
    is_child[n_keep + len(clone_idx):] = True

    # pruning on the prospective rows, decided before any copy happens
    opac = 1.0 / (1.0 + np.exp(-store.opacity_logits[src, 0].astype(np.float64)))
    qn = _quat_norm(store, src)
    child_scale = max_scale[src] / np.where(is_child, SPLIT_DIVISOR, 1.0)
    prune = (opac < schedule.prune_opacity) | (qn < QUAT_EPS) | (child_scale > PRUNE_SCALE_FRACTION * extent)
    keep = ~prune
    final = src[keep]
    child_rows = np.flatnonzero(is_child[keep])
    new_rows = np.arange(int(keep[:n_keep].sum()), len(final))

    # sample children before the gather, from the parents' 3D Gaussians
    n_child = int(is_child.sum())
    if n_child:
        offsets = _split_offsets(store, src[is_child], rng)
    for name, arr in store.arrays().items():
        setattr(store, name, _gather(arr, final))
    if n_child:
        store.means[child_rows, :3] += offsets[keep[is_child]].astype(store.dtype)
        store.log_scales[child_rows, :3] -= store.dtype.type(np.log(SPLIT_DIVISOR))
    if state is not None:
        for d in (state.m, state.v):
            for k in d:
                d[k] = _gather(d[k], final)
                d[k][new_rows] = 0
    if companions:
        for k in companions:
            companions[k] = _gather(companions[k], final)
    stats.grad_accum = np.zeros(len(final), np.float64)
    stats.visible_count = np.zeros(len(final), np.int64)
    return DensifyEvent(iteration, len(clone_idx), len(split_idx), int(prune.sum()), len(final))


def opacity_reset(store: ParameterStore, state=None, value: float = RESET_OPACITY) -> None:
    """Clip opacities to at most ``value`` (in logit space); moments of the opacity restart."""
    cap = store.dtype.type(inverse_sigmoid(value))
    np.minimum(store.opacity_logits, cap, out=store.opacity_logits)
    if state is not None:
        state.zero_rows(slice(None), ["opacity_logits"])
