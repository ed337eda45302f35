"""Adam in four flavours plus the learning-rate schedule.

Every flavour performs the same per-element arithmetic in the same order and
in the parameter dtype, so they agree to the bit:

    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * (g * g)
    theta = theta - lr * (m / bc1) / (sqrt(v / bc2) + eps)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .core import GradientStore, ParameterStore

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15

LR_SCALES = 0.005
LR_ROTATIONS = 0.001
LR_OPACITY = 0.025
LR_SH_DC = 2.5e-3
LR_SH_REST = 1.25e-4
LR_MEANS_INIT = 1.6e-4
LR_MEANS_FINAL = 1.6e-6
LR_MEANS_STEPS = 30000

OPTIMIZER_MODES = ("reference", "fused", "fused_backward", "fused_backward_skip_invisible")


def mean_lr(step: int, extent: float = 1.0, max_steps: int = LR_MEANS_STEPS,
            lr_init: float = LR_MEANS_INIT, lr_final: float = LR_MEANS_FINAL) -> float:
    """Log-linear decay of the position learning rate, scaled by the scene extent."""
    frac = min(max(step / max_steps, 0.0), 1.0)
    return extent * float(np.exp((1 - frac) * np.log(lr_init) + frac * np.log(lr_final)))


@dataclass
class LRSchedule:
    scales: float = LR_SCALES
    rotations: float = LR_ROTATIONS
    opacity: float = LR_OPACITY
    sh_dc: float = LR_SH_DC
    sh_rest: float = LR_SH_REST
    means_init: float = LR_MEANS_INIT
    means_final: float = LR_MEANS_FINAL
    means_steps: int = LR_MEANS_STEPS

    def rates(self, step: int, extent: float = 1.0) -> dict[str, float]:
        """Learning rate per parameter array at ``step`` (0-based)."""
        return {"means": mean_lr(step, extent, self.means_steps, self.means_init, self.means_final),
                "log_scales": self.scales, "quaternions": self.rotations,
                "opacity_logits": self.opacity, "sh_dc": self.sh_dc, "sh_rest": self.sh_rest}


@dataclass
class AdamState:
    """First and second moments for every parameter array plus per-group step counts."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: dict[str, int] = field(default_factory=dict)
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    @classmethod
    def zeros_like(cls, store: ParameterStore, **hyper) -> "AdamState":
        arrays = store.arrays()
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: 0 for k in arrays}, **hyper)

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()},
                         dict(self.step), self.beta1, self.beta2, self.eps)

    def __len__(self) -> int:
        return next(iter(self.m.values())).shape[0] if self.m else 0

    def reindex(self, index) -> None:
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][index]

    def zero_rows(self, rows, names=None) -> None:
        for d in (self.m, self.v):
            for k in names or d:
                d[k][rows] = 0

    def scalars(self, name: str, dtype):
        """(b1, 1-b1, b2, 1-b2, eps, bc1, bc2) cast to ``dtype`` for the upcoming step."""
        F = np.dtype(dtype).type
        t = self.step[name] + 1
        return (F(self.beta1), F(1 - self.beta1), F(self.beta2), F(1 - self.beta2), F(self.eps),
                F(1 - self.beta1 ** t), F(1 - self.beta2 ** t))

    def advance(self) -> None:
        for k in self.step:
            self.step[k] += 1


def adam_step_reference(params: ParameterStore, grads: GradientStore, state: AdamState,
                        lrs: dict[str, float]) -> None:
    """Vectorized Adam over whole arrays, in place; zero gradients still decay the moments."""
    for name, theta in params.arrays().items():
        g = getattr(grads, name)
        F = theta.dtype.type
        b1, omb1, b2, omb2, eps, bc1, bc2 = state.scalars(name, theta.dtype)
        lr = F(lrs[name])
        m = state.m[name]
        v = state.v[name]
        m[...] = b1 * m + omb1 * g
        v[...] = b2 * v + omb2 * (g * g)
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    state.advance()


@numba.njit(cache=True)
def _adam_sweep(theta, g, m, v, lr, b1, omb1, b2, omb2, eps, bc1, bc2):
    for i in range(theta.shape[0]):
        mi = b1 * m[i] + omb1 * g[i]
        vi = b2 * v[i] + omb2 * (g[i] * g[i])
        m[i] = mi
        v[i] = vi
        theta[i] = theta[i] - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


@numba.njit(cache=True)
def _adam_rows(theta, g, m, v, rows, lr, b1, omb1, b2, omb2, eps, bc1, bc2):
    """Update only rows where ``rows`` is true; (N, K) arrays."""
    for r in range(theta.shape[0]):
        if not rows[r]:
            continue
        for k in range(theta.shape[1]):
            mi = b1 * m[r, k] + omb1 * g[r, k]
            vi = b2 * v[r, k] + omb2 * (g[r, k] * g[r, k])
            m[r, k] = mi
            v[r, k] = vi
            theta[r, k] = theta[r, k] - lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


def _flat(a):
    if not a.flags.c_contiguous:
        raise ValueError("fused Adam needs C-contiguous arrays")
    return a.reshape(-1)


def _rows2d(a):
    return a.reshape(a.shape[0], -1) if a.shape[0] else a.reshape(0, 1)


def adam_step_fused(params: ParameterStore, grads: GradientStore, state: AdamState,
                    lrs: dict[str, float]) -> None:
    """Single pass per array computing both moments and the update."""
    for name, theta in params.arrays().items():
        F = theta.dtype.type
        _adam_sweep(_flat(theta), _flat(np.ascontiguousarray(getattr(grads, name))),
                    _flat(state.m[name]), _flat(state.v[name]), F(lrs[name]),
                    *state.scalars(name, theta.dtype))
    state.advance()


def adam_step_rows(params: ParameterStore, grads: GradientStore, state: AdamState,
                   lrs: dict[str, float], rows: np.ndarray, advance: bool = True) -> None:
    """Adam on the selected Gaussians only; the other rows are not touched at all."""
    rows = np.ascontiguousarray(rows, np.bool_)
    for name, theta in params.arrays().items():
        F = theta.dtype.type
        _adam_rows(_rows2d(theta), _rows2d(np.ascontiguousarray(getattr(grads, name))),
                   _rows2d(state.m[name]), _rows2d(state.v[name]), rows, F(lrs[name]),
                   *state.scalars(name, theta.dtype))
    if advance:
        state.advance()


def adam_step_skip_invisible(params, grads, state, lrs, visible) -> None:
    """Update visible Gaussians only. Trades a little quality for skipped work."""
    adam_step_rows(params, grads, state, lrs, visible)


def fused_backward_update(result, params, d_image, state: AdamState, lrs: dict[str, float],
                          skip_invisible: bool = False, mode: str | None = None,
                          backward_fn=None, accumulated=None, touched=None):
    """Backward pass whose per-Gaussian merge applies Adam immediately.

    Gaussians that received a gradient merge are updated as soon as their
    gradient is final; a follow-up sweep then applies the zero-gradient update
    to everything else unless ``skip_invisible`` is set. The end state equals
    :func:`adam_step_reference` on the full gradient. ``accumulated`` holds
    gradients of earlier images in the same batch and ``touched`` their
    rendered masks. Returns (grads, d_mean2d) of this image.
    """
    if backward_fn is None:
        from .raster_backward import backward as backward_fn

    grads, d_mean2d = backward_fn(result, params, d_image, mode) if mode else backward_fn(result, params, d_image)
    total = grads
    if accumulated is not None:
        total = type(grads)(**{k: v + getattr(grads, k) for k, v in accumulated.arrays().items()})
    rows = np.zeros(len(params), np.bool_)
    rows[result.view.instances.gaussian_index] = True
    if touched is not None:
        rows |= touched
    adam_step_rows(params, total, state, lrs, rows, advance=False)
    if not skip_invisible:
        adam_step_rows(params, total, state, lrs, ~rows, advance=False)
    state.advance()
    return grads, d_mean2d


def rendered_mask(result, n: int) -> np.ndarray:
    """Gaussians with at least one tile instance in ``result``."""
    mask = np.zeros(n, np.bool_)
    mask[result.view.instances.gaussian_index] = True
    return mask
