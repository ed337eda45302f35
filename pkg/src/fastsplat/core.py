"""Gaussian parameter model: activations, rotations, covariances and SH color."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

QUAT_EPS = 1e-4

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


class DegenerateError(ValueError):
    """Raised by scalar helpers when a Gaussian cannot be rendered."""


# activations ---------------------------------------------------------------

def activate_scales(log_scales):
    return np.exp(log_scales)


def activate_scales_grad(log_scales):
    return np.exp(log_scales)


def activate_opacity(logit):
    logit = np.asarray(logit)
    return 1.0 / (1.0 + np.exp(-logit))


def activate_opacity_grad(logit):
    s = activate_opacity(logit)
    return s * (1.0 - s)


def inverse_sigmoid(p):
    p = np.asarray(p)
    return np.log(p / (1.0 - p))


# rotations -----------------------------------------------------------------

def quaternion_valid(q) -> np.ndarray:
    """True where the raw quaternion is long enough to normalize stably."""
    return np.linalg.norm(q, axis=-1) >= QUAT_EPS


def rotation_matrices(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) raw quaternions in (w, x, y, z) order.

    Degenerate quaternions (norm < 1e-4) yield identity; callers mask them
    with :func:`quaternion_valid`.
    """
    q = np.asarray(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    ok = norm >= QUAT_EPS
    qn = np.where(ok, q / np.where(ok, norm, 1), np.array([1, 0, 0, 0], dtype=q.dtype))
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_from_quaternion(q) -> np.ndarray:
    """Rotation of ``q / |q|``; raises :class:`DegenerateError` if |q| < 1e-4."""
    q = np.asarray(q, dtype=np.float64)
    if not quaternion_valid(q):
        raise DegenerateError(f"quaternion norm {np.linalg.norm(q):.3g} below {QUAT_EPS}")
    return rotation_matrices(q)


def rotation_matrices_backward(q: np.ndarray, d_R: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw quaternion given dL/dR (through normalization)."""
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    norm = np.maximum(norm, QUAT_EPS)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = d_R
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    d_qn = np.stack([dw, dx, dy, dz], axis=-1)
    return (d_qn - qn * np.sum(qn * d_qn, axis=-1, keepdims=True)) / norm


# covariance ----------------------------------------------------------------

def build_covariance3d(rotation: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """``R diag(s^2) R^T``, symmetrized so that ``cov == cov.T`` bit for bit."""
    M = rotation * scales[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    upper = np.triu(np.ones((3, 3), dtype=bool), 1)
    cov = np.where(upper.T, np.swapaxes(cov, -1, -2), cov)
    return cov


def build_covariance3d_backward(rotation, scales, d_cov):
    """Returns (dL/dR, dL/ds) for a symmetric upstream gradient ``d_cov``."""
    d_cov = 0.5 * (d_cov + np.swapaxes(d_cov, -1, -2))
    M = rotation * scales[..., None, :]
    d_M = 2.0 * d_cov @ M
    d_R = d_M * scales[..., None, :]
    d_s = np.sum(d_M * rotation, axis=-2)
    return d_R, d_s


# spherical harmonics -------------------------------------------------------

def sh_basis(dirs: np.ndarray, degree: int = 3) -> np.ndarray:
    """Real SH basis values (..., 16); entries above ``degree`` are zero."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    B = np.zeros(dirs.shape[:-1] + (16,), dtype=dirs.dtype)
    B[..., 0] = SH_C0
    if degree >= 1:
        B[..., 1] = -SH_C1 * y
        B[..., 2] = SH_C1 * z
        B[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        B[..., 4] = SH_C2[0] * x * y
        B[..., 5] = SH_C2[1] * y * z
        B[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        B[..., 7] = SH_C2[3] * x * z
        B[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        B[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        B[..., 10] = SH_C3[1] * x * y * z
        B[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        B[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        B[..., 14] = SH_C3[5] * z * (xx - yy)
        B[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return B


def sh_basis_jacobian(dirs: np.ndarray, degree: int = 3) -> np.ndarray:
    """d basis / d(x, y, z), shape (..., 16, 3), treating x, y, z as free."""
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    D = np.zeros(dirs.shape[:-1] + (16, 3), dtype=dirs.dtype)
    if degree >= 1:
        D[..., 1, 1] = -SH_C1
        D[..., 2, 2] = SH_C1
        D[..., 3, 0] = -SH_C1
    if degree >= 2:
        D[..., 4, 0], D[..., 4, 1] = SH_C2[0] * y, SH_C2[0] * x
        D[..., 5, 1], D[..., 5, 2] = SH_C2[1] * z, SH_C2[1] * y
        D[..., 6, 0], D[..., 6, 1], D[..., 6, 2] = -2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z
        D[..., 7, 0], D[..., 7, 2] = SH_C2[3] * z, SH_C2[3] * x
        D[..., 8, 0], D[..., 8, 1] = 2 * SH_C2[4] * x, -2 * SH_C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        D[..., 9, 0], D[..., 9, 1] = SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy)
        D[..., 10, 0], D[..., 10, 1], D[..., 10, 2] = SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y
        D[..., 11, 0] = SH_C3[2] * -2 * x * y
        D[..., 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        D[..., 11, 2] = SH_C3[2] * 8 * y * z
        D[..., 12, 0] = SH_C3[3] * -6 * x * z
        D[..., 12, 1] = SH_C3[3] * -6 * y * z
        D[..., 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        D[..., 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        D[..., 13, 1] = SH_C3[4] * -2 * x * y
        D[..., 13, 2] = SH_C3[4] * 8 * x * z
        D[..., 14, 0], D[..., 14, 1], D[..., 14, 2] = (SH_C3[5] * 2 * x * z, SH_C3[5] * -2 * y * z,
                                                       SH_C3[5] * (xx - yy))
        D[..., 15, 0], D[..., 15, 1] = SH_C3[6] * (3 * xx - 3 * yy), SH_C3[6] * -6 * x * y
    return D


def eval_sh(coeffs: np.ndarray, view_dir: np.ndarray, active_degree: int = 3) -> np.ndarray:
    """View-dependent RGB: ``max(0, basis . coeffs + 0.5)``.

    ``coeffs`` has shape (..., 16, 3); ``view_dir`` (..., 3) must be unit length.
    """
    B = sh_basis(np.asarray(view_dir), active_degree)
    raw = np.einsum("...k,...kc->...c", B, coeffs) + 0.5
    return np.maximum(raw, 0.0)


# parameter containers ------------------------------------------------------

class ColumnStore:
    """Shared helpers for dataclasses holding one array per attribute, N rows each."""

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def dtype(self):
        return self.means.dtype

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.names()}

    @classmethod
    def empty(cls, dtype=np.float32):
        return cls.zeros(0, dtype)

    @classmethod
    def zeros(cls, n: int, dtype=np.float32):
        return cls(**{k: np.zeros((n,) + shape, dtype) for k, shape in cls.row_shapes().items()})

    def astype(self, dtype):
        return type(self)(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.arrays().items()})

    def take(self, index):
        return type(self)(**{k: v[index] for k, v in self.arrays().items()})

    def reindex(self, index) -> None:
        """Gather every attribute through ``index`` in place."""
        for k, v in self.arrays().items():
            setattr(self, k, v[index])

    def sh_coeffs(self) -> np.ndarray:
        """(N, 16, 3) stacked DC + rest coefficients."""
        return np.concatenate([self.sh_dc[:, None, :], self.sh_rest], axis=1)

    def opacities(self) -> np.ndarray:
        return activate_opacity(self.opacity_logits[:, 0])

    def validate(self) -> None:
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")

    def _check_shapes(self):
        n = self.means.shape[0]
        for name, shape in self.row_shapes().items():
            arr = getattr(self, name)
            if arr.shape != (n,) + shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {(n,) + shape}")


@dataclass
class ParameterStore(ColumnStore):
    """Raw (pre-activation) per-Gaussian parameters, one array per attribute.

    ``sh_rest`` holds the 15 higher-order coefficients per channel as
    (N, 15, 3); it is the N x 45 block of the PLY layout reshaped.
    """

    means: np.ndarray
    log_scales: np.ndarray
    quaternions: np.ndarray
    opacity_logits: np.ndarray
    sh_dc: np.ndarray
    sh_rest: np.ndarray

    def __post_init__(self):
        self._check_shapes()

    @staticmethod
    def row_shapes() -> dict[str, tuple]:
        return {"means": (3,), "log_scales": (3,), "quaternions": (4,), "opacity_logits": (1,),
                "sh_dc": (3,), "sh_rest": (15, 3)}

    def scales(self) -> np.ndarray:
        return activate_scales(self.log_scales)


@dataclass
class GradientStore:
    """Gradients mirroring :class:`ParameterStore` plus densification stats."""

    means: np.ndarray
    log_scales: np.ndarray
    quaternions: np.ndarray
    opacity_logits: np.ndarray
    sh_dc: np.ndarray
    sh_rest: np.ndarray

    @classmethod
    def zeros_like(cls, store) -> "GradientStore":
        return cls(**{k: np.zeros_like(v) for k, v in store.arrays().items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def __add__(self, other: "GradientStore") -> "GradientStore":
        return type(self)(**{k: v + getattr(other, k) for k, v in self.arrays().items()})


@dataclass
class DensifyStats:
    """Accumulated screen-space gradient norms per Gaussian."""

    grad_accum: np.ndarray
    visible_count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n, np.float64), np.zeros(n, np.int64))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"grad_accum": self.grad_accum, "visible_count": self.visible_count}

    def reindex(self, index) -> None:
        self.grad_accum = self.grad_accum[index]
        self.visible_count = self.visible_count[index]

    def reset(self) -> None:
        self.grad_accum[:] = 0
        self.visible_count[:] = 0
