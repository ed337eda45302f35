"""Pinhole cameras and EWA splatting of 3D Gaussians onto the image plane."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

NEAR = 0.2
DET_EPS = 1e-6
# guard band on x/z, y/z inside the projection Jacobian
JACOBIAN_CLAMP = 1.3


class OutOfFrustum(ValueError):
    pass


class DegenerateSplat(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = NEAR

    def __post_init__(self):
        W = np.asarray(self.world_to_camera, dtype=np.float64)
        if W.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        R = W[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5):
            raise ValueError("world_to_camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "world_to_camera", W)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def focal(self) -> float:
        return max(self.fx, self.fy)

    def jacobian_limits(self) -> tuple[float, float]:
        return (JACOBIAN_CLAMP * 0.5 * self.width / self.fx,
                JACOBIAN_CLAMP * 0.5 * self.height / self.fy)

    def scaled(self, factor: float) -> "Camera":
        """Same view rendered at ``factor`` times the resolution."""
        return replace(self, fx=self.fx * factor, fy=self.fy * factor, cx=self.cx * factor,
                       cy=self.cy * factor, width=int(round(self.width * factor)),
                       height=int(round(self.height * factor)))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target`` (+z forward, +y down)."""
    eye = np.asarray(eye, float)
    forward = np.asarray(target, float) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, float)
    if abs(np.dot(forward, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    W = np.eye(4)
    W[:3, :3] = R
    W[:3, 3] = -R @ eye
    return W


# projection ----------------------------------------------------------------

def transform_points(camera: Camera, means: np.ndarray) -> np.ndarray:
    R = camera.rotation.astype(means.dtype)
    t = camera.translation.astype(means.dtype)
    return means @ R.T + t


def project_points(camera: Camera, cam_points: np.ndarray) -> np.ndarray:
    x, y, z = cam_points[..., 0], cam_points[..., 1], cam_points[..., 2]
    return np.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], axis=-1)


def project_mean(camera: Camera, mean) -> tuple[np.ndarray, np.ndarray]:
    """Pixel position and camera-space point; raises :class:`OutOfFrustum` behind ``near``."""
    mean = np.asarray(mean, dtype=np.float64)
    p = transform_points(camera, mean)
    if p[2] <= camera.near:
        raise OutOfFrustum(f"depth {p[2]:.3g} <= near {camera.near}")
    return project_points(camera, p), p


def projection_jacobian(camera: Camera, cam_points: np.ndarray):
    """Affine projection Jacobian J (..., 2, 3) with clamped lateral ratios.

    Also returns the ratio clamp masks needed by the adjoint.
    """
    x, y, z = cam_points[..., 0], cam_points[..., 1], cam_points[..., 2]
    limx, limy = camera.jacobian_limits()
    rx, ry = x / z, y / z
    free_x = np.abs(rx) <= limx
    free_y = np.abs(ry) <= limy
    rx = np.clip(rx, -limx, limx)
    ry = np.clip(ry, -limy, limy)
    J = np.zeros(cam_points.shape[:-1] + (2, 3), dtype=cam_points.dtype)
    J[..., 0, 0] = camera.fx / z
    J[..., 0, 2] = -camera.fx * rx / z
    J[..., 1, 1] = camera.fy / z
    J[..., 1, 2] = -camera.fy * ry / z
    return J, free_x, free_y


def _symmetric2(a, b, c):
    out = np.empty(a.shape + (2, 2), dtype=a.dtype)
    out[..., 0, 0] = a
    out[..., 0, 1] = b
    out[..., 1, 0] = b
    out[..., 1, 1] = c
    return out


def project_covariance(camera: Camera, cam_point, cov3d) -> np.ndarray:
    """Screen-space covariance ``J W Sigma W^T J^T`` (exactly symmetric)."""
    cam_point = np.asarray(cam_point)
    cov3d = np.asarray(cov3d)
    J, _, _ = projection_jacobian(camera, cam_point)
    T = J @ camera.rotation.astype(J.dtype)
    full = T @ cov3d @ np.swapaxes(T, -1, -2)
    return _symmetric2(full[..., 0, 0], full[..., 0, 1], full[..., 1, 1])


@dataclass
class InvertedCov:
    conic: np.ndarray        # (..., 3) = (a, b, c) of the inverse
    det: np.ndarray          # determinant after dilation
    det_ratio: np.ndarray    # det before / det after dilation, clamped at 0
    valid: np.ndarray        # det >= DET_EPS


def invert_cov2d_batch(cov2d: np.ndarray, dilation: float) -> InvertedCov:
    a = cov2d[..., 0, 0]
    b = cov2d[..., 0, 1]
    c = cov2d[..., 1, 1]
    det_pre = a * c - b * b
    a = a + dilation
    c = c + dilation
    det = a * c - b * b
    valid = det >= DET_EPS
    safe = np.where(valid, det, 1)
    conic = np.stack([c / safe, -b / safe, a / safe], axis=-1)
    ratio = np.maximum(det_pre, 0) / safe
    return InvertedCov(conic, det, ratio, valid)


def invert_cov2d(cov2d, dilation: float = 0.0):
    """Dilate by ``dilation * I`` and invert.

    Returns ``(conic, det, det_ratio)``; raises :class:`DegenerateSplat` when the
    dilated determinant is below 1e-6.
    """
    inv = invert_cov2d_batch(np.asarray(cov2d, dtype=np.float64), dilation)
    if not inv.valid:
        raise DegenerateSplat(f"det {float(inv.det):.3g} < {DET_EPS}")
    return inv.conic, float(inv.det), float(inv.det_ratio)


# camera files --------------------------------------------------------------

def save_cameras(path, cameras) -> None:
    """One line per view: 16 row-major matrix entries, fx fy cx cy width height."""
    lines = ["# world_to_camera[16] fx fy cx cy width height"]
    for cam in cameras:
        vals = [repr(float(v)) for v in cam.world_to_camera.ravel()]
        vals += [repr(float(cam.fx)), repr(float(cam.fy)), repr(float(cam.cx)),
                 repr(float(cam.cy)), str(cam.width), str(cam.height)]
        lines.append(" ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path) -> list[Camera]:
    cameras = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 22:
            raise ValueError(f"{path}:{lineno}: expected 22 fields, got {len(parts)}")
        vals = [float(p) for p in parts]
        cameras.append(Camera(np.array(vals[:16]).reshape(4, 4), vals[16], vals[17],
                              vals[18], vals[19], int(vals[20]), int(vals[21])))
    return cameras
