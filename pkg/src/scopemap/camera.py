"""Pinhole camera model and rectified stereo rig.

Conventions used throughout the library:
  - Pixel (u, v) = (column, row); pixel centers sit at integer coordinates,
    so the image spans [0, W-1] x [0, H-1] in continuous coordinates.
  - The camera looks down +z; x points right, y points down in the image.
  - All lengths are millimeters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole projection parameters for one rectified view."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise DomainError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise DomainError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def to_matrix(self) -> np.ndarray:
        """3x3 intrinsic matrix [[fx,0,cx],[0,fy,cy],[0,0,1]]."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair: shared intrinsics, right camera at +x.

    `baseline` is the left-to-right translation along the left camera's
    +x axis, in mm. Rectification is assumed done upstream: zero relative
    rotation, identical intrinsics for both views. A real rig has
    baseline > 0; zero is accepted as the degenerate mono limit.
    """

    intrinsics: Intrinsics
    baseline: float

    def __post_init__(self):
        if self.baseline < 0:
            raise DomainError(f"baseline must be non-negative, got {self.baseline}")


def intrinsics_from_fov(fov_degrees: float, width: int, height: int) -> Intrinsics:
    """Build intrinsics from a horizontal field of view.

    fx = (width/2) / tan(fov/2), fy = fx, principal point at the image
    center ((W-1)/2, (H-1)/2).
    """
    if not (0.0 < fov_degrees < 180.0):
        raise DomainError(f"fov must be in (0, 180) degrees, got {fov_degrees}")
    fx = (width / 2.0) / math.tan(math.radians(fov_degrees) / 2.0)
    return Intrinsics(
        fx=fx,
        fy=fx,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
    )


def project(point, K: Intrinsics):
    """Project a camera-frame 3D point to (u, v, z).

    Raises DomainError for z <= 0 (point on or behind the image plane).
    """
    x, y, z = float(point[0]), float(point[1]), float(point[2])
    if z <= 0:
        raise DomainError(f"cannot project point with non-positive depth z={z}")
    return (K.fx * x / z + K.cx, K.fy * y / z + K.cy, z)


def backproject(u: float, v: float, depth: float, K: Intrinsics) -> np.ndarray:
    """Lift pixel (u, v) at the given z-depth to a camera-frame 3D point."""
    if depth <= 0:
        raise DomainError(f"depth must be positive, got {depth}")
    return np.array(
        [(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth], dtype=np.float64
    )


def project_points(points: np.ndarray, K: Intrinsics):
    """Vectorized projection of an (N, 3) array of camera-frame points.

    Returns (uv, z, in_front) where uv is (N, 2), z is (N,) and in_front
    flags z > 0. Rows with z <= 0 get uv filled with 0; callers must mask
    with in_front instead of raising, since bulk geometry (warping, TSDF)
    treats behind-camera points as invalid rather than exceptional.
    """
    pts = np.asarray(points, dtype=np.float64)
    z = pts[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    uv = np.empty((pts.shape[0], 2), dtype=np.float64)
    uv[:, 0] = np.where(in_front, K.fx * pts[:, 0] / safe_z + K.cx, 0.0)
    uv[:, 1] = np.where(in_front, K.fy * pts[:, 1] / safe_z + K.cy, 0.0)
    return uv, z, in_front


_GRID_CACHE: dict = {}


def pixel_ray_grid(K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel normalized image-plane coordinates ((u-cx)/fx, (v-cy)/fy).

    Returns two (H, W) arrays. Cached per intrinsics since every warp and
    render call needs the same grid.
    """
    key = (K.fx, K.fy, K.cx, K.cy, K.width, K.height)
    hit = _GRID_CACHE.get(key)
    if hit is not None:
        return hit
    u = (np.arange(K.width, dtype=np.float64) - K.cx) / K.fx
    v = (np.arange(K.height, dtype=np.float64) - K.cy) / K.fy
    gx, gy = np.meshgrid(u, v)
    gx.flags.writeable = False
    gy.flags.writeable = False
    _GRID_CACHE[key] = (gx, gy)
    return gx, gy
