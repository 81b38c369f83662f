"""Image, depth, label, and mask rasters plus sampling and gradients.

All buffers are immutable after construction (the backing numpy arrays are
marked read-only). Data layout is (H, W) or (H, W, C), row-major, with
pixel (u, v) = column u, row v.

File formats:
  - Images: 8-bit PNG, gray or RGB, values mapped to [0, 1] by /255.
  - Depth: 16-bit single-channel PNG storing round(mm * 10); 0 = invalid.
    Quantizes to 0.1 mm, max 6553.5 mm. For lossless pipelines there is a
    raw float32 format: 16-byte header (magic b'DPTH', u32 width, u32
    height, u32 reserved) followed by little-endian float32, row-major.
  - Labels: 8-bit indexed PNG, pixel value = class id (0 other, 1
    cartilage, 2 meniscus, 3 ACL).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DomainError, FormatError, MissingInputError

LABEL_OTHER = 0
LABEL_CARTILAGE = 1
LABEL_MENISCUS = 2
LABEL_ACL = 3
NUM_LABELS = 4

# Tolerance for classifying a sampling coordinate as in-bounds, so that
# float round-off at the image border does not flip validity.
_EDGE_EPS = 1e-9


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ImageBuffer:
    """Color or gray raster with values in [0, 1], shape (H, W, C)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise DomainError(f"image must be (H, W) or (H, W, 1|3), got shape {d.shape}")
        if d.size and (np.nanmin(d) < 0.0 or np.nanmax(d) > 1.0 or not np.isfinite(d).all()):
            raise DomainError("image values must be finite and within [0, 1]")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class DepthMap:
    """Metric z-depth in mm, (H, W); 0 marks invalid pixels."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2:
            raise DomainError(f"depth must be (H, W), got shape {d.shape}")
        if d.size and (not np.isfinite(d).all() or np.nanmin(d) < 0.0):
            raise DomainError("depth values must be finite and >= 0 (0 = invalid)")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def valid_mask(self) -> np.ndarray:
        return self.data > 0

    def mean_valid_depth(self) -> float:
        m = self.valid_mask()
        if not m.any():
            raise DomainError("depth map has no valid pixels")
        return float(self.data[m].mean())


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel anatomical class ids in {0, 1, 2, 3}, (H, W)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise DomainError(f"labels must be (H, W), got shape {d.shape}")
        d = d.astype(np.uint8, casting="unsafe")
        if d.size and d.max() >= NUM_LABELS:
            raise DomainError(f"label ids must be < {NUM_LABELS}, got max {d.max()}")
        object.__setattr__(self, "data", _freeze(d))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class MaskBuffer:
    """Per-pixel binary flags, (H, W) bool."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise DomainError(f"mask must be (H, W), got shape {d.shape}")
        if d.dtype != np.bool_:
            if not np.isin(d, (0, 1)).all():
                raise DomainError("mask values must be 0 or 1")
            d = d.astype(bool)
        object.__setattr__(self, "data", _freeze(d))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def count(self) -> int:
        return int(self.data.sum())


def bilinear_sample(img: ImageBuffer, u: float, v: float, clamp: bool = False):
    """Sample one continuous position; returns (color, in_bounds).

    In-bounds means (u, v) within [0, W-1] x [0, H-1]; outside, the color
    is zero and the flag False unless `clamp`, which clamps coordinates to
    the border and always reports True.
    """
    color, valid = bilinear_sample_many(
        img, np.array([u], dtype=np.float64), np.array([v], dtype=np.float64), clamp=clamp
    )
    return color[0], bool(valid[0])


def bilinear_sample_many(img: ImageBuffer, u: np.ndarray, v: np.ndarray, clamp: bool = False):
    """Vectorized bilinear sampling.

    u, v: arrays of continuous pixel coordinates (any matching shape).
    Returns (colors, valid) with colors shaped u.shape + (C,). Invalid
    samples are zero-filled.
    """
    data = img.data
    h, w = data.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if clamp:
        valid = np.ones(u.shape, dtype=bool)
    else:
        valid = (
            (u >= -_EDGE_EPS)
            & (u <= w - 1 + _EDGE_EPS)
            & (v >= -_EDGE_EPS)
            & (v <= h - 1 + _EDGE_EPS)
        )
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    u0 = np.floor(uc).astype(np.intp)
    v0 = np.floor(vc).astype(np.intp)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (uc - u0)[..., None]
    fv = (vc - v0)[..., None]
    c00 = data[v0, u0]
    c01 = data[v0, u1]
    c10 = data[v1, u0]
    c11 = data[v1, u1]
    top = c00 * (1.0 - fu) + c01 * fu
    bot = c10 * (1.0 - fu) + c11 * fu
    out = top * (1.0 - fv) + bot * fv
    out[~valid] = 0.0
    return out, valid


def gradients(raster) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences dx[i, j] = a[i, j+1] - a[i, j] (last column 0),
    and dy analogously (last row 0).

    Accepts ImageBuffer or DepthMap; returns arrays of the input's data
    shape.
    """
    data = raster.data
    if data.shape[0] < 2 or data.shape[1] < 2:
        raise DomainError(f"gradients need at least 2x2 raster, got {data.shape[:2]}")
    dx = np.zeros_like(data, dtype=np.float64)
    dy = np.zeros_like(data, dtype=np.float64)
    dx[:, :-1, ...] = data[:, 1:, ...] - data[:, :-1, ...]
    dy[:-1, :, ...] = data[1:, :, ...] - data[:-1, :, ...]
    return dx, dy


# ---------------------------------------------------------------------------
# File I/O


def save_image_png(img: ImageBuffer, path: str) -> None:
    arr = np.rint(img.data * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_image_png(path: str) -> ImageBuffer:
    if not os.path.exists(path):
        raise MissingInputError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return ImageBuffer(arr)


DEPTH_PNG_SCALE = 10.0  # stored value = mm * 10
DEPTH_PNG_MAX_MM = 65535 / DEPTH_PNG_SCALE


def save_depth_png(depth: DepthMap, path: str) -> None:
    if depth.data.max(initial=0.0) > DEPTH_PNG_MAX_MM:
        raise DomainError(
            f"depth exceeds 16-bit PNG range ({DEPTH_PNG_MAX_MM} mm); use the raw format"
        )
    q = np.rint(depth.data * DEPTH_PNG_SCALE).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_depth_png(path: str) -> DepthMap:
    if not os.path.exists(path):
        raise MissingInputError(f"depth image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype != np.uint16:
        raise FormatError(f"{path}: expected 16-bit depth PNG, got dtype {arr.dtype}")
    return DepthMap(arr.astype(np.float64) / DEPTH_PNG_SCALE)


_DEPTH_RAW_MAGIC = b"DPTH"


def save_depth_raw(depth: DepthMap, path: str) -> None:
    with open(path, "wb") as f:
        f.write(_DEPTH_RAW_MAGIC)
        f.write(struct.pack("<III", depth.width, depth.height, 0))
        f.write(depth.data.astype("<f4").tobytes())


def load_depth_raw(path: str) -> DepthMap:
    if not os.path.exists(path):
        raise MissingInputError(f"depth file not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _DEPTH_RAW_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        try:
            w, h, _ = struct.unpack("<III", f.read(12))
        except struct.error as e:
            raise FormatError(f"{path}: truncated header") from e
        payload = f.read(4 * w * h)
    if len(payload) != 4 * w * h:
        raise FormatError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    return DepthMap(arr.astype(np.float64))


# Class-id palette for indexed label PNGs: other=cyan, cartilage=green,
# meniscus=red, ACL=blue.
LABEL_PALETTE_RGB = ((0, 255, 255), (0, 255, 0), (255, 0, 0), (0, 0, 255))


def save_labels_png(labels: LabelMap, path: str) -> None:
    im = Image.fromarray(labels.data, mode="P")
    flat = [c for rgb in LABEL_PALETTE_RGB for c in rgb]
    im.putpalette(flat + [0] * (768 - len(flat)))
    im.save(path)


def load_labels_png(path: str) -> LabelMap:
    if not os.path.exists(path):
        raise MissingInputError(f"label image not found: {path}")
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise FormatError(f"{path}: expected indexed or gray label PNG, got {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.max(initial=0) >= NUM_LABELS:
        raise FormatError(f"{path}: label id out of range")
    return LabelMap(arr)
