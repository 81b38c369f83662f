"""Truncated signed-distance fusion of posed depth + label frames.

The volume is an axis-aligned voxel grid; voxel (i, j, k) is centered at
origin + (index + 0.5) * voxel_size. Each voxel stores

  - sdf: signed distance to the nearest observed surface along the
    camera ray, normalized by the truncation distance to [-1, 1]
    (positive in front of the surface, negative behind);
  - weight: number of fused observations, capped at w_max so long
    sequences stay adaptive;
  - label_counts: histogram of the 4 anatomical class ids seen within
    the truncation band, resolved by majority vote at mesh extraction.

The projective point-to-surface-along-ray distance (measured depth minus
voxel camera depth) is used rather than true Euclidean distance: standard,
cheap, and exact at the surface itself, with a known bias at grazing
angles.

Volume snapshot format, little-endian: header (magic b'TSDF', u32 nx ny
nz, f32 origin xyz, f32 voxel_size, f32 truncation), then nx*ny*nz records
(f32 sdf, f32 weight, u16 label_counts[4]) with x fastest.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .camera import Intrinsics
from .errors import DimensionMismatchError, DomainError, FormatError, MissingInputError
from .pose import PoseSE3, invert
from .raster import NUM_LABELS, DepthMap, LabelMap

DEFAULT_WEIGHT_CAP = 128.0


class TsdfVolume:
    """Mutable voxel grid of (sdf, weight, label histogram)."""

    def __init__(
        self,
        origin,
        voxel_size: float,
        dims: tuple[int, int, int],
        truncation: float,
        w_max: float = DEFAULT_WEIGHT_CAP,
    ):
        if voxel_size <= 0:
            raise DomainError(f"voxel_size must be positive, got {voxel_size}")
        if truncation < voxel_size:
            raise DomainError(
                f"truncation ({truncation}) must be >= voxel_size ({voxel_size}) "
                "for watertight zero crossings"
            )
        if any(d < 1 for d in dims):
            raise DomainError(f"dims must be >= 1, got {dims}")
        if w_max <= 0:
            raise DomainError("w_max must be positive")
        self.origin = np.asarray(origin, dtype=np.float64).copy()
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        self.truncation = float(truncation)
        self.w_max = float(w_max)
        self.sdf = np.zeros(self.dims, dtype=np.float32)
        self.weight = np.zeros(self.dims, dtype=np.float32)
        self.label_counts = np.zeros(self.dims + (NUM_LABELS,), dtype=np.int32)

    def voxel_centers_axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-axis center coordinates (xs, ys, zs)."""
        return tuple(
            self.origin[a] + (np.arange(self.dims[a], dtype=np.float64) + 0.5) * self.voxel_size
            for a in range(3)
        )

    def voxel_center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) * self.voxel_size

    def observed(self) -> np.ndarray:
        return self.weight > 0

    def copy(self) -> "TsdfVolume":
        out = TsdfVolume(self.origin, self.voxel_size, self.dims, self.truncation, self.w_max)
        out.sdf = self.sdf.copy()
        out.weight = self.weight.copy()
        out.label_counts = self.label_counts.copy()
        return out


@dataclass(frozen=True)
class FusionChunk:
    """Short posed sequence fused into one map.

    Poses are camera-to-world. The clinical operating envelope is n in
    roughly 70..200 frames (one translational sweep); not enforced.
    """

    frames: tuple[tuple[DepthMap, LabelMap | None, PoseSE3], ...]

    def __post_init__(self):
        if len(self.frames) < 1:
            raise DomainError("chunk needs at least one frame")

    @property
    def n(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class VolumeParams:
    voxel_size: float
    truncation: float
    origin: tuple[float, float, float] | None = None
    dims: tuple[int, int, int] | None = None
    w_max: float = DEFAULT_WEIGHT_CAP


def integrate(
    vol: TsdfVolume,
    depth: DepthMap,
    labels: LabelMap | None,
    pose: PoseSE3,
    K: Intrinsics,
) -> TsdfVolume:
    """Fuse one posed depth (and optional label) frame into the volume.

    For every voxel center projecting onto a valid depth pixel with
    sdf_raw = d_meas - z_voxel > -truncation, the normalized clamped sdf
    enters the running average sdf <- (w*sdf + s)/(w+1), w <- min(w+1,
    w_max). Labels are counted only inside the band |sdf_raw| <
    truncation. Mutates and returns `vol`.
    """
    if (K.width, K.height) != (depth.width, depth.height):
        raise DimensionMismatchError(
            f"intrinsics {K.width}x{K.height} vs depth {depth.width}x{depth.height}"
        )
    if labels is not None and (labels.width, labels.height) != (depth.width, depth.height):
        raise DimensionMismatchError(
            f"labels {labels.width}x{labels.height} vs depth {depth.width}x{depth.height}"
        )

    w2c = invert(pose)
    r = w2c.rotation_matrix()
    t = w2c.translation
    xs, ys, zs = vol.voxel_centers_axes()

    # Camera-frame coordinates of every voxel center, by broadcasting the
    # per-axis contributions (never materializes the world-point grid).
    cx_ = (
        r[0, 0] * xs[:, None, None] + r[0, 1] * ys[None, :, None] + r[0, 2] * zs[None, None, :] + t[0]
    )
    cy_ = (
        r[1, 0] * xs[:, None, None] + r[1, 1] * ys[None, :, None] + r[1, 2] * zs[None, None, :] + t[1]
    )
    cz_ = (
        r[2, 0] * xs[:, None, None] + r[2, 1] * ys[None, :, None] + r[2, 2] * zs[None, None, :] + t[2]
    )

    flat_idx = np.flatnonzero(cz_ > 0)
    if flat_idx.size == 0:
        return vol
    zc = cz_.ravel()[flat_idx]
    u = np.rint(K.fx * cx_.ravel()[flat_idx] / zc + K.cx).astype(np.int64)
    v = np.rint(K.fy * cy_.ravel()[flat_idx] / zc + K.cy).astype(np.int64)
    in_img = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    flat_idx = flat_idx[in_img]
    if flat_idx.size == 0:
        return vol
    zc = zc[in_img]
    u = u[in_img]
    v = v[in_img]

    d_meas = depth.data[v, u]
    sdf_raw = d_meas - zc
    upd = (d_meas > 0) & (sdf_raw > -vol.truncation)
    flat_idx = flat_idx[upd]
    if flat_idx.size == 0:
        return vol
    sdf_raw = sdf_raw[upd]
    sdf_norm = np.clip(sdf_raw / vol.truncation, -1.0, 1.0).astype(np.float32)

    w_old = vol.weight.ravel()[flat_idx]
    sdf_old = vol.sdf.ravel()[flat_idx]
    vol.sdf.ravel()[flat_idx] = (w_old * sdf_old + sdf_norm) / (w_old + 1.0)
    vol.weight.ravel()[flat_idx] = np.minimum(w_old + 1.0, vol.w_max)

    if labels is not None:
        band = np.abs(sdf_raw) < vol.truncation
        band_idx = flat_idx[band]
        lbl = labels.data[v[upd][band], u[upd][band]].astype(np.int64)
        counts = vol.label_counts.reshape(-1, NUM_LABELS)
        # Each voxel appears at most once per frame, so plain fancy
        # indexing (no add.at) is safe.
        counts[band_idx, lbl] += 1
    return vol


def auto_volume_params(chunk: FusionChunk, params: VolumeParams, K: Intrinsics) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Bounding box of all observed surface points, padded by 4*truncation.

    The box covers the backprojected valid-depth pixels of every frame
    (the surface region a frustum actually observed), not the camera
    positions.
    """
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for depth, _labels, pose in chunk.frames:
        d = depth.data
        vmask = d > 0
        if not vmask.any():
            continue
        vs_, us_ = np.nonzero(vmask)
        z = d[vs_, us_]
        x = (us_ - K.cx) / K.fx * z
        y = (vs_ - K.cy) / K.fy * z
        pts = pose.apply(np.stack([x, y, z], axis=1))
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
    if not np.isfinite(lo).all():
        raise DomainError("no valid depth in any frame; cannot size volume")
    pad = 4.0 * params.truncation
    lo -= pad
    hi += pad
    dims = tuple(int(np.ceil((hi[a] - lo[a]) / params.voxel_size)) for a in range(3))
    return lo, dims


def fuse_chunk(chunk: FusionChunk, params: VolumeParams, K: Intrinsics) -> TsdfVolume:
    """Sequentially integrate every frame of a chunk into a fresh volume.

    When params.origin/dims are unset the volume is auto-sized to the
    union of the frames' observed surface regions.
    """
    if params.origin is None or params.dims is None:
        origin, dims = auto_volume_params(chunk, params, K)
    else:
        origin, dims = np.asarray(params.origin, dtype=np.float64), tuple(params.dims)
    vol = TsdfVolume(origin, params.voxel_size, dims, params.truncation, params.w_max)
    for depth, labels, pose in chunk.frames:
        integrate(vol, depth, labels, pose, K)
    return vol


def query_sdf(vol: TsdfVolume, point) -> tuple[float, bool]:
    """Trilinear sdf at a world point; observed only when all 8
    neighboring voxels carry weight. Out-of-volume queries return
    (0.0, False)."""
    p = np.asarray(point, dtype=np.float64)
    c = (p - vol.origin) / vol.voxel_size - 0.5
    i0 = np.floor(c).astype(np.int64)
    if (i0 < 0).any() or (i0 + 1 >= np.asarray(vol.dims)).any():
        return 0.0, False
    f = c - i0
    ix, iy, iz = i0
    val = 0.0
    observed = True
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wgt = (
                    (f[0] if dx else 1 - f[0])
                    * (f[1] if dy else 1 - f[1])
                    * (f[2] if dz else 1 - f[2])
                )
                val += wgt * float(vol.sdf[ix + dx, iy + dy, iz + dz])
                observed &= bool(vol.weight[ix + dx, iy + dy, iz + dz] > 0)
    return val, observed


# ---------------------------------------------------------------------------
# TV-L1 refinement


def _grad3(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gz = np.zeros_like(u)
    gx[:-1, :, :] = u[1:, :, :] - u[:-1, :, :]
    gy[:, :-1, :] = u[:, 1:, :] - u[:, :-1, :]
    gz[:, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return gx, gy, gz


def _div3(px: np.ndarray, py: np.ndarray, pz: np.ndarray) -> np.ndarray:
    div = np.zeros_like(px)
    div[0, :, :] += px[0, :, :]
    div[1:-1, :, :] += px[1:-1, :, :] - px[:-2, :, :]
    div[-1, :, :] += -px[-2, :, :]
    div[:, 0, :] += py[:, 0, :]
    div[:, 1:-1, :] += py[:, 1:-1, :] - py[:, :-2, :]
    div[:, -1, :] += -py[:, -2, :]
    div[:, :, 0] += pz[:, :, 0]
    div[:, :, 1:-1] += pz[:, :, 1:-1] - pz[:, :, :-2]
    div[:, :, -1] += -pz[:, :, -2]
    return div


def tv_l1_energy(u: np.ndarray, f: np.ndarray, weight: np.ndarray, lambda_data: float) -> float:
    """Isotropic TV + weighted L1 data fidelity over observed voxels."""
    gx, gy, gz = _grad3(u)
    tv = float(np.sqrt(gx * gx + gy * gy + gz * gz).sum())
    data = float((weight * np.abs(u - f)).sum())
    return tv + lambda_data * data


@dataclass(frozen=True)
class TvReport:
    """Energy trace of the refinement. `energies` holds the energy of the
    released iterate after each iteration (monotone non-increasing);
    `candidate_energies` the raw primal-dual iterates, which may
    oscillate near convergence."""

    energies: tuple[float, ...]
    candidate_energies: tuple[float, ...]
    iterations: int


def regularize_tv_l1(
    vol: TsdfVolume, lambda_data: float, iters: int = 100
) -> tuple[TsdfVolume, TvReport]:
    """Refine the fused sdf by minimizing sum |grad u| + lambda * sum
    w |u - f| with first-order primal-dual iterations.

    f is the fused sdf, w the fusion weights; unobserved voxels (w = 0)
    have no data term and are inpainted by the TV term. Steps sigma = tau
    = 1/sqrt(12) (the 3D forward-difference operator norm bound). The
    released iterate is the best-energy primal iterate seen so far, which
    makes the reported energy trace monotone without altering the
    underlying iteration. Returns a new volume; weights and labels are
    carried over unchanged.
    """
    if lambda_data <= 0:
        raise DomainError(f"lambda_data must be positive, got {lambda_data}")
    if iters < 1:
        raise DomainError("iters must be >= 1")

    f = vol.sdf.astype(np.float64)
    w = vol.weight.astype(np.float64)
    tau = sigma = 1.0 / np.sqrt(12.0)
    thresh = tau * lambda_data * w
    data_mask = w > 0

    u = f.copy()
    u_bar = u.copy()
    px = np.zeros_like(u)
    py = np.zeros_like(u)
    pz = np.zeros_like(u)

    best_u = u.copy()
    best_e = tv_l1_energy(u, f, w, lambda_data)
    energies = [best_e]
    candidates = [best_e]

    for _ in range(iters):
        gx, gy, gz = _grad3(u_bar)
        px += sigma * gx
        py += sigma * gy
        pz += sigma * gz
        norm = np.maximum(1.0, np.sqrt(px * px + py * py + pz * pz))
        px /= norm
        py /= norm
        pz /= norm

        u_prev = u
        u_tilde = u + tau * _div3(px, py, pz)
        diff = u_tilde - f
        shrunk = f + np.sign(diff) * np.maximum(np.abs(diff) - thresh, 0.0)
        u = np.where(data_mask, shrunk, u_tilde)
        u_bar = 2.0 * u - u_prev

        e = tv_l1_energy(u, f, w, lambda_data)
        candidates.append(e)
        if e < best_e:
            best_e = e
            best_u = u.copy()
        energies.append(best_e)

    out = vol.copy()
    out.sdf = np.clip(best_u, -1.0, 1.0).astype(np.float32)
    return out, TvReport(
        energies=tuple(energies),
        candidate_energies=tuple(candidates),
        iterations=iters,
    )


# ---------------------------------------------------------------------------
# Snapshot I/O

_VOLUME_MAGIC = b"TSDF"
_VOXEL_DTYPE = np.dtype([("sdf", "<f4"), ("weight", "<f4"), ("labels", "<u2", (NUM_LABELS,))])


def save_volume(vol: TsdfVolume, path: str) -> None:
    n = int(np.prod(vol.dims))
    records = np.empty(n, dtype=_VOXEL_DTYPE)
    records["sdf"] = vol.sdf.ravel(order="F")
    records["weight"] = vol.weight.ravel(order="F")
    counts = np.clip(vol.label_counts, 0, np.iinfo(np.uint16).max).astype(np.uint16)
    # x-fastest flatten of the spatial axes, label axis kept per record
    records["labels"] = counts.transpose(2, 1, 0, 3).reshape(-1, NUM_LABELS)
    with open(path, "wb") as fh:
        fh.write(_VOLUME_MAGIC)
        fh.write(struct.pack("<III", *vol.dims))
        fh.write(struct.pack("<fff", *(float(c) for c in vol.origin)))
        fh.write(struct.pack("<ff", vol.voxel_size, vol.truncation))
        fh.write(records.tobytes())


def load_volume(path: str) -> TsdfVolume:
    if not os.path.exists(path):
        raise MissingInputError(f"volume file not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != _VOLUME_MAGIC:
            raise FormatError(f"{path}: bad magic")
        try:
            nx, ny, nz = struct.unpack("<III", fh.read(12))
            ox, oy, oz = struct.unpack("<fff", fh.read(12))
            voxel_size, truncation = struct.unpack("<ff", fh.read(8))
        except struct.error as e:
            raise FormatError(f"{path}: truncated header") from e
        payload = fh.read(nx * ny * nz * _VOXEL_DTYPE.itemsize)
    if len(payload) != nx * ny * nz * _VOXEL_DTYPE.itemsize:
        raise FormatError(f"{path}: truncated payload")
    records = np.frombuffer(payload, dtype=_VOXEL_DTYPE)
    vol = TsdfVolume((ox, oy, oz), voxel_size, (nx, ny, nz), truncation)
    # integrate() indexes through C-contiguous ravel views, so force layout
    vol.sdf = np.ascontiguousarray(records["sdf"].reshape((nx, ny, nz), order="F"), dtype=np.float32)
    vol.weight = np.ascontiguousarray(
        records["weight"].reshape((nx, ny, nz), order="F"), dtype=np.float32
    )
    vol.label_counts = np.ascontiguousarray(
        records["labels"].reshape((nz, ny, nx, NUM_LABELS)).transpose(2, 1, 0, 3), dtype=np.int32
    )
    return vol
