"""Synthetic ray-casting scenes with exact ground truth.

Scenes are built from analytic primitives (plane, sphere, capsule), so
rendered depth is exact rather than sampled: a hit pixel's backprojected
point lies on the true surface to floating precision. Albedo is a
seedable multi-octave value noise over world coordinates, hashed with
integer arithmetic, so identical seeds give bit-identical rasters on any
platform. The `texture_amplitude` knob spans the two regimes of interest:
rich texture (amplitude ~0.5) where photometric objectives are well
conditioned, and the low-texture regime (amplitude ~0) where they break
down.

Lighting defaults to flat ambient. An optional point light co-located
with the camera (endoscope-style, inverse-square falloff) can be enabled
to break photometric constancy between views on purpose.

Rendering: rays go through pixel centers with camera-frame direction
((u-cx)/fx, (v-cy)/fy, 1) * t, so the ray parameter t is directly the
z-depth. Missed pixels get depth 0 (invalid), label 0, black color.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .camera import Intrinsics, StereoRig, pixel_ray_grid
from .errors import DomainError
from .pose import PoseSE3, Trajectory, compose, from_matrix
from .raster import DepthMap, ImageBuffer, LabelMap

_T_MIN = 1e-6


# ---------------------------------------------------------------------------
# Deterministic value noise


def _splitmix(h: np.ndarray) -> np.ndarray:
    h = h.astype(np.uint64)
    h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return h ^ (h >> np.uint64(31))


def _lattice_value(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: int) -> np.ndarray:
    seed_mix = (seed * 0xD6E8FEB86659FD93) & 0xFFFFFFFFFFFFFFFF
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
        ^ np.uint64(seed_mix)
    )
    return (_splitmix(h) >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points: np.ndarray, seed: int) -> np.ndarray:
    """Smooth deterministic noise in [0, 1) at (N, 3) world points."""
    q = np.asarray(points, dtype=np.float64)
    i = np.floor(q).astype(np.int64)
    f = q - i
    w = f * f * (3.0 - 2.0 * f)
    out = np.zeros(len(q))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                v = _lattice_value(i[:, 0] + dx, i[:, 1] + dy, i[:, 2] + dz, seed)
                wx = w[:, 0] if dx else 1.0 - w[:, 0]
                wy = w[:, 1] if dy else 1.0 - w[:, 1]
                wz = w[:, 2] if dz else 1.0 - w[:, 2]
                out += v * wx * wy * wz
    return out


def _octave_noise(points: np.ndarray, seed: int, base_scale: float, octaves: int = 3) -> np.ndarray:
    total = np.zeros(len(points))
    norm = 0.0
    amp = 1.0
    for k in range(octaves):
        total += amp * value_noise(points * (base_scale * (2.0**k)), seed + 101 * k)
        norm += amp
        amp *= 0.5
    return total / norm


# ---------------------------------------------------------------------------
# Primitives


@dataclass(frozen=True)
class Primitive:
    label: int
    base_color: tuple[float, float, float]
    texture_amplitude: float = 0.5
    texture_scale: float = 0.4  # noise lattice cells per mm

    def intersect(self, origins, dirs):  # pragma: no cover - abstract
        raise NotImplementedError

    def normal_at(self, points):  # pragma: no cover - abstract
        raise NotImplementedError

    def surface_distance(self, points):  # pragma: no cover - abstract
        raise NotImplementedError


@dataclass(frozen=True)
class Plane(Primitive):
    """Infinite plane through `point` with unit `normal`."""

    point: tuple[float, float, float] = (0.0, 0.0, 0.0)
    normal: tuple[float, float, float] = (0.0, 0.0, -1.0)

    def _n(self) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        return n / np.linalg.norm(n)

    def intersect(self, origins, dirs):
        n = self._n()
        denom = dirs @ n
        num = (np.asarray(self.point) - origins) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        return np.where(t > _T_MIN, t, np.inf)

    def normal_at(self, points):
        return np.broadcast_to(self._n(), points.shape).copy()

    def surface_distance(self, points):
        return (points - np.asarray(self.point)) @ self._n()


@dataclass(frozen=True)
class Sphere(Primitive):
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def intersect(self, origins, dirs):
        oc = origins - np.asarray(self.center)
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * np.einsum("ij,ij->i", dirs, oc)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2.0 * a)
        t1 = (-b + sq) / (2.0 * a)
        t = np.where(t0 > _T_MIN, t0, t1)
        return np.where(hit & (t > _T_MIN), t, np.inf)

    def normal_at(self, points):
        return (points - np.asarray(self.center)) / self.radius

    def surface_distance(self, points):
        return np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True)
class Capsule(Primitive):
    """Cylinder of `radius` around segment a-b with spherical caps."""

    a: tuple[float, float, float] = (0.0, 0.0, 0.0)
    b: tuple[float, float, float] = (1.0, 0.0, 0.0)
    radius: float = 1.0

    def intersect(self, origins, dirs):
        pa = np.asarray(self.a, dtype=np.float64)
        pb = np.asarray(self.b, dtype=np.float64)
        ab = pb - pa
        ab2 = float(ab @ ab)
        ao = origins - pa

        d_ab = dirs @ ab
        ao_ab = ao @ ab
        d_perp = dirs - np.outer(d_ab / ab2, ab)
        ao_perp = ao - np.outer(ao_ab / ab2, ab)

        a = np.einsum("ij,ij->i", d_perp, d_perp)
        b = 2.0 * np.einsum("ij,ij->i", ao_perp, d_perp)
        c = np.einsum("ij,ij->i", ao_perp, ao_perp) - self.radius**2
        disc = b * b - 4.0 * a * c
        body_ok = (disc >= 0) & (a > 1e-18)
        sq = np.sqrt(np.where(body_ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_body = np.where(body_ok, (-b - sq) / (2.0 * a), np.inf)
        s = (ao_ab + t_body * d_ab) / ab2
        t_body = np.where((t_body > _T_MIN) & (s >= 0.0) & (s <= 1.0), t_body, np.inf)

        t = t_body
        for cap_center in (pa, pb):
            oc = origins - cap_center
            ca = np.einsum("ij,ij->i", dirs, dirs)
            cb = 2.0 * np.einsum("ij,ij->i", dirs, oc)
            cc = np.einsum("ij,ij->i", oc, oc) - self.radius**2
            cdisc = cb * cb - 4.0 * ca * cc
            chit = cdisc >= 0
            csq = np.sqrt(np.where(chit, cdisc, 0.0))
            t0 = (-cb - csq) / (2.0 * ca)
            t1 = (-cb + csq) / (2.0 * ca)
            tc = np.where(t0 > _T_MIN, t0, t1)
            tc = np.where(chit & (tc > _T_MIN), tc, np.inf)
            # keep only cap hits beyond the segment range (evaluate hit
            # points with misses zeroed; they stay inf either way)
            t_safe = np.where(np.isfinite(tc), tc, 0.0)
            p = origins + t_safe[:, None] * dirs
            sc = ((p - pa) @ ab) / ab2
            tc = np.where((sc < 0.0) | (sc > 1.0), tc, np.inf)
            t = np.minimum(t, tc)
        return t

    def normal_at(self, points):
        pa = np.asarray(self.a, dtype=np.float64)
        ab = np.asarray(self.b, dtype=np.float64) - pa
        s = np.clip(((points - pa) @ ab) / float(ab @ ab), 0.0, 1.0)
        closest = pa + s[:, None] * ab
        d = points - closest
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def surface_distance(self, points):
        pa = np.asarray(self.a, dtype=np.float64)
        ab = np.asarray(self.b, dtype=np.float64) - pa
        s = np.clip(((points - pa) @ ab) / float(ab @ ab), 0.0, 1.0)
        closest = pa + s[:, None] * ab
        return np.linalg.norm(points - closest, axis=-1) - self.radius


@dataclass(frozen=True)
class Lighting:
    ambient: float = 1.0
    point_light: bool = False
    diffuse: float = 0.8
    falloff_mm: float = 50.0


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]
    seed: int = 0
    lighting: Lighting = Lighting()
    background: float = 0.0

    def __post_init__(self):
        if not self.primitives:
            raise DomainError("scene needs at least one primitive")


# ---------------------------------------------------------------------------
# Rendering


def _shade(scene: Scene, prim: Primitive, points: np.ndarray, dirs: np.ndarray, cam_pos: np.ndarray) -> np.ndarray:
    tex = _octave_noise(points, scene.seed + 7919 * prim.label + hash_color(prim.base_color), prim.texture_scale)
    mod = 1.0 + prim.texture_amplitude * (2.0 * tex - 1.0)
    albedo = np.clip(np.outer(mod, np.asarray(prim.base_color)), 0.0, 1.0)
    if not scene.lighting.point_light:
        return np.clip(albedo * scene.lighting.ambient, 0.0, 1.0)
    n = prim.normal_at(points)
    to_cam = cam_pos - points
    dist = np.linalg.norm(to_cam, axis=-1)
    lam = np.maximum(0.0, np.einsum("ij,ij->i", n, to_cam) / np.maximum(dist, 1e-12))
    falloff = (scene.lighting.falloff_mm**2) / np.maximum(dist**2, 1e-12)
    intensity = scene.lighting.ambient + scene.lighting.diffuse * lam * falloff
    return np.clip(albedo * intensity[:, None], 0.0, 1.0)


def hash_color(color) -> int:
    # stable small scene-level perturbation so same-label primitives with
    # different colors get distinct texture phases
    return int(sum(int(c * 255) * (31**k) for k, c in enumerate(color)))


def render_view(scene: Scene, pose: PoseSE3, K: Intrinsics):
    """Ray-cast one view; returns (ImageBuffer, DepthMap, LabelMap)."""
    gx, gy = pixel_ray_grid(K)
    h, w = gy.shape[0], gx.shape[1]
    dirs_cam = np.stack([gx.ravel(), gy.ravel(), np.ones(h * w)], axis=1)
    r = pose.rotation_matrix()
    cam_pos = pose.translation
    dirs = dirs_cam @ r.T
    origins = np.broadcast_to(cam_pos, dirs.shape)

    best_t = np.full(h * w, np.inf)
    best_prim = np.full(h * w, -1, dtype=np.int32)
    for idx, prim in enumerate(scene.primitives):
        t = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_prim[closer] = idx

    color = np.full((h * w, 3), scene.background, dtype=np.float64)
    depth = np.zeros(h * w)
    labels = np.zeros(h * w, dtype=np.uint8)
    for idx, prim in enumerate(scene.primitives):
        sel = best_prim == idx
        if not sel.any():
            continue
        pts = origins[sel] + best_t[sel, None] * dirs[sel]
        color[sel] = _shade(scene, prim, pts, dirs[sel], cam_pos)
        depth[sel] = best_t[sel]
        labels[sel] = prim.label

    return (
        ImageBuffer(color.reshape(h, w, 3)),
        DepthMap(depth.reshape(h, w)),
        LabelMap(labels.reshape(h, w)),
    )


def render(scene: Scene, pose: PoseSE3, rig: StereoRig):
    """Render a rectified stereo pair from a camera-to-world pose.

    Returns (left image, right image, left depth, left labels). The right
    camera sits a baseline along the left camera's +x axis.
    """
    left, depth, labels = render_view(scene, pose, rig.intrinsics)
    right_pose = compose(pose, PoseSE3(trl=(rig.baseline, 0.0, 0.0)))
    right, _, _ = render_view(scene, right_pose, rig.intrinsics)
    return left, right, depth, labels


# ---------------------------------------------------------------------------
# Trajectories


def orbit_trajectory(
    n: int,
    sweep_mm: float,
    seed: int = 0,
    fps: float = 25.0,
    rot_amplitude_deg: float = 1.5,
    wiggle_fraction: float = 0.05,
    speed_contrast: float = 25.0,
) -> Trajectory:
    """Translation-dominant sweep with small smooth rotations.

    The sweep speed varies sinusoidally by a factor of `speed_contrast`
    between the slowest and fastest frames, so per-frame motion magnitudes
    span the >20x range that stresses normalized pose losses. Timestamps
    step at 1/fps. Deterministic per seed.
    """
    if n < 2:
        raise DomainError("trajectory needs at least 2 frames")
    rng = np.random.default_rng(seed)
    eps = 1.0 / speed_contrast
    mid = (np.arange(1, n) - 0.5) / (n - 1)
    speeds = eps + (1.0 - eps) * np.sin(np.pi * mid) ** 2
    s = np.concatenate([[0.0], np.cumsum(speeds)])
    s /= s[-1]
    x = s * sweep_mm

    # wiggle and rotation ride on the arc position s, not the frame
    # index, so per-frame motion magnitudes scale with the sweep speed
    # and span the full speed_contrast ratio
    phases = rng.uniform(0, 2 * np.pi, size=5)
    freqs = rng.integers(1, 3, size=5)
    wiggle = wiggle_fraction * sweep_mm
    y = wiggle * np.sin(2 * np.pi * freqs[0] * s + phases[0])
    z = wiggle * np.sin(2 * np.pi * freqs[1] * s + phases[1])
    amp = math.radians(rot_amplitude_deg)
    rots = [amp * np.sin(2 * np.pi * freqs[2 + k] * s + phases[2 + k]) for k in range(3)]

    poses = tuple(
        PoseSE3(rot=(rots[0][i], rots[1][i], rots[2][i]), trl=(x[i], y[i], z[i]))
        for i in range(n)
    )
    timestamps = tuple(i / fps for i in range(n))
    return Trajectory(timestamps=timestamps, poses=poses)


def look_at_pose(position, target, up=(0.0, 1.0, 0.0)) -> PoseSE3:
    """Camera-to-world pose at `position` with +z toward `target`."""
    p = np.asarray(position, dtype=np.float64)
    zc = np.asarray(target, dtype=np.float64) - p
    nz = np.linalg.norm(zc)
    if nz < 1e-12:
        raise DomainError("look_at target coincides with position")
    zc = zc / nz
    upv = np.asarray(up, dtype=np.float64)
    xc = np.cross(upv, zc)
    if np.linalg.norm(xc) < 1e-9:
        xc = np.cross(np.array([1.0, 0.0, 0.0]), zc)
        if np.linalg.norm(xc) < 1e-9:
            xc = np.cross(np.array([0.0, 0.0, 1.0]), zc)
    xc = xc / np.linalg.norm(xc)
    yc = np.cross(zc, xc)
    m = np.eye(4)
    m[:3, 0] = xc
    m[:3, 1] = yc
    m[:3, 2] = zc
    m[:3, 3] = p
    return from_matrix(m)


def scan_trajectory(center, radius_mm: float, n: int, fps: float = 25.0) -> Trajectory:
    """All-around views of a target point on a spherical spiral.

    Full surface coverage for closed-surface fusion; a translational
    sweep cannot see the far side of an object, so watertight
    reconstructions use this instead.
    """
    if n < 2:
        raise DomainError("trajectory needs at least 2 frames")
    c = np.asarray(center, dtype=np.float64)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    poses = []
    for i in range(n):
        # fibonacci sphere point, slightly shrunk to avoid exact poles
        zfrac = 1.0 - 2.0 * (i + 0.5) / n
        zfrac *= 0.999
        rho = math.sqrt(max(0.0, 1.0 - zfrac * zfrac))
        ang = golden * i
        d = np.array([rho * math.cos(ang), rho * math.sin(ang), zfrac])
        poses.append(look_at_pose(c + radius_mm * d, c))
    timestamps = tuple(i / fps for i in range(n))
    return Trajectory(timestamps=timestamps, poses=tuple(poses))


# ---------------------------------------------------------------------------
# Canned scenes


def demo_scene(
    kind: str, seed: int = 0, texture_amplitude: float = 0.5, texture_scale: float = 0.12
) -> Scene:
    """Named scenes used by the CLI and the verification suite.

    kinds: 'plane' (fronto-parallel cartilage wall at 50 mm), 'sphere'
    (labeled sphere at the origin, cameras orbit it), 'two' (sphere on a
    backing plane, two labels), 'knee' (plane + sphere + capsule, three
    labels).

    The default texture scale (0.12 noise cells per mm, i.e. ~8 mm base
    features plus finer octaves) keeps photometric basins wide enough for
    pose optimization to converge from degree-scale perturbations; pass a
    larger scale for busier texture.
    """
    if kind == "plane":
        prims: tuple[Primitive, ...] = (
            Plane(
                label=1,
                base_color=(0.55, 0.75, 0.6),
                texture_amplitude=texture_amplitude,
                texture_scale=texture_scale,
                point=(0.0, 0.0, 50.0),
                normal=(0.0, 0.0, -1.0),
            ),
        )
    elif kind == "sphere":
        prims = (
            Sphere(
                label=1,
                base_color=(0.6, 0.75, 0.55),
                texture_amplitude=texture_amplitude,
                texture_scale=texture_scale,
                center=(0.0, 0.0, 0.0),
                radius=50.0,
            ),
        )
    elif kind == "two":
        prims = (
            Sphere(
                label=2,
                base_color=(0.8, 0.45, 0.4),
                texture_amplitude=texture_amplitude,
                texture_scale=texture_scale,
                center=(0.0, 0.0, 55.0),
                radius=12.0,
            ),
            Plane(
                label=1,
                base_color=(0.55, 0.75, 0.6),
                texture_amplitude=texture_amplitude,
                texture_scale=texture_scale,
                point=(0.0, 0.0, 70.0),
                normal=(0.0, 0.0, -1.0),
            ),
        )
    elif kind == "knee":
        prims = (
            Plane(
                label=1,
                base_color=(0.55, 0.75, 0.6),
                texture_amplitude=texture_amplitude,
                texture_scale=texture_scale,
                point=(0.0, 0.0, 70.0),
                normal=(0.0, 0.1, -1.0),
            ),
            Sphere(
                label=2,
                base_color=(0.8, 0.45, 0.4),
                texture_amplitude=texture_amplitude,
                texture_scale=texture_scale,
                center=(-12.0, 8.0, 58.0),
                radius=10.0,
            ),
            Capsule(
                label=3,
                base_color=(0.45, 0.55, 0.85),
                texture_amplitude=texture_amplitude,
                texture_scale=texture_scale,
                a=(8.0, -14.0, 60.0),
                b=(16.0, 12.0, 64.0),
                radius=4.0,
            ),
        )
    else:
        raise DomainError(f"unknown scene kind: {kind!r}")
    return Scene(primitives=prims, seed=seed)
