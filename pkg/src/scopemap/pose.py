"""6-DoF rigid transforms, trajectories, and absolute trajectory error.

Rotation parameterization: intrinsic X-Y-Z Euler angles (roll-pitch-yaw),
rot = [alpha, beta, gamma] in radians, composed as

    R = Rz(gamma) @ Ry(beta) @ Rx(alpha)

Translation trl = [x, y, z] in mm. A pose applied to a point p gives
R @ p + trl. Trajectories store camera-to-world poses.

Near the gimbal singularity (|beta| ~ pi/2) the Euler chart degenerates;
`from_matrix` resolves it by fixing alpha = 0 and folding the remaining
rotation into gamma.

Trajectory text format, one frame per line, '#' lines ignored:

    timestamp x y z alpha beta gamma        (seconds, mm, radians)

`load_trajectory` also accepts the common 8-field quaternion layout
(timestamp tx ty tz qx qy qz qw), detected by column count.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, DomainError, FormatError, MissingInputError


def _canonical_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform as Euler rotation + translation."""

    rot: tuple[float, float, float] = (0.0, 0.0, 0.0)
    trl: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        rot = tuple(_canonical_angle(float(a)) for a in self.rot)
        trl = tuple(float(t) for t in self.trl)
        if not all(math.isfinite(v) for v in rot + trl):
            raise DomainError(f"pose components must be finite, got rot={rot}, trl={trl}")
        object.__setattr__(self, "rot", rot)
        object.__setattr__(self, "trl", trl)

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3()

    def rotation_matrix(self) -> np.ndarray:
        ca, sa = math.cos(self.rot[0]), math.sin(self.rot[0])
        cb, sb = math.cos(self.rot[1]), math.sin(self.rot[1])
        cg, sg = math.cos(self.rot[2]), math.sin(self.rot[2])
        # Rz(gamma) @ Ry(beta) @ Rx(alpha), written out
        return np.array(
            [
                [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
                [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
                [-sb, cb * sa, cb * ca],
            ],
            dtype=np.float64,
        )

    def to_matrix(self) -> np.ndarray:
        """4x4 homogeneous transform."""
        m = np.eye(4, dtype=np.float64)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.trl
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) or (3,) array of points: R @ p + trl."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + np.asarray(self.trl)

    @property
    def translation(self) -> np.ndarray:
        return np.array(self.trl, dtype=np.float64)

    @property
    def angles(self) -> np.ndarray:
        return np.array(self.rot, dtype=np.float64)


def from_matrix(m: np.ndarray) -> PoseSE3:
    """Recover Euler angles + translation from a 4x4 (or 3x3) rigid transform."""
    m = np.asarray(m, dtype=np.float64)
    r = m[:3, :3]
    sb = -r[2, 0]
    sb = min(1.0, max(-1.0, sb))
    beta = math.asin(sb)
    if abs(r[2, 0]) > 1.0 - 1e-12:
        # Gimbal lock: alpha and gamma are coupled; pick alpha = 0.
        alpha = 0.0
        gamma = math.atan2(-r[0, 1], r[1, 1])
    else:
        alpha = math.atan2(r[2, 1], r[2, 2])
        gamma = math.atan2(r[1, 0], r[0, 0])
    trl = (m[0, 3], m[1, 3], m[2, 3]) if m.shape[0] >= 4 else (0.0, 0.0, 0.0)
    return PoseSE3(rot=(alpha, beta, gamma), trl=trl)


def from_quaternion(qx: float, qy: float, qz: float, qw: float, trl=(0.0, 0.0, 0.0)) -> PoseSE3:
    """Convert a unit quaternion (x, y, z, w) to the Euler parameterization."""
    n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if n == 0:
        raise DomainError("zero quaternion")
    qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
    r = np.array(
        [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ],
        dtype=np.float64,
    )
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = trl
    return from_matrix(m)


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Pose whose matrix is to_matrix(a) @ to_matrix(b)."""
    ra = a.rotation_matrix()
    rb = b.rotation_matrix()
    m = np.eye(4)
    m[:3, :3] = ra @ rb
    m[:3, 3] = ra @ np.asarray(b.trl) + np.asarray(a.trl)
    return from_matrix(m)


def invert(p: PoseSE3) -> PoseSE3:
    """Pose whose matrix is to_matrix(p)^-1."""
    r = p.rotation_matrix()
    m = np.eye(4)
    m[:3, :3] = r.T
    m[:3, 3] = -(r.T @ np.asarray(p.trl))
    return from_matrix(m)


def relative(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Motion from frame a to frame b: a^-1 . b."""
    return compose(invert(a), b)


def rotation_geodesic_angle(a: PoseSE3, b: PoseSE3) -> float:
    """Geodesic angle in radians between the rotations of two poses."""
    r = a.rotation_matrix().T @ b.rotation_matrix()
    c = (np.trace(r) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


@dataclass(frozen=True)
class Trajectory:
    """Timestamped sequence of camera-to-world poses."""

    timestamps: tuple[float, ...]
    poses: tuple[PoseSE3, ...]

    def __post_init__(self):
        if len(self.timestamps) != len(self.poses):
            raise DimensionMismatchError(
                f"{len(self.timestamps)} timestamps vs {len(self.poses)} poses"
            )
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise DomainError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", tuple(float(t) for t in self.timestamps))
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        """(N, 3) array of camera positions."""
        return np.array([p.trl for p in self.poses], dtype=np.float64)


@dataclass(frozen=True)
class AteReport:
    """Absolute trajectory error summary (all distances in mm)."""

    rmse_translation: float
    mean: float
    median: float
    max: float
    per_frame_errors: tuple[float, ...]
    rot_errors_rad: tuple[float, ...]
    aligned: bool

    def to_dict(self) -> dict:
        return {
            "rmse_translation": self.rmse_translation,
            "mean": self.mean,
            "median": self.median,
            "max": self.max,
            "aligned": self.aligned,
            "per_frame_errors": list(self.per_frame_errors),
            "rot_errors_rad": list(self.rot_errors_rad),
        }


def _rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form least-squares R, t minimizing ||R src + t - dst||^2.

    Rotation + translation only, no scale (scale is fixed by the stereo
    baseline in this pipeline).
    """
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    h = (dst - dst_mean).T @ (src - src_mean)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    t = dst_mean - r @ src_mean
    return r, t


def ate(gt: Trajectory, est: Trajectory, align: bool = False) -> AteReport:
    """Absolute trajectory error between ground truth and estimate.

    Per-frame error is the Euclidean distance between positions; with
    `align` the estimate is first rigidly aligned (closed-form, no scale)
    to the ground truth. Rotational geodesic errors are reported per frame
    alongside, with the alignment rotation applied to the estimate when
    aligning.
    """
    if len(gt) != len(est):
        raise DimensionMismatchError(f"trajectory lengths differ: {len(gt)} vs {len(est)}")
    if len(gt) == 0:
        raise DomainError("cannot evaluate empty trajectories")
    ts_gt = np.asarray(gt.timestamps)
    ts_est = np.asarray(est.timestamps)
    if np.max(np.abs(ts_gt - ts_est)) > 1e-6:
        raise DimensionMismatchError("trajectory timestamps do not match within 1e-6 s")

    p_gt = gt.positions()
    p_est = est.positions()
    if align:
        r, t = _rigid_align(p_est, p_gt)
        p_est = p_est @ r.T + t
        align_rot = from_matrix(np.block([[r, np.zeros((3, 1))], [np.zeros((1, 3)), 1.0]]))
        est_rots = [compose(align_rot, PoseSE3(rot=p.rot)) for p in est.poses]
    else:
        est_rots = [PoseSE3(rot=p.rot) for p in est.poses]

    errs = np.linalg.norm(p_gt - p_est, axis=1)
    rot_errs = [
        rotation_geodesic_angle(PoseSE3(rot=g.rot), e) for g, e in zip(gt.poses, est_rots)
    ]
    return AteReport(
        rmse_translation=float(np.sqrt(np.mean(errs**2))),
        mean=float(np.mean(errs)),
        median=float(np.median(errs)),
        max=float(np.max(errs)),
        per_frame_errors=tuple(float(e) for e in errs),
        rot_errors_rad=tuple(float(e) for e in rot_errs),
        aligned=align,
    )


def save_trajectory(traj: Trajectory, path: str) -> None:
    """Write the 7-field text format. Floats use shortest round-trip repr,
    so save/load is bit-exact."""
    with open(path, "w") as f:
        f.write("# timestamp x y z alpha beta gamma\n")
        for ts, p in zip(traj.timestamps, traj.poses):
            fields = [ts, *p.trl, *p.rot]
            f.write(" ".join(repr(float(v)) for v in fields) + "\n")


def load_trajectory(path: str) -> Trajectory:
    """Read a trajectory file; 7 fields = Euler format, 8 = quaternion."""
    if not os.path.exists(path):
        raise MissingInputError(f"trajectory file not found: {path}")
    timestamps: list[float] = []
    poses: list[PoseSE3] = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                vals = [float(x) for x in parts]
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: non-numeric field") from e
            if len(vals) == 7:
                ts, x, y, z, a, b, g = vals
                poses.append(PoseSE3(rot=(a, b, g), trl=(x, y, z)))
            elif len(vals) == 8:
                ts, x, y, z, qx, qy, qz, qw = vals
                poses.append(from_quaternion(qx, qy, qz, qw, trl=(x, y, z)))
            else:
                raise FormatError(
                    f"{path}:{lineno}: expected 7 or 8 fields, got {len(vals)}"
                )
            timestamps.append(ts)
    return Trajectory(timestamps=tuple(timestamps), poses=tuple(poses))
