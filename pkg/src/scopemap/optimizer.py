"""Direct pose recovery by minimizing the view-synthesis objective.

Stands in for learned pose regression at desk scale: the 6 pose
parameters (3 Euler angles, 3 translations) are optimized by gradient
descent with central finite differences and Armijo backtracking. No
autodiff; the loss functions are treated as black boxes, which doubles as
a smoothness check on the objective itself.

Internally the parameters are preconditioned so that a unit step in any
coordinate moves the image by roughly one pixel (rotations scale by 1/fx,
translations by mean_depth/fx); raw gradient descent on mixed rad/mm
coordinates is badly conditioned otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Intrinsics
from .errors import DomainError
from .losses import LossConfig, raw_min_photometric, self_supervised_loss, smoothness
from .pose import PoseSE3
from .raster import DepthMap, ImageBuffer


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 200
    fd_step_rot: float = 1e-4  # radians
    fd_step_trl: float = 1e-3  # mm
    armijo_c: float = 1e-4
    init_step: float = 1.0
    tol_loss: float = 1e-10

    def __post_init__(self):
        for name in ("max_iters", "fd_step_rot", "fd_step_trl", "armijo_c", "init_step", "tol_loss"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")


@dataclass(frozen=True)
class RecoveryResult:
    pose: PoseSE3
    loss: float
    converged: bool
    reason: str
    iterations: int
    trace: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {
            "pose": {"rot": list(self.pose.rot), "trl": list(self.pose.trl)},
            "loss": self.loss,
            "converged": self.converged,
            "reason": self.reason,
            "iterations": self.iterations,
            "trace": list(self.trace),
        }


def _pose_from_params(theta: np.ndarray) -> PoseSE3:
    return PoseSE3(rot=tuple(theta[:3]), trl=tuple(theta[3:]))


_PROBE_SCALES_PX = (4.0, 1.0, 0.25)


def _compass_probe(loss_at, theta, loss, scale):
    """Axis-aligned pattern search, coarsest scale first.

    Rescues the descent when the local finite-difference direction stalls
    on a kink or shallow bump of the piecewise-smooth objective; returns
    the first strictly improving probe.
    """
    for s in _PROBE_SCALES_PX:
        for k in range(6):
            for sign in (1.0, -1.0):
                cand = theta.copy()
                cand[k] += sign * s * scale[k]
                cl = loss_at(cand)
                if cl < loss:
                    return cand, cl, s
    return theta, loss, 0.0


def recover_pose(
    target: ImageBuffer,
    sources: list[ImageBuffer],
    depth: DepthMap,
    K: Intrinsics,
    init: PoseSE3,
    cfg: LossConfig = LossConfig(),
    opt: OptimizerConfig = OptimizerConfig(),
    fixed_sources: list[tuple[ImageBuffer, PoseSE3]] | None = None,
) -> RecoveryResult:
    """Minimize the self-supervised loss over one target-to-source pose.

    The recovered pose applies to every image in `sources` (pass one
    moving source in the usual case). `fixed_sources` adds extra views
    with known poses to the photometric term without optimizing them.
    Beware that a fixed source whose pose is exact (e.g. the stereo mate)
    dominates the per-pixel minimum once the optimized pose is off, which
    hides the moving source's error and flattens the gradient; recover
    against the moving source alone unless you know the fixed views are
    worse.

    Never raises on failure to converge: the result carries the best pose
    seen, a converged flag, and a reason string ("tol_loss", "stationary",
    "flat", "max_iters"). The loss trace is monotone non-increasing by
    construction (only improving steps are accepted). Raises DomainError
    when fewer than 10% of depth pixels are valid.
    """
    valid_frac = float(depth.valid_mask().mean())
    if valid_frac == 0.0:
        raise DomainError("depth map has no valid pixels")
    if valid_frac < 0.10:
        raise DomainError(f"only {valid_frac:.1%} of depth pixels valid; need >= 10%")
    if not all(np.isfinite(v) for v in init.rot + init.trl):
        raise DomainError("init pose must be finite")

    fixed_sources = fixed_sources or []
    all_images = list(sources) + [img for img, _ in fixed_sources]
    fixed_poses = [p for _, p in fixed_sources]

    # Pose-independent pieces of the objective, computed once.
    raw_min = raw_min_photometric(target, all_images, cfg)
    smoo = smoothness(depth, target, cfg)

    def loss_at(theta: np.ndarray) -> float:
        p = _pose_from_params(theta)
        poses = [p] * len(sources) + fixed_poses
        value, _ = self_supervised_loss(
            target, all_images, depth, poses, K, cfg, raw_min=raw_min, smoothness_value=smoo
        )
        return value

    # Preconditioning scales: one unit in scaled space ~ one pixel of
    # image motion.
    mean_depth = depth.mean_valid_depth()
    scale = np.array([1.0 / K.fx] * 3 + [mean_depth / K.fx] * 3)

    theta = np.array(list(init.rot) + list(init.trl), dtype=np.float64)
    fd = np.array([opt.fd_step_rot] * 3 + [opt.fd_step_trl] * 3)

    loss = loss_at(theta)
    trace = [{"iteration": 0, "loss": loss, "step": 0.0, "grad_norm": 0.0}]
    reason = "max_iters"
    converged = False
    step = opt.init_step
    small_drops = 0

    it = 0
    for it in range(1, opt.max_iters + 1):
        grad = np.zeros(6)
        for k in range(6):
            e = np.zeros(6)
            e[k] = fd[k]
            grad[k] = (loss_at(theta + e) - loss_at(theta - e)) / (2.0 * fd[k])
        grad_scaled = grad * scale
        gnorm = float(np.linalg.norm(grad_scaled))
        if gnorm < 1e-14:
            reason = "flat" if loss > opt.tol_loss else "stationary"
            converged = loss <= opt.tol_loss
            break

        # Backtracking line search along the normalized preconditioned
        # direction; t is then measured in pixels of image motion, which
        # keeps progress scale-free across flat and steep regions.
        direction = -grad_scaled / gnorm
        t = max(step, 1e-10)
        accepted = False
        while t >= 1e-10:
            cand = theta + t * direction * scale
            cand_loss = loss_at(cand)
            if cand_loss <= loss - opt.armijo_c * t * gnorm:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            theta, loss, probe_step = _compass_probe(loss_at, theta, loss, scale)
            if probe_step == 0.0:
                reason = "stationary"
                converged = True
                break
            step = probe_step
            trace.append(
                {"iteration": it, "loss": loss, "step": probe_step, "grad_norm": gnorm}
            )
            small_drops = 0
            continue

        drop = loss - cand_loss
        theta, loss, step = cand, cand_loss, t * 2.0
        trace.append({"iteration": it, "loss": loss, "step": t, "grad_norm": gnorm})
        # Declare convergence only after the improvement stays negligible
        # for a few iterations; a single cautious step must not stop us.
        small_drops = small_drops + 1 if drop <= opt.tol_loss * max(1.0, abs(loss)) else 0
        if small_drops >= 3:
            reason = "tol_loss"
            converged = True
            break

    return RecoveryResult(
        pose=_pose_from_params(theta),
        loss=loss,
        converged=converged,
        reason=reason,
        iterations=it,
        trace=tuple(trace),
    )
