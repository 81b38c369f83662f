"""Self-supervised view-synthesis objective and supervised pose objective.

The full training loss is

    total = [min-reprojection photometric, auto-masked, mean over
             surviving pixels] + lambda_smoo * edge-aware smoothness
          + pose loss (when ground truth is available)

Photometric dissimilarity per pixel mixes SSIM and L1:

    phot(a, b) = alpha * (1 - SSIM(a, b)) / 2 + (1 - alpha) * |a - b|

with alpha = 0.85 by default. SSIM uses box-window means/variances over an
odd window (default 3x3) with mirrored borders (edge pixel not repeated),
so constant images score exactly 1 everywhere.

Reductions ignore invalid pixels (warp mask 0 or auto-mask 0) rather than
averaging zeros in; this changes scalar values versus whole-image means
and is relied upon by the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .camera import Intrinsics
from .errors import DimensionMismatchError, DomainError
from .pose import PoseSE3
from .raster import DepthMap, ImageBuffer, MaskBuffer
from .warp import synthesize_target


@dataclass(frozen=True)
class LossConfig:
    """Objective weights and guards.

    trl_weights down-weight the x/y translation axes; applied to both the
    normalized and the raw translation terms of the pose loss.
    norm_epsilon guards the normalized pose terms: motions with magnitude
    below it contribute no normalized term (the normalization is undefined
    at zero motion).
    """

    alpha: float = 0.85
    lambda_smoo: float = 1e-3
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    ssim_window: int = 3
    trl_weights: tuple[float, float, float] = (0.5, 0.5, 1.0)
    norm_epsilon: float = 1e-8
    clamp_sampling: bool = False
    smoothness_on_disparity: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise DomainError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lambda_smoo < 0:
            raise DomainError(f"lambda_smoo must be >= 0, got {self.lambda_smoo}")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise DomainError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        if any(w <= 0 for w in self.trl_weights):
            raise DomainError(f"trl_weights must be positive, got {self.trl_weights}")


def _check_same_size(a, b, what="images"):
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatchError(
            f"{what} differ in size: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def _box_mean(a: np.ndarray, window: int) -> np.ndarray:
    return uniform_filter(a, size=(window, window, 1), mode="mirror")


def ssim(a: ImageBuffer, b: ImageBuffer, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Per-pixel SSIM raster (H, W), averaged over channels.

    Values lie in [-1, 1]; identical images score exactly 1.
    """
    _check_same_size(a, b)
    if a.channels != b.channels:
        raise DimensionMismatchError(f"channel mismatch: {a.channels} vs {b.channels}")
    w = cfg.ssim_window
    x, y = a.data, b.data
    mu_x = _box_mean(x, w)
    mu_y = _box_mean(y, w)
    sigma_x = _box_mean(x * x, w) - mu_x * mu_x
    sigma_y = _box_mean(y * y, w) - mu_y * mu_y
    sigma_xy = _box_mean(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + cfg.ssim_c1) * (2 * sigma_xy + cfg.ssim_c2)
    den = (mu_x * mu_x + mu_y * mu_y + cfg.ssim_c1) * (sigma_x + sigma_y + cfg.ssim_c2)
    return np.clip((num / den).mean(axis=2), -1.0, 1.0)


def photometric(
    target: ImageBuffer, synth: ImageBuffer, cfg: LossConfig = LossConfig()
) -> np.ndarray:
    """Per-pixel photometric reprojection error raster (H, W), >= 0."""
    _check_same_size(target, synth)
    if target.channels != synth.channels:
        raise DimensionMismatchError(
            f"channel mismatch: {target.channels} vs {synth.channels}"
        )
    l1 = np.abs(target.data - synth.data).mean(axis=2)
    if cfg.alpha == 0.0:
        return l1
    s = ssim(target, synth, cfg)
    return cfg.alpha * (1.0 - s) / 2.0 + (1.0 - cfg.alpha) * l1


def min_reprojection(
    target: ImageBuffer,
    synths: list[tuple[ImageBuffer, MaskBuffer]],
    cfg: LossConfig = LossConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel minimum photometric error across synthesized sources.

    Pixels valid in no source get loss 0 and argmin -1; callers exclude
    them from reductions. Returns (loss raster, argmin raster).
    """
    if not synths:
        raise DomainError("min_reprojection needs at least one synthesized source")
    stack = np.full((len(synths), target.height, target.width), np.inf)
    for k, (img, mask) in enumerate(synths):
        _check_same_size(target, img)
        _check_same_size(target, mask, what="masks")
        err = photometric(target, img, cfg)
        stack[k] = np.where(mask.data, err, np.inf)
    argmin = np.argmin(stack, axis=0).astype(np.int32)
    loss = np.min(stack, axis=0)
    none_valid = ~np.isfinite(loss)
    loss[none_valid] = 0.0
    argmin[none_valid] = -1
    return loss, argmin


def raw_min_photometric(
    target: ImageBuffer, raw_sources: list[ImageBuffer], cfg: LossConfig = LossConfig()
) -> np.ndarray:
    """Per-pixel minimum photometric error against the UNWARPED sources.

    This is the error floor that auto-masking compares syntheses against.
    It depends only on the input frames, never on depth or pose, so
    iterative callers can compute it once.
    """
    if not raw_sources:
        raise DomainError("need at least one raw source")
    raw = np.empty((len(raw_sources), target.height, target.width))
    for k, img in enumerate(raw_sources):
        _check_same_size(target, img)
        raw[k] = photometric(target, img, cfg)
    return raw.min(axis=0)


def automask(
    target: ImageBuffer,
    raw_sources: list[ImageBuffer],
    synths: list[tuple[ImageBuffer, MaskBuffer]],
    cfg: LossConfig = LossConfig(),
) -> MaskBuffer:
    """Binary mask rejecting pixels whose appearance does not change.

    A pixel survives (mask 1) only when the best *unwarped* source error
    strictly exceeds the best *synthesized* source error, i.e. warping
    actually explained the pixel better than doing nothing. Static scenes
    and content moving with the camera fail the strict inequality and are
    rejected. Pixels with no valid synthesis are rejected too.
    """
    if not raw_sources or not synths:
        raise DomainError("automask needs at least one raw source and one synthesis")
    min_raw = raw_min_photometric(target, raw_sources, cfg)
    min_synth, argmin = min_reprojection(target, synths, cfg)
    any_valid = argmin >= 0
    return MaskBuffer((min_raw > min_synth) & any_valid)


def smoothness(depth: DepthMap, guide: ImageBuffer, cfg: LossConfig = LossConfig()) -> float:
    """Edge-aware depth smoothness scalar.

    Mean over pixels of |dx D| * exp(-|dx I|) + |dy D| * exp(-|dy I|),
    forward differences, image gradient magnitude averaged over channels.
    Each directional term is averaged only where the forward difference is
    defined (not the last column/row) and both depth samples are valid.
    With `smoothness_on_disparity`, D is replaced by mean-normalized
    inverse depth over the valid pixels.
    """
    _check_same_size(depth, guide, what="depth/guide")
    d = depth.data
    valid = d > 0
    if cfg.smoothness_on_disparity:
        disp = np.zeros_like(d)
        disp[valid] = 1.0 / d[valid]
        m = disp[valid].mean() if valid.any() else 1.0
        d = disp / m if m > 0 else disp
    g = guide.data.mean(axis=2)

    dxd = d[:, 1:] - d[:, :-1]
    dyd = d[1:, :] - d[:-1, :]
    dxg = g[:, 1:] - g[:, :-1]
    dyg = g[1:, :] - g[:-1, :]

    vx = valid[:, 1:] & valid[:, :-1]
    vy = valid[1:, :] & valid[:-1, :]

    tx = np.abs(dxd) * np.exp(-np.abs(dxg))
    ty = np.abs(dyd) * np.exp(-np.abs(dyg))
    out = 0.0
    if vx.any():
        out += float(tx[vx].mean())
    if vy.any():
        out += float(ty[vy].mean())
    return out


def self_supervised_loss(
    target: ImageBuffer,
    raw_sources: list[ImageBuffer],
    depth: DepthMap,
    poses: list[PoseSE3],
    K: Intrinsics,
    cfg: LossConfig = LossConfig(),
    raw_min: np.ndarray | None = None,
    smoothness_value: float | None = None,
) -> tuple[float, dict]:
    """View-synthesis objective: masked min-reprojection + smoothness.

    `poses` holds one target-to-source transform per raw source. Returns
    (scalar, diagnostics); diagnostics expose the component scalars, the
    masks, and the per-source syntheses for inspection.

    `raw_min` and `smoothness_value` are performance knobs for iterative
    callers: both depend only on the fixed frames/depth, never on the
    poses, so a pose optimizer may precompute them once with
    `raw_min_photometric` / `smoothness` and pass them in.
    """
    if len(raw_sources) != len(poses):
        raise DimensionMismatchError(
            f"{len(raw_sources)} sources vs {len(poses)} poses"
        )
    if not raw_sources:
        raise DomainError("need at least one source frame")
    synths = [
        synthesize_target(src, depth, pose, K, clamp=cfg.clamp_sampling)
        for src, pose in zip(raw_sources, poses)
    ]
    min_err, argmin = min_reprojection(target, synths, cfg)
    if raw_min is None:
        raw_min = raw_min_photometric(target, raw_sources, cfg)
    am = MaskBuffer((raw_min > min_err) & (argmin >= 0))
    surviving = am.data & (argmin >= 0)
    phot = float(min_err[surviving].mean()) if surviving.any() else 0.0
    smoo = smoothness(depth, target, cfg) if smoothness_value is None else smoothness_value
    loss = phot + cfg.lambda_smoo * smoo
    diagnostics = {
        "photometric": phot,
        "smoothness": smoo,
        "smoothness_weighted": cfg.lambda_smoo * smoo,
        "surviving_fraction": float(surviving.mean()),
        "automask": am,
        "min_reprojection": min_err,
        "argmin_source": argmin,
        "syntheses": synths,
    }
    return loss, diagnostics


def _l1(v: np.ndarray) -> float:
    return float(np.abs(v).sum())


def pose_loss(
    gt: PoseSE3, pred: PoseSE3, cfg: LossConfig = LossConfig()
) -> tuple[float, dict]:
    """Supervised pose objective over normalized + raw motion components.

    L = L_trl + L_ang, each the sum of an L1 term on unit-normalized
    vectors and an L1 term on the raw vectors. The per-axis trl_weights
    apply to both translation terms. Normalized terms are skipped when
    either vector's magnitude falls below norm_epsilon.
    """
    w = np.asarray(cfg.trl_weights, dtype=np.float64)

    t_gt, t_pred = gt.translation, pred.translation
    a_gt, a_pred = gt.angles, pred.angles

    nt_gt, nt_pred = np.linalg.norm(t_gt), np.linalg.norm(t_pred)
    na_gt, na_pred = np.linalg.norm(a_gt), np.linalg.norm(a_pred)

    if nt_gt > cfg.norm_epsilon and nt_pred > cfg.norm_epsilon:
        trl_norm = _l1(w * (t_gt / nt_gt - t_pred / nt_pred))
    else:
        trl_norm = 0.0
    trl_raw = _l1(w * (t_gt - t_pred))

    if na_gt > cfg.norm_epsilon and na_pred > cfg.norm_epsilon:
        ang_norm = _l1(a_gt / na_gt - a_pred / na_pred)
    else:
        ang_norm = 0.0
    ang_raw = _l1(a_gt - a_pred)

    breakdown = {
        "trl_norm": trl_norm,
        "trl_raw": trl_raw,
        "ang_norm": ang_norm,
        "ang_raw": ang_raw,
    }
    return trl_norm + trl_raw + ang_norm + ang_raw, breakdown


def total_loss(
    target: ImageBuffer,
    raw_sources: list[ImageBuffer],
    depth: DepthMap,
    poses: list[PoseSE3],
    K: Intrinsics,
    cfg: LossConfig = LossConfig(),
    pose_gt: PoseSE3 | None = None,
    pose_pred: PoseSE3 | None = None,
) -> tuple[float, dict]:
    """Training objective: self-supervised + (optional) pose supervision.

    When `pose_gt` is None the pose term is disabled and the result equals
    the self-supervised loss. `pose_pred` defaults to poses[0], the motion
    being estimated.
    """
    self_loss, diagnostics = self_supervised_loss(target, raw_sources, depth, poses, K, cfg)
    diagnostics["self_supervised"] = self_loss
    if pose_gt is None:
        diagnostics["pose"] = 0.0
        return self_loss, diagnostics
    if pose_pred is None:
        pose_pred = poses[0]
    p_loss, breakdown = pose_loss(pose_gt, pose_pred, cfg)
    diagnostics["pose"] = p_loss
    diagnostics["pose_breakdown"] = breakdown
    return self_loss + p_loss, diagnostics
