"""Inverse-warping view synthesis.

`synthesize_target` rebuilds the target view by sampling the source image
at the locations where the target's backprojected points land in the
source camera. The pose argument is the target-to-source POINT transform:
X_src = R @ X_tgt + t.

Sign convention, pinned by the rectified-disparity test: for a rectified
rig with the right camera a baseline b to the LEFT camera's +x, warping
target=left from source=right uses stereo_pose(rig) = translation
(-b, 0, 0), which samples the source at u - fx*b/z.
"""

from __future__ import annotations

import numpy as np

from .camera import Intrinsics, StereoRig, pixel_ray_grid
from .errors import DimensionMismatchError
from .pose import PoseSE3
from .raster import DepthMap, ImageBuffer, MaskBuffer, bilinear_sample_many


def synthesize_target(
    source: ImageBuffer,
    target_depth: DepthMap,
    pose_t_to_s: PoseSE3,
    K: Intrinsics,
    clamp: bool = False,
) -> tuple[ImageBuffer, MaskBuffer]:
    """Reconstruct the target view from `source`, given target depth.

    Per target pixel with valid depth d: backproject, transform by
    `pose_t_to_s`, project into the source; pixels that land in bounds
    with positive depth are bilinearly sampled (mask 1), everything else
    is black with mask 0. With `clamp`, out-of-bounds samples clamp to the
    border instead of invalidating (pixels behind the source camera stay
    invalid).
    """
    if (source.width, source.height) != (target_depth.width, target_depth.height):
        raise DimensionMismatchError(
            f"source {source.width}x{source.height} vs depth "
            f"{target_depth.width}x{target_depth.height}"
        )
    if (K.width, K.height) != (target_depth.width, target_depth.height):
        raise DimensionMismatchError(
            f"intrinsics {K.width}x{K.height} vs depth "
            f"{target_depth.width}x{target_depth.height}"
        )

    d = target_depth.data
    valid_depth = d > 0
    gx, gy = pixel_ray_grid(K)
    x = gx * d
    y = gy * d

    r = pose_t_to_s.rotation_matrix()
    t = pose_t_to_s.translation
    xs = r[0, 0] * x + r[0, 1] * y + r[0, 2] * d + t[0]
    ys = r[1, 0] * x + r[1, 1] * y + r[1, 2] * d + t[1]
    zs = r[2, 0] * x + r[2, 1] * y + r[2, 2] * d + t[2]

    in_front = zs > 0
    safe_z = np.where(in_front, zs, 1.0)
    us = K.fx * xs / safe_z + K.cx
    vs = K.fy * ys / safe_z + K.cy

    colors, in_bounds = bilinear_sample_many(source, us, vs, clamp=clamp)
    mask = valid_depth & in_front & in_bounds
    colors[~mask] = 0.0
    return ImageBuffer(colors), MaskBuffer(mask)


def stereo_pose(rig: StereoRig) -> PoseSE3:
    """Left-to-right point transform of a rectified rig.

    Pure translation (-baseline, 0, 0), zero rotation: use as the warp
    pose when synthesizing the left view from the right image.
    """
    return PoseSE3(trl=(-rig.baseline, 0.0, 0.0))
