"""Endoscope-scale 3D semantic mapping toolkit.

Pieces: pinhole/stereo camera model, SE(3) poses and ATE evaluation,
raster buffers with bilinear sampling, inverse-warping view synthesis,
the self-supervised + pose-supervised objective, finite-difference pose
recovery, truncated signed-distance fusion with optional TV-L1
refinement, marching-cubes meshing with anatomical coloring, and a
synthetic ray-casting oracle for end-to-end verification.
"""

from .camera import Intrinsics, StereoRig, backproject, intrinsics_from_fov, project
from .errors import (
    DimensionMismatchError,
    DomainError,
    FormatError,
    MissingInputError,
    ScopemapError,
)
from .losses import (
    LossConfig,
    automask,
    min_reprojection,
    photometric,
    pose_loss,
    self_supervised_loss,
    smoothness,
    ssim,
    total_loss,
)
from .mesh import Mesh, export_ply, load_ply, marching_cubes, palette
from .optimizer import OptimizerConfig, RecoveryResult, recover_pose
from .oracle import Capsule, Plane, Scene, Sphere, demo_scene, orbit_trajectory, render, scan_trajectory
from .pose import (
    AteReport,
    PoseSE3,
    Trajectory,
    ate,
    compose,
    invert,
    load_trajectory,
    relative,
    save_trajectory,
)
from .raster import (
    DepthMap,
    ImageBuffer,
    LabelMap,
    MaskBuffer,
    bilinear_sample,
    gradients,
)
from .tsdf import FusionChunk, TsdfVolume, VolumeParams, fuse_chunk, integrate, query_sdf, regularize_tv_l1
from .warp import stereo_pose, synthesize_target

__version__ = "0.1.0"
