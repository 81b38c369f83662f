"""Shared fixtures: a standard endoscope rig and cached oracle renders.

The rendered frame pairs are session-scoped because ray casting at
256x256 is the slowest fixture; every consumer treats the buffers as
read-only (they are frozen numpy arrays).
"""

import numpy as np
import pytest

import scopemap as sm
from scopemap import oracle


@pytest.fixture(scope="session")
def rig():
    return sm.StereoRig(intrinsics=sm.intrinsics_from_fov(87.5, 256, 256), baseline=1.52)


@pytest.fixture(scope="session")
def small_rig():
    return sm.StereoRig(intrinsics=sm.intrinsics_from_fov(87.5, 96, 96), baseline=1.52)


@pytest.fixture(scope="session")
def textured_pair(rig):
    """Two posed stereo frames of the textured sphere-on-plane scene.

    Returns a dict with target/source images, target depth and labels,
    both camera-to-world poses, and the true target-to-source transform.
    """
    scene = oracle.demo_scene("two", seed=5, texture_amplitude=0.45)
    traj = oracle.orbit_trajectory(8, 4.0, seed=2)
    p_t, p_s = traj.poses[3], traj.poses[4]
    left_t, right_t, depth_t, labels_t = oracle.render(scene, p_t, rig)
    left_s, _, _, _ = oracle.render(scene, p_s, rig)
    return {
        "scene": scene,
        "target": left_t,
        "target_right": right_t,
        "depth": depth_t,
        "labels": labels_t,
        "source": left_s,
        "pose_target": p_t,
        "pose_source": p_s,
        "true_pose": sm.compose(sm.invert(p_s), p_t),
    }


@pytest.fixture(scope="session")
def small_textured_pair(small_rig):
    """96x96 variant of textured_pair for optimizer unit tests."""
    scene = oracle.demo_scene("two", seed=5, texture_amplitude=0.45)
    traj = oracle.orbit_trajectory(8, 3.0, seed=2)
    p_t, p_s = traj.poses[3], traj.poses[4]
    left_t, _, depth_t, _ = oracle.render(scene, p_t, small_rig)
    left_s, _, _, _ = oracle.render(scene, p_s, small_rig)
    return {
        "target": left_t,
        "depth": depth_t,
        "source": left_s,
        "true_pose": sm.compose(sm.invert(p_s), p_t),
    }


def analytic_sphere_volume(radius=12.0, voxel=1.0, trunc=4.0, n=32, label=2):
    """Fully observed sphere TSDF built directly from the distance field."""
    from scopemap.tsdf import TsdfVolume

    half = n * voxel / 2.0
    vol = TsdfVolume(origin=(-half, -half, -half), voxel_size=voxel, dims=(n, n, n), truncation=trunc)
    xs, ys, zs = vol.voxel_centers_axes()
    x, y, z = np.meshgrid(xs, ys, zs, indexing="ij")
    dist = np.sqrt(x * x + y * y + z * z) - radius
    vol.sdf = np.clip(dist / trunc, -1.0, 1.0).astype(np.float32)
    vol.weight = np.ones(vol.dims, dtype=np.float32)
    vol.label_counts[..., label] = 1
    return vol


def analytic_plane_volume(z0=16.0, voxel=1.0, trunc=4.0, n=32):
    """Fully observed plane TSDF (surface at z = z0, positive below)."""
    from scopemap.tsdf import TsdfVolume

    vol = TsdfVolume(origin=(0, 0, 0), voxel_size=voxel, dims=(n, n, n), truncation=trunc)
    _, _, zs = vol.voxel_centers_axes()
    dist = np.broadcast_to(zs[None, None, :] - z0, vol.dims)
    vol.sdf = np.clip(dist / trunc, -1.0, 1.0).astype(np.float32)
    vol.weight = np.ones(vol.dims, dtype=np.float32)
    return vol
