"""View synthesis: identity warp, rectified disparity, oracle renders.

The disparity test pins the sign convention of the whole pipeline: under
a pure (b, 0, 0) point transform, a fronto-parallel plane at depth d must
be sampled at u + fx*b/d.
"""

import numpy as np
import pytest

import scopemap as sm
from scopemap import oracle
from scopemap.errors import DimensionMismatchError
from scopemap.raster import DepthMap, ImageBuffer, bilinear_sample_many
from scopemap.warp import stereo_pose, synthesize_target


def checker_image(w, h, seed=0):
    rng = np.random.default_rng(seed)
    return ImageBuffer(rng.uniform(0, 1, (h, w, 3)))


class TestIdentityWarp:
    def test_identity_reproduces_source(self):
        img = checker_image(32, 24)
        depth = DepthMap(np.full((24, 32), 17.0))
        k = sm.intrinsics_from_fov(80.0, 32, 24)
        out, mask = synthesize_target(img, depth, sm.PoseSE3(), k)
        assert mask.data.all()
        np.testing.assert_allclose(out.data, img.data, atol=1e-9)

    def test_invalid_depth_masked(self):
        img = checker_image(8, 8)
        d = np.full((8, 8), 10.0)
        d[2, 3] = 0.0
        out, mask = synthesize_target(img, DepthMap(d), sm.PoseSE3(), sm.intrinsics_from_fov(80, 8, 8))
        assert not mask.data[2, 3]
        assert mask.data.sum() == 63
        np.testing.assert_array_equal(out.data[2, 3], 0.0)

    def test_dimension_mismatch(self):
        img = checker_image(8, 8)
        depth = DepthMap(np.full((9, 8), 1.0))
        with pytest.raises(DimensionMismatchError):
            synthesize_target(img, depth, sm.PoseSE3(), sm.intrinsics_from_fov(80, 8, 8))

    def test_behind_camera_masked(self):
        img = checker_image(16, 16)
        depth = DepthMap(np.full((16, 16), 5.0))
        pose = sm.PoseSE3(trl=(0, 0, -10.0))  # pushes points behind source
        _, mask = synthesize_target(img, depth, pose, sm.intrinsics_from_fov(80, 16, 16))
        assert mask.data.sum() == 0


class TestDisparityShift:
    def test_translation_shifts_samples_by_fx_b_over_d(self):
        # target pixels with valid depth d under point transform (b,0,0)
        # must sample the source at exactly u + fx*b/d
        k = sm.intrinsics_from_fov(87.5, 64, 64)
        d = 50.0
        b = 1.52
        disp = k.fx * b / d
        img = checker_image(64, 64, seed=4)
        depth = DepthMap(np.full((64, 64), d))
        out, mask = synthesize_target(img, depth, sm.PoseSE3(trl=(b, 0, 0)), k)
        us, vs = np.meshgrid(np.arange(64, dtype=float), np.arange(64, dtype=float))
        expected, exp_ok = bilinear_sample_many(img, us + disp, vs)
        np.testing.assert_array_equal(mask.data, exp_ok)
        assert mask.data.mean() > 0.9
        assert np.abs(out.data[mask.data] - expected[exp_ok]).max() < 1e-6

    def test_mask_monotone_in_translation_magnitude(self):
        k = sm.intrinsics_from_fov(87.5, 64, 64)
        img = checker_image(64, 64, seed=5)
        depth = DepthMap(np.full((64, 64), 50.0))
        counts = []
        for b in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0):
            _, mask = synthesize_target(img, depth, sm.PoseSE3(trl=(b, 0, 0)), k)
            counts.append(mask.count())
        assert all(a >= b for a, b in zip(counts, counts[1:]))


class TestOracleWarps:
    def test_z_translation_matches_rendered_view(self, rig):
        # moving toward a textured plane: compare the synthesized target
        # against the oracle's direct render of the same camera
        scene = oracle.demo_scene("plane", seed=9, texture_amplitude=0.5)
        k = rig.intrinsics
        pose_t = sm.PoseSE3()  # plane at z = 50
        pose_s = sm.PoseSE3(trl=(0, 0, 3.0))  # 3 mm closer
        target, _, depth_t, _ = oracle.render(scene, pose_t, rig)
        source, _, _, _ = oracle.render(scene, pose_s, rig)
        warp_pose = sm.compose(sm.invert(pose_s), pose_t)
        synth, mask = synthesize_target(source, depth_t, warp_pose, k)
        diff = np.abs(synth.data - target.data)[mask.data]
        # 3 mm of approach rescales the view; border pixels fall outside
        assert mask.data.mean() > 0.85
        assert diff.mean() < 1e-3

    def test_stereo_pose_reproduces_left_from_right(self, rig, textured_pair):
        sp = stereo_pose(rig)
        synth, mask = synthesize_target(
            textured_pair["target_right"], textured_pair["depth"], sp, rig.intrinsics
        )
        diff = np.abs(synth.data - textured_pair["target"].data)[mask.data]
        assert mask.data.mean() > 0.9
        assert diff.mean() < 2e-2


class TestStereoPose:
    def test_baseline_appears_negated(self, rig):
        sp = stereo_pose(rig)
        assert sp.trl == (-1.52, 0.0, 0.0)
        assert sp.rot == (0.0, 0.0, 0.0)

    def test_zero_baseline_is_identity(self):
        rig0 = sm.StereoRig(intrinsics=sm.intrinsics_from_fov(87.5, 8, 8), baseline=0.0)
        sp = stereo_pose(rig0)
        assert np.abs(sp.to_matrix() - np.eye(4)).max() == 0.0
