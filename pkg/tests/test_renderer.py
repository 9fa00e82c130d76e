import numpy as np
import pytest
import torch

from dynsplat import geometry as G
from dynsplat import renderer as R
from dynsplat.gaussians import GaussianSet

from _oracles import finite_difference_gradient, grad_close, naive_render, random_scene

K32 = G.Intrinsics(40.0, 40.0, 15.5, 15.5, 32, 32)


def build_set(scene):
    return GaussianSet(
        scene["centers"], scene["quats"], scene["scales"],
        scene["opacity_logits"], scene["colors"],
    )


def render_vs_oracle(scene, pose, roi):
    gs = build_set(scene)
    K = G.Intrinsics(scene["fx"], scene["fy"], scene["cx"], scene["cy"],
                     scene["size"], scene["size"])
    patch = R.render(gs, pose, K, roi)
    rgb, depth, alpha = naive_render(
        scene["centers"], scene["quats"], scene["scales"], scene["opacity_logits"],
        scene["colors"], pose.q, pose.t, scene["fx"], scene["fy"], scene["cx"],
        scene["cy"], roi,
    )
    return patch, rgb, depth, alpha


class TestForward:
    def test_single_splat_center_pixel_is_opacity_times_color(self):
        K = G.Intrinsics(100.0, 100.0, 16.0, 16.0, 33, 33)
        gs = GaussianSet.from_points(
            np.array([[0.0, 0.0, 2.0]]), np.array([[0.2, 0.5, 0.9]]), 0.03,
            opacity_logit=0.7,
        )
        patch = R.render(gs, G.CameraPose(), K)
        op = 1.0 / (1.0 + np.exp(-0.7))
        assert np.allclose(patch.rgb[16, 16].numpy(), op * np.array([0.2, 0.5, 0.9]),
                           atol=1e-12)
        assert abs(float(patch.depth[16, 16]) - op * 2.0) < 1e-12
        assert abs(float(patch.alpha[16, 16]) - op) < 1e-12

    def test_empty_set_renders_zeros(self):
        patch = R.render(GaussianSet.empty(), G.CameraPose(), K32)
        assert float(patch.rgb.abs().sum()) == 0.0
        assert float(patch.alpha.abs().sum()) == 0.0

    def test_matches_naive_oracle(self, rng):
        for _ in range(25):
            scene = random_scene(rng, n_max=40, size=24)
            pose = G.CameraPose(
                G.quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, 0.2)),
                rng.normal(size=3) * 0.05,
            )
            patch, rgb, depth, alpha = render_vs_oracle(scene, pose, (0, 0, 24, 24))
            assert np.abs(patch.rgb.numpy() - rgb).max() < 1e-6
            assert np.abs(patch.depth.numpy() - depth).max() < 1e-6
            assert np.abs(patch.alpha.numpy() - alpha).max() < 1e-6

    def test_depth_tie_broken_by_index(self, rng):
        scene = random_scene(rng, n_max=10, size=16)
        # force two splats onto the same depth at the same spot
        scene["centers"][0] = [0.0, 0.0, 2.0]
        scene["centers"][-1] = [0.0, 0.0, 2.0]
        pose = G.CameraPose()
        patch, rgb, depth, alpha = render_vs_oracle(scene, pose, (0, 0, 16, 16))
        assert np.abs(patch.rgb.numpy() - rgb).max() < 1e-6

    def test_roi_equals_full_image_crop(self, rng):
        scene = random_scene(rng, n_max=60, size=32)
        gs = build_set(scene)
        full = R.render(gs, G.CameraPose(), K32)
        roi = (5, 9, 12, 10)
        part = R.render(gs, G.CameraPose(), K32, roi)
        crop = full.rgb[9:19, 5:17]
        assert float((part.rgb - crop).abs().max()) < 1e-9
        assert float((part.depth - full.depth[9:19, 5:17]).abs().max()) < 1e-9

    def test_roi_outside_image_rejected(self):
        gs = GaussianSet.from_points(np.array([[0, 0, 2.0]]), np.array([[1, 0, 0.0]]), 0.05)
        with pytest.raises(ValueError):
            R.render(gs, G.CameraPose(), K32, (20, 20, 20, 5))

    def test_occlusion_order(self):
        K = G.Intrinsics(100.0, 100.0, 16.0, 16.0, 33, 33)
        pts = np.array([[0.0, 0.0, 1.5], [0.0, 0.0, 3.0]])
        cols = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        gs = GaussianSet.from_points(pts, cols, 0.05, opacity_logit=2.0)
        patch = R.render(gs, G.CameraPose(), K)
        center = patch.rgb[16, 16].numpy()
        assert center[0] > center[2]  # red sits in front

    def test_early_termination_zeroes_occluded_weight(self):
        K = G.Intrinsics(100.0, 100.0, 16.0, 16.0, 33, 33)
        pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]])
        cols = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        gs = GaussianSet.from_points(pts, cols, 0.08, opacity_logit=2.0)
        cfg = R.RenderConfig(transmittance_floor=0.5)
        patch = R.render(gs, G.CameraPose(), K, config=cfg, want_contributors=True)
        # behind the 0.88-opacity front splat the transmittance is 0.12 < 0.5
        assert float(patch.rgb[16, 16, 1]) == 0.0
        ws = dict(R.blend_weights(patch, (16, 16)))
        assert 1 not in ws

    def test_alpha_below_one_and_rgb_in_range(self, rng):
        scene = random_scene(rng, n_max=100, size=24)
        scene["opacity_logits"][:] = 6.0  # nearly opaque stack
        patch, *_ = render_vs_oracle(scene, G.CameraPose(), (0, 0, 24, 24))
        assert float(patch.alpha.max()) < 1.0
        assert float(patch.rgb.min()) >= 0.0 and float(patch.rgb.max()) <= 1.0


class TestProjectGaussian:
    def test_behind_camera_culled(self):
        gs = GaussianSet.from_points(np.array([[0, 0, -1.0]]), np.array([[1, 0, 0.0]]), 0.05)
        assert R.project_gaussian(0, gs, G.CameraPose(), K32) is None

    def test_far_off_image_culled(self):
        gs = GaussianSet.from_points(np.array([[50.0, 0, 1.0]]), np.array([[1, 0, 0.0]]), 0.01)
        assert R.project_gaussian(0, gs, G.CameraPose(), K32) is None

    def test_visible_splat_fields(self):
        gs = GaussianSet.from_points(np.array([[0, 0, 2.0]]), np.array([[0.3, 0.3, 0.3]]), 0.02)
        s = R.project_gaussian(0, gs, G.CameraPose(), K32)
        assert s is not None
        assert np.allclose(s.mean2d, [15.5, 15.5], atol=1e-9)
        assert s.depth == pytest.approx(2.0)
        # dilation keeps the footprint full rank even for a sub-pixel splat
        evals = np.linalg.eigvalsh(s.cov2d)
        assert evals.min() >= 0.3 - 1e-12

    def test_jacobian_stretches_offaxis_footprint(self):
        # off-axis depth variation stretches the footprint along the radial
        # direction and shears it once both u and v offsets are in play
        gs = GaussianSet.from_points(np.array([[0.5, 0.4, 2.0]]), np.array([[0.3, 0.3, 0.3]]), 0.05)
        s = R.project_gaussian(0, gs, G.CameraPose(), K32)
        assert s is not None
        assert abs(s.cov2d[0, 1]) > 1e-6
        on_axis = GaussianSet.from_points(np.array([[0.0, 0.0, 2.0]]), np.array([[0.3, 0.3, 0.3]]), 0.05)
        s0 = R.project_gaussian(0, on_axis, G.CameraPose(), K32)
        assert s.cov2d[0, 0] > s0.cov2d[0, 0] + 1e-4


class TestBackward:
    def _scene_set(self, rng, n=6):
        # every splat keeps weight > 1e-3 somewhere: spread, mid opacity
        z = np.linspace(1.5, 2.5, n)
        ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
        centers = np.stack([0.25 * np.cos(ang) * z, 0.25 * np.sin(ang) * z, z], -1)
        quats = rng.normal(size=(n, 4))
        scales = np.exp(rng.uniform(np.log(0.05), np.log(0.12), size=(n, 3)))
        logits = rng.uniform(-0.5, 1.0, size=n)
        colors = rng.uniform(0.2, 0.8, size=(n, 3))
        return GaussianSet(centers, quats, scales, logits, colors)

    def test_backward_matches_finite_differences(self, rng):
        K = G.Intrinsics(20.0, 20.0, 7.5, 7.5, 16, 16)
        gs = self._scene_set(rng)
        pose = G.CameraPose(G.quat_from_axis_angle([0, 1, 0], 0.1), [0.05, 0.0, -0.2])
        upstream = rng.uniform(-1, 1, size=(16, 16, 4))

        patch = R.render(gs, pose, K, save_graph=True)
        grads = R.render_backward(patch, upstream)

        def objective_with(attr, value):
            kw = {attr: torch.as_tensor(value, dtype=torch.float64)}
            p = R.render(gs.view(**kw), pose, K)
            val = (p.rgb * torch.as_tensor(upstream[..., :3])).sum() \
                + (p.depth * torch.as_tensor(upstream[..., 3])).sum()
            return float(val)

        for attr, g in [("centers", grads.centers), ("scales", grads.scales),
                        ("colors", grads.colors), ("rotations", grads.rotations),
                        ("opacity_logits", grads.opacity_logits)]:
            base = getattr(gs, attr).numpy()
            fd = finite_difference_gradient(lambda v, a=attr: objective_with(a, v), base)
            assert grad_close(g.numpy(), fd), f"gradient mismatch for {attr}"

        def objective_pose(delta):
            p = R.render(gs, pose, K, pose_delta=torch.as_tensor(delta, dtype=torch.float64))
            return float((p.rgb * torch.as_tensor(upstream[..., :3])).sum()
                         + (p.depth * torch.as_tensor(upstream[..., 3])).sum())

        fd_pose = finite_difference_gradient(objective_pose, np.zeros(6))
        assert grad_close(grads.pose_tangent.numpy(), fd_pose)

    def test_backward_requires_graph(self, rng):
        gs = self._scene_set(rng)
        patch = R.render(gs, G.CameraPose(), K32)
        with pytest.raises(R.RenderContractError):
            R.render_backward(patch, np.zeros((32, 32, 4)))

    def test_backward_rejects_shape_mismatch(self, rng):
        gs = self._scene_set(rng)
        patch = R.render(gs, G.CameraPose(), K32, save_graph=True)
        with pytest.raises(R.RenderContractError):
            R.render_backward(patch, np.zeros((8, 8, 4)))


class TestContributors:
    def test_weights_describe_blend(self, rng):
        scene = random_scene(rng, n_max=30, size=16)
        gs = build_set(scene)
        K = G.Intrinsics(scene["fx"], scene["fy"], scene["cx"], scene["cy"], 16, 16)
        patch = R.render(gs, G.CameraPose(), K, want_contributors=True)
        pix, gid, w = patch.contributors
        assert (w >= R.DEFAULT_CONFIG.contributor_min_weight - 1e-12).all()
        # recorded weights never exceed the pixel's total alpha
        for p in np.unique(pix)[:20]:
            r, c = divmod(int(p), 16)
            assert w[pix == p].sum() <= float(patch.alpha[r, c]) + 1e-9

    def test_query_outside_roi_raises(self, rng):
        scene = random_scene(rng, n_max=5, size=16)
        gs = build_set(scene)
        K = G.Intrinsics(scene["fx"], scene["fy"], scene["cx"], scene["cy"], 16, 16)
        patch = R.render(gs, G.CameraPose(), K, (2, 2, 8, 8), want_contributors=True)
        with pytest.raises(ValueError):
            R.blend_weights(patch, (1, 1))

    def test_query_without_recording_raises(self, rng):
        scene = random_scene(rng, n_max=5, size=16)
        gs = build_set(scene)
        K = G.Intrinsics(scene["fx"], scene["fy"], scene["cx"], scene["cy"], 16, 16)
        patch = R.render(gs, G.CameraPose(), K)
        with pytest.raises(R.RenderContractError):
            R.blend_weights(patch, (4, 4))


class TestDumps:
    def test_patch_pngs(self, rng, tmp_path):
        from PIL import Image

        scene = random_scene(rng, n_max=20, size=16)
        gs = build_set(scene)
        K = G.Intrinsics(scene["fx"], scene["fy"], scene["cx"], scene["cy"], 16, 16)
        patch = R.render(gs, G.CameraPose(), K)
        R.save_patch_images(patch, tmp_path / "c.png", tmp_path / "d.png")
        rgb = np.asarray(Image.open(tmp_path / "c.png"))
        depth = np.asarray(Image.open(tmp_path / "d.png"))
        assert rgb.shape == (16, 16, 3) and rgb.dtype == np.uint8
        assert depth.shape == (16, 16) and depth.dtype in (np.uint16, np.int32)
