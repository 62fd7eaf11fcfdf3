"""Tests for the convolutional extractor, point sampling, and radiance heads."""

import numpy as np
import pytest

from svrender import adcore
from svrender.adcore import finite_difference_check
from svrender.geometry import bilinear_sample_batch
from svrender.network import (
    BRANCHES,
    ModelConfig,
    RenderModel,
    VARIANTS,
    conv2d_same,
    point_features,
)
from svrender.scenes_metrics import Primitive, ToySceneSpec, render_ground_truth


def naive_conv(x, weight, bias):
    """Direct-sum reference for 3x3 same-padding convolution."""
    h, w, c_in = x.shape
    c_out = weight.shape[-1]
    padded = np.zeros((h + 2, w + 2, c_in))
    padded[1:-1, 1:-1] = x
    out = np.zeros((h, w, c_out))
    for y in range(h):
        for xx in range(w):
            patch = padded[y : y + 3, xx : xx + 3]
            for co in range(c_out):
                out[y, xx, co] = np.sum(patch * weight[:, :, :, co]) + bias[co]
    return out


def tiny_scene(n_views=4, size=16, seed=0):
    spec = ToySceneSpec(
        primitives=[
            Primitive("sphere", (0.0, 0.0, 0.0), 0.9, (0.8, 0.3, 0.2)),
            Primitive("box", (0.0, -0.7, 0.0), (1.2, 0.15, 1.2), (0.2, 0.5, 0.9)),
        ],
        n_views=n_views,
        width=size,
        height=size,
        seed=seed,
    )
    return render_ground_truth(spec)


def sample_points(rng, n):
    pts = rng.uniform(-0.7, 0.7, size=(n, 3))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return pts, dirs


class TestConv:
    def test_matches_naive_reference(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 7, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        b = rng.normal(size=4)
        out = conv2d_same(adcore.constant(x), adcore.constant(w), adcore.constant(b))
        assert out.shape == (6, 7, 4)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b), atol=1e-12)

    def test_center_delta_kernel_is_identity(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 5, 2))
        w = np.zeros((3, 3, 2, 2))
        w[1, 1] = np.eye(2)
        out = conv2d_same(adcore.constant(x), adcore.constant(w), adcore.constant(np.zeros(2)))
        np.testing.assert_allclose(out.data, x, atol=1e-14)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        store = adcore.ParameterStore()
        store.add("x", rng.normal(size=(4, 4, 2)))
        store.add("w", rng.normal(size=(3, 3, 2, 3)) * 0.4)
        store.add("b", rng.normal(size=3) * 0.1)

        def f(params):
            x, w, b = (p.value for p in params)
            return adcore.tsum(adcore.square(conv2d_same(x, w, b)))

        assert finite_difference_check(f, list(store)) < 1e-6


class TestExtractor:
    def test_feature_width_and_rgb_tail(self):
        images, _ = tiny_scene()
        cfg = ModelConfig(feat_channels=6)
        model = RenderModel(cfg, seed=1)
        maps = model.extract(images, "coarse")
        assert maps[0].shape == (16, 16, cfg.n_f)
        # the last three channels are the raw image, untouched
        np.testing.assert_array_equal(maps[2].data[:, :, -3:], images[2])

    def test_zeroed_last_layer_gives_zero_channels(self):
        images, _ = tiny_scene()
        model = RenderModel(ModelConfig(feat_channels=4), seed=2)
        model.store["extractor.coarse.conv3.weight"].assign(np.zeros((3, 3, 4, 4)))
        model.store["extractor.coarse.conv3.bias"].assign(np.zeros(4))
        maps = model.extract(images, "coarse")
        assert np.all(maps[0].data[:, :, :4] == 0.0)
        assert np.any(maps[0].data[:, :, 4:] != 0.0)

    def test_branches_share_trunk(self):
        images, _ = tiny_scene()
        model = RenderModel(ModelConfig(feat_channels=4), seed=3)
        coarse = model.extract(images[:1], "coarse")[0].data
        fine = model.extract(images[:1], "fine")[0].data
        assert not np.array_equal(coarse, fine)
        # aligning only the last layer makes the branches agree exactly
        model.store["extractor.fine.conv3.weight"].assign(
            model.store["extractor.coarse.conv3.weight"].data
        )
        model.store["extractor.fine.conv3.bias"].assign(
            model.store["extractor.coarse.conv3.bias"].data
        )
        fine2 = model.extract(images[:1], "fine")[0].data
        np.testing.assert_array_equal(coarse, fine2)

    def test_unknown_branch_rejected(self):
        images, _ = tiny_scene()
        model = RenderModel(ModelConfig(), seed=0)
        with pytest.raises(ValueError, match="branch"):
            model.extract(images, "medium")

    def test_seed_determinism(self):
        a = RenderModel(ModelConfig(), seed=7)
        b = RenderModel(ModelConfig(), seed=7)
        c = RenderModel(ModelConfig(), seed=8)
        for pa, pb in zip(a.store, b.store):
            np.testing.assert_array_equal(pa.data, pb.data)
        assert any(
            not np.array_equal(pa.data, pc.data) for pa, pc in zip(a.store, c.store)
        )


class TestPointFeatures:
    def test_values_match_direct_bilinear(self):
        images, cameras = tiny_scene()
        model = RenderModel(ModelConfig(feat_channels=4), seed=4)
        maps = model.extract(images, "coarse")
        rng = np.random.default_rng(6)
        pts, dirs = sample_points(rng, 9)
        feats, valid, _ = point_features(pts, dirs, cameras, maps)
        assert feats.shape == (9, len(cameras), model.config.n_f)
        from svrender.geometry import project_batch

        for i, cam in enumerate(cameras):
            uv, _, in_front = project_batch(pts, cam)
            ref, in_img = bilinear_sample_batch(maps[i].data, uv)
            ok = in_front & in_img
            np.testing.assert_array_equal(valid[:, i], ok)
            np.testing.assert_allclose(feats.data[ok, i], ref[ok], atol=1e-12)
            assert np.all(feats.data[~ok, i] == 0.0)

    def test_behind_camera_is_invalid_and_zeroed(self):
        images, cameras = tiny_scene()
        model = RenderModel(ModelConfig(feat_channels=4), seed=4)
        maps = model.extract(images, "coarse")
        # a point far behind every ring camera's image plane: outside the ring
        pts = np.array([[20.0, 0.0, 0.0]])
        dirs = np.array([[1.0, 0.0, 0.0]])
        feats, valid, _ = point_features(pts, dirs, cameras, maps)
        assert not valid.all()
        for i in range(len(cameras)):
            if not valid[0, i]:
                assert np.all(feats.data[0, i] == 0.0)

    def test_direction_features(self):
        images, cameras = tiny_scene()
        model = RenderModel(ModelConfig(feat_channels=4), seed=4)
        maps = model.extract(images, "coarse")
        cam = cameras[0]
        # target looking along the same ray as source camera 0
        pt = cam.center + 2.5 * cam.optical_axis
        d = cam.optical_axis / np.linalg.norm(cam.optical_axis)
        _, _, dirfeat = point_features(pt[None], d[None], cameras, maps)
        assert dirfeat.shape == (1, len(cameras), 4)
        src_dir = pt - cam.center
        src_dir /= np.linalg.norm(src_dir)
        np.testing.assert_allclose(dirfeat[0, 0, :3], d - src_dir, atol=1e-12)
        np.testing.assert_allclose(dirfeat[0, 0, 3], 1.0, atol=1e-12)
        assert np.all(dirfeat[..., 3] >= -1.0) and np.all(dirfeat[..., 3] <= 1.0)


class TestHead:
    def setup_method(self):
        self.images, self.cameras = tiny_scene()
        self.model = RenderModel(
            ModelConfig(feat_channels=4, hidden_dim=12, dir_dim=4), seed=5
        )
        self.maps = self.model.extract(self.images, "coarse")

    def _radiance(self, pts, dirs, cameras=None, maps=None):
        return self.model.radiance(
            "coarse",
            pts,
            dirs,
            self.cameras if cameras is None else cameras,
            self.maps if maps is None else maps,
        )

    def test_output_ranges(self):
        rng = np.random.default_rng(7)
        pts, dirs = sample_points(rng, 40)
        sigma, color = self._radiance(pts, dirs)
        assert sigma.shape == (40,)
        assert color.shape == (40, 3)
        assert np.all(sigma.data >= 0.0)
        assert np.all(color.data >= -1e-12) and np.all(color.data <= 1.0 + 1e-12)

    def test_all_invalid_point_is_empty(self):
        # far outside every frustum
        pts = np.array([[80.0, 80.0, 80.0]])
        dirs = np.array([[0.0, 0.0, 1.0]])
        sigma, color = self._radiance(pts, dirs)
        assert sigma.data[0] == 0.0
        assert np.all(color.data[0] == 0.0)

    def test_color_in_convex_hull_of_source_rgb(self):
        rng = np.random.default_rng(8)
        pts, dirs = sample_points(rng, 30)
        feats, valid, _ = point_features(pts, dirs, self.cameras, self.maps)
        sigma, color = self._radiance(pts, dirs)
        rgb = feats.data[:, :, -3:]
        for p in range(30):
            ok = valid[p]
            if not ok.any():
                continue
            lo = rgb[p, ok].min(axis=0) - 1e-12
            hi = rgb[p, ok].max(axis=0) + 1e-12
            assert np.all(color.data[p] >= lo) and np.all(color.data[p] <= hi)

    def test_identical_source_rgb_recovered_exactly(self):
        shade = np.full((16, 16, 3), 0.37)
        images = [shade.copy() for _ in self.cameras]
        maps = self.model.extract(images, "coarse")
        rng = np.random.default_rng(9)
        pts, dirs = sample_points(rng, 12)
        feats, valid, _ = point_features(pts, dirs, self.cameras, maps)
        _, color = self._radiance(pts, dirs, maps=maps)
        seen = valid.any(axis=1)
        np.testing.assert_allclose(color.data[seen], 0.37, atol=1e-12)

    def test_invalid_view_content_is_ignored(self):
        rng = np.random.default_rng(10)
        pts, dirs = sample_points(rng, 15)
        sigma_a, color_a = self._radiance(pts, dirs)
        # replace one camera with one that cannot see the points: its map
        # content then must not matter at all
        _, valid = None, None
        scrambled = list(self.maps)
        scrambled[2] = adcore.constant(
            np.random.default_rng(0).normal(size=self.maps[2].shape)
        )
        far_cam = self.cameras[2]
        from dataclasses import replace

        w2c = far_cam.world_to_camera.copy()
        w2c[:3, 3] += 500.0  # push the view away so nothing projects inside
        moved = replace(far_cam, world_to_camera=w2c)
        cams = list(self.cameras)
        cams[2] = moved
        feats, vmask, _ = point_features(pts, dirs, cams, scrambled)
        assert not vmask[:, 2].any()
        sigma_b, color_b = self._radiance(pts, dirs, cameras=cams, maps=scrambled)

        cams_ref, maps_ref = list(cams), list(scrambled)
        maps_ref[2] = adcore.constant(np.zeros(self.maps[2].shape))
        sigma_c, color_c = self._radiance(pts, dirs, cameras=cams_ref, maps=maps_ref)
        np.testing.assert_array_equal(sigma_b.data, sigma_c.data)
        np.testing.assert_array_equal(color_b.data, color_c.data)

    def test_view_permutation_invariance(self):
        rng = np.random.default_rng(11)
        pts, dirs = sample_points(rng, 20)
        sigma_a, color_a = self._radiance(pts, dirs)
        perm = [2, 0, 3, 1]
        cams = [self.cameras[i] for i in perm]
        maps = [self.maps[i] for i in perm]
        sigma_b, color_b = self._radiance(pts, dirs, cameras=cams, maps=maps)
        np.testing.assert_allclose(sigma_a.data, sigma_b.data, atol=1e-10)
        np.testing.assert_allclose(color_a.data, color_b.data, atol=1e-10)


class TestVariants:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_every_variant_runs(self, variant):
        images, cameras = tiny_scene()
        cfg = ModelConfig(feat_channels=4, n_k=2, hidden_dim=10, dir_dim=4, variant=variant)
        model = RenderModel(cfg, seed=6)
        maps = model.extract(images, "fine")
        rng = np.random.default_rng(12)
        pts, dirs = sample_points(rng, 8)
        sigma, color = model.radiance("fine", pts, dirs, cameras, maps)
        assert np.all(sigma.data >= 0.0)
        assert np.all(np.isfinite(color.data))

    def test_bank_presence(self):
        with_bank = ("proposed", "cosine", "rational", "fixed")
        for variant in VARIANTS:
            model = RenderModel(ModelConfig(variant=variant), seed=0)
            if variant in with_bank:
                assert "coarse.alpha" in model.store and "fine.alpha" in model.store
            else:
                assert "coarse.alpha" not in model.store
                assert not model.banks

    def test_aggregated_widths(self):
        n_f = ModelConfig().n_f
        assert RenderModel(ModelConfig(n_k=2), seed=0).aggregated_width() == 4 * n_f
        assert RenderModel(ModelConfig(variant="fixed"), seed=0).aggregated_width() == 10 * n_f
        assert RenderModel(ModelConfig(variant="baseline"), seed=0).aggregated_width() == 2 * n_f
        assert RenderModel(ModelConfig(variant="mean_only"), seed=0).aggregated_width() == n_f

    def test_fixed_bank_is_frozen(self):
        images, cameras = tiny_scene()
        model = RenderModel(ModelConfig(feat_channels=4, variant="fixed"), seed=1)
        names = [p.name for p in model.trainable_parameters()]
        assert "coarse.alpha" not in names and "fine.alpha" not in names
        assert "coarse.alpha" in model.store  # stored, just not optimized

        maps = model.extract(images, "coarse")
        rng = np.random.default_rng(13)
        pts, dirs = sample_points(rng, 6)
        sigma, color = model.radiance("coarse", pts, dirs, cameras, maps)
        loss = adcore.tsum(adcore.square(color)) + adcore.tsum(sigma)
        loss.backward()
        assert np.all(model.store["coarse.alpha"].grad == 0.0)
        assert np.any(model.store["extractor.conv1.weight"].grad != 0.0)

    def test_trainable_includes_alpha_when_learnable(self):
        model = RenderModel(ModelConfig(variant="proposed"), seed=0)
        names = [p.name for p in model.trainable_parameters()]
        assert "coarse.alpha" in names and "fine.alpha" in names

    def test_config_validation(self):
        with pytest.raises(ValueError, match="variant"):
            ModelConfig(variant="extra")
        with pytest.raises(ValueError, match="dtype"):
            ModelConfig(dtype="float16")
        with pytest.raises(ValueError, match="positive"):
            ModelConfig(n_k=0)

    def test_float32_outputs(self):
        images, cameras = tiny_scene()
        model = RenderModel(ModelConfig(feat_channels=4, dtype="float32"), seed=2)
        maps = model.extract(images, "coarse")
        rng = np.random.default_rng(14)
        pts, dirs = sample_points(rng, 5)
        sigma, color = model.radiance("coarse", pts, dirs, cameras, maps)
        assert sigma.data.dtype == np.float32
        assert color.data.dtype == np.float32


class TestGradients:
    def test_full_radiance_gradient(self):
        # end-to-end: images -> conv features -> projection/sampling ->
        # aggregation -> heads -> scalar; checked against central differences
        images, cameras = tiny_scene(n_views=3, size=8)
        cfg = ModelConfig(feat_channels=2, n_k=1, hidden_dim=4, dir_dim=3, head_layers=1)
        model = RenderModel(cfg, seed=9)
        rng = np.random.default_rng(15)
        pts, dirs = sample_points(rng, 4)
        params = model.trainable_parameters()

        def f(_):
            maps = model.extract(images, "coarse")
            sigma, color = model.radiance("coarse", pts, dirs, cameras, maps)
            return adcore.add(
                adcore.tsum(adcore.square(color)), adcore.tsum(adcore.square(sigma))
            )

        assert finite_difference_check(f, params, eps=1e-6) < 1e-6

    def test_fine_branch_gradient(self):
        images, cameras = tiny_scene(n_views=3, size=8)
        cfg = ModelConfig(
            feat_channels=2, hidden_dim=4, dir_dim=3, head_layers=1, variant="baseline"
        )
        model = RenderModel(cfg, seed=10)
        rng = np.random.default_rng(16)
        pts, dirs = sample_points(rng, 3)
        params = model.trainable_parameters()

        def f(_):
            maps = model.extract(images, "fine")
            sigma, color = model.radiance("fine", pts, dirs, cameras, maps)
            return adcore.add(adcore.tsum(color), adcore.tsum(sigma))

        assert finite_difference_check(f, params, eps=1e-6) < 1e-6
