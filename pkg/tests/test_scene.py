"""Tests for synthetic scenes, scene I/O and grid fitting."""

import logging
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ttnf_tool.core.qtt import DenseVoxelGrid, QttGrid, QttGridConfig
from ttnf_tool.core.render import RENDER_PAYLOAD, RayBatch, RenderConfig, composite, generate_rays, intersect_box, march_rays
from ttnf_tool.core.sampling import SamplerKind
from ttnf_tool.core.scene import (
    RAW_DENSITY_EMPTY,
    GridInit,
    Scene,
    SceneKind,
    channel_lr_scale,
    evaluate_views,
    fit_scene,
    init_grid,
    make_synthetic_scene,
    mean_psnr,
    orbit_cameras,
    synthetic_voxels,
)
from ttnf_tool.errors import ArtifactIOError


@pytest.fixture(scope="module")
def tiny_scene():
    return make_synthetic_scene(SceneKind.SPHERE, levels=2, image_size=8, samples_per_ray=16)


def _render_cfg(scene, **kwargs):
    return RenderConfig(samples_per_ray=scene.samples_per_ray, background=scene.background, **kwargs)


class TestSynthetic:
    def test_sphere_is_dense_inside_and_empty_outside(self):
        cfg = QttGridConfig(3, RENDER_PAYLOAD)
        voxels = synthetic_voxels(SceneKind.SPHERE, cfg)
        assert voxels.shape == (8, 8, 8, RENDER_PAYLOAD)
        assert voxels[4, 4, 4, 0] > 0.0
        assert voxels[0, 0, 0, 0] < RAW_DENSITY_EMPTY + 1.0

    def test_empty_scene(self):
        voxels = synthetic_voxels("empty", QttGridConfig(2, RENDER_PAYLOAD))
        np.testing.assert_array_equal(voxels[..., 0], RAW_DENSITY_EMPTY)

    def test_orbit_cameras(self):
        cams = orbit_cameras(QttGridConfig(2, RENDER_PAYLOAD), 8, 16)
        assert len(cams) == 8
        for cam in cams:
            eye = cam.pose[:3, 3]
            assert np.linalg.norm(eye) == pytest.approx(3.0)
            assert eye[2] == pytest.approx(1.5)
            assert cam.focal == pytest.approx(8.0 / math.tan(math.radians(22.5)))

    def test_too_few_cameras(self):
        with pytest.raises(ValueError):
            make_synthetic_scene(SceneKind.SPHERE, levels=2, num_cameras=4)

    def test_view_split(self, tiny_scene):
        assert tiny_scene.test_views == [3, 7]
        assert tiny_scene.train_views == [0, 1, 2, 4, 5, 6]

    def test_images_show_the_sphere(self, tiny_scene):
        image = tiny_scene.images[0]
        assert image.shape == (8, 8, 3)
        # red albedo at the center, white background at the corner
        assert image[4, 4, 0] > image[4, 4, 2]
        assert_allclose(image[0, 0], 1.0, atol=1e-3)


class TestSceneIO:
    def test_roundtrip(self, tiny_scene, tmp_path):
        path = tiny_scene.save(tmp_path / "scene")
        assert path.name == "scene.json"
        assert (tmp_path / "scene" / "view_000.ppm").exists()
        loaded = Scene.load(tmp_path / "scene")
        assert loaded.kind == "sphere"
        assert loaded.config.levels == 2
        assert loaded.samples_per_ray == 16
        np.testing.assert_array_equal(loaded.voxels, tiny_scene.voxels)
        for a, b in zip(loaded.cameras, tiny_scene.cameras):
            assert_allclose(a.pose, b.pose)
        for a, b in zip(loaded.images, tiny_scene.images):
            assert_allclose(a, b, atol=1.0 / 255.0)

    def test_missing_scene(self, tmp_path):
        with pytest.raises(ArtifactIOError):
            Scene.load(tmp_path / "nowhere")

    def test_corrupt_description(self, tmp_path):
        (tmp_path / "scene.json").write_text("{not json")
        with pytest.raises(ArtifactIOError):
            Scene.load(tmp_path)


class TestFitting:
    def test_oracle_grid_is_exact(self, tiny_scene):
        scores = evaluate_views(tiny_scene.dense_grid(), tiny_scene, _render_cfg(tiny_scene))
        assert len(scores) == 8
        assert all(s.psnr == math.inf for s in scores)
        assert [s.split for s in scores].count("test") == 2

    def test_full_rank_tt_svd_init(self):
        scene = make_synthetic_scene(SceneKind.TWO_BOXES, levels=3, image_size=8, samples_per_ray=16)
        grid = init_grid(scene, r_max=64, init=GridInit.TT_SVD)
        scores = evaluate_views(grid, scene, _render_cfg(scene), views=scene.test_views)
        assert mean_psnr(scores, "test") > 60.0

    def test_zero_steps_is_a_no_op(self, tiny_scene):
        grid = QttGrid.random(tiny_scene.grid_config(8), 0.1, seed=0)
        before = grid.tt.copy()
        result = fit_scene(grid, tiny_scene, _render_cfg(tiny_scene, steps=0))
        assert result.log == []
        assert result.grid is grid
        for a, b in zip(before.cores, grid.tt.cores):
            np.testing.assert_array_equal(a, b)

    def test_dense_fit_improves_train_views(self, tiny_scene):
        cfg = _render_cfg(tiny_scene, steps=40, rays_per_batch=256, lr_max=5e-2, lr_min=5e-3, log_every=10)
        start = mean_psnr(evaluate_views(DenseVoxelGrid.zeros(tiny_scene.config), tiny_scene, cfg), "train")
        result = fit_scene(DenseVoxelGrid.zeros(tiny_scene.config), tiny_scene, cfg)
        end = mean_psnr(evaluate_views(result.grid, tiny_scene, cfg), "train")
        assert end > start + 1.0
        assert [e.step for e in result.log] == [0, 10, 20, 30, 39]
        assert all(e.split == "train" for e in result.log)

    @pytest.mark.parametrize("kind", [SamplerKind.V2, SamplerKind.V3])
    def test_qtt_fit_runs(self, tiny_scene, kind):
        grid = init_grid(tiny_scene, r_max=8, kind=kind)
        result = fit_scene(grid, tiny_scene, _render_cfg(tiny_scene, steps=5, rays_per_batch=64), kind)
        assert len(result.log) == 2
        assert all(math.isfinite(e.loss) for e in result.log)

    def test_fit_reports_progress(self, tiny_scene):
        calls = []
        grid = DenseVoxelGrid.zeros(tiny_scene.config)
        fit_scene(grid, tiny_scene, _render_cfg(tiny_scene, steps=3, rays_per_batch=32), progress=lambda d, t: calls.append(d))
        assert calls == [1, 2, 3]


class TestHelpers:
    def test_lr_scale_for_dense_grid(self):
        grid = DenseVoxelGrid.zeros(QttGridConfig(2, RENDER_PAYLOAD))
        scale = channel_lr_scale(grid, RenderConfig(lr_density_scale=10.0, lr_sh_scale=0.1))
        assert list(scale) == ["data"]
        assert scale["data"].shape == (RENDER_PAYLOAD,)
        assert scale["data"][0] == 10.0
        assert np.all(scale["data"][1:] == 0.1)

    def test_lr_scale_targets_the_payload_core(self):
        grid = QttGrid.random(QttGridConfig(2, RENDER_PAYLOAD, r_max=8), 0.1, seed=0)
        scale = channel_lr_scale(grid, RenderConfig(lr_density_scale=2.0))
        assert list(scale) == [1]

    def test_lr_scale_falls_back_for_identity_payload_core(self, caplog):
        grid = QttGrid.random(QttGridConfig(4, RENDER_PAYLOAD, r_max=224), 0.1, seed=0).to_reduced()
        assert grid.tt.ndim - 1 in grid.frozen
        with caplog.at_level(logging.WARNING):
            assert channel_lr_scale(grid, RenderConfig(lr_density_scale=10.0)) is None
        assert "identity" in caplog.text

    def test_init_grid_reduces_for_v3(self, tiny_scene):
        grid = init_grid(tiny_scene, r_max=8, kind=SamplerKind.V3)
        assert grid.tt.is_reduced
        assert init_grid(tiny_scene, r_max=8).frozen == frozenset()


@pytest.mark.slow
class TestToyScale:
    # 32^3 sphere, 2000 steps at the default rates
    @pytest.fixture(scope="class")
    def sphere(self):
        return make_synthetic_scene(SceneKind.SPHERE, levels=5, image_size=32, samples_per_ray=64)

    @staticmethod
    def _cfg(scene, steps=2000, seed=0):
        return _render_cfg(scene, steps=steps, rays_per_batch=1024, seed=seed)

    @staticmethod
    def _psnr(grid, scene, cfg):
        scores = evaluate_views(grid, scene, cfg)
        return mean_psnr(scores, "train"), mean_psnr(scores, "test")

    def test_random_init_fit_gains_psnr(self, sphere):
        cfg = self._cfg(sphere)
        grid = init_grid(sphere, r_max=16, sigma=0.1, seed=0)
        train_0, test_0 = self._psnr(grid, sphere, cfg)
        fit_scene(grid, sphere, cfg)
        train_1, test_1 = self._psnr(grid, sphere, cfg)
        assert train_1 >= train_0 + 10.0
        assert test_1 >= test_0 + 8.0

        for cam in sphere.cameras:
            rays = generate_rays(cam)
            hit, t_near, t_far = intersect_box(rays, sphere.config.box_min, sphere.config.box_max)
            _, ctx = march_rays(grid, RayBatch(rays.origins[hit], rays.directions[hit]), t_near[hit], t_far[hit], cfg)
            comp = composite(ctx.sigma, ctx.delta[:, None], ctx.colors, ctx.background)
            assert_allclose(comp.weights.sum(axis=1) + comp.residual, 1.0, atol=1e-10)

    def test_tt_svd_init_needs_half_the_steps(self, sphere):
        margins = []
        for seed in range(5):
            random_grid = init_grid(sphere, r_max=16, sigma=0.1, seed=seed)
            fit_scene(random_grid, sphere, self._cfg(sphere, seed=seed))
            target, _ = self._psnr(random_grid, sphere, self._cfg(sphere, seed=seed))

            half = self._cfg(sphere, steps=1000, seed=seed)
            svd_grid = init_grid(sphere, r_max=16, init=GridInit.TT_SVD)
            fit_scene(svd_grid, sphere, half)
            reached, _ = self._psnr(svd_grid, sphere, half)
            margins.append(reached - target)
        assert float(np.median(margins)) >= 0.0
