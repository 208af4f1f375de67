import math

import numpy as np
import pytest
import torch

from sonarfield import fields
from sonarfield.fields import (AnalyticScene, BoxPrimitive, FieldConfig,
                               SceneNormalization, SpherePrimitive,
                               init_geometric, load_checkpoint,
                               positional_encoding, save_checkpoint,
                               scene_from_spec)

SMALL = FieldConfig(width=32, sdf_hidden=2, radiance_width=32,
                    radiance_hidden=2, feature_dim=16)


class TestAnalyticScene:
    def test_sphere_sdf_and_grad(self):
        s = SpherePrimitive(np.array([1.0, 0.0, 0.0]), 0.5)
        x = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
        np.testing.assert_allclose(s.sdf(x), [-0.5, 0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(s.grad(x)[1], [1.0, 0.0, 0.0], atol=1e-12)

    def test_box_sdf_outside_corner(self):
        b = BoxPrimitive(np.zeros(3), np.array([1.0, 1.0, 1.0]))
        d = b.sdf(np.array([[2.0, 2.0, 2.0]]))
        assert d[0] == pytest.approx(math.sqrt(3.0))

    def test_box_sdf_inside(self):
        b = BoxPrimitive(np.zeros(3), np.array([1.0, 2.0, 3.0]))
        assert b.sdf(np.array([[0.0, 0.0, 0.0]]))[0] == pytest.approx(-1.0)

    def test_box_grad_matches_finite_differences(self):
        b = BoxPrimitive(np.array([0.1, -0.2, 0.0]), np.array([0.5, 0.7, 0.3]))
        rng = np.random.default_rng(0)
        x = rng.uniform(-1.5, 1.5, size=(200, 3))
        # keep away from the non-differentiable face/edge loci
        keep = np.all(np.abs(np.abs(x - b.center) - b.half_extents) > 1e-3, axis=-1)
        x = x[keep]
        g = b.grad(x)
        eps = 1e-6
        for k in range(3):
            dx = np.zeros(3)
            dx[k] = eps
            fd = (b.sdf(x + dx) - b.sdf(x - dx)) / (2 * eps)
            np.testing.assert_allclose(g[:, k], fd, atol=1e-5)

    def test_union_takes_minimum(self):
        scene = AnalyticScene((SpherePrimitive(np.array([0.0, 0.0, 0.0]), 1.0),
                               SpherePrimitive(np.array([3.0, 0.0, 0.0]), 1.0)))
        x = np.array([[1.5, 0.0, 0.0], [2.5, 0.0, 0.0]])
        np.testing.assert_allclose(scene.sdf(x), [0.5, -0.5], atol=1e-12)
        g = scene.grad(x)
        np.testing.assert_allclose(g[0], [1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(g[1], [-1.0, 0.0, 0.0], atol=1e-12)

    def test_torch_matches_numpy(self):
        scene = AnalyticScene((SpherePrimitive(np.array([0.5, 0.0, 0.0]), 0.7),
                               BoxPrimitive(np.array([-1.0, 0.0, 0.0]),
                                            np.array([0.3, 0.4, 0.5]))))
        rng = np.random.default_rng(1)
        x = rng.normal(size=(100, 3))
        xt = torch.as_tensor(x, dtype=torch.float64)
        np.testing.assert_allclose(scene.sdf_torch(xt).numpy(), scene.sdf(x), atol=1e-14)

    def test_scene_from_spec(self):
        scene = scene_from_spec([
            {"type": "sphere", "center": [0, 0, 0], "radius": 1.0},
            {"type": "box", "center": [2, 0, 0], "half_extents": [1, 1, 1]},
        ])
        assert len(scene.primitives) == 2
        with pytest.raises(ValueError):
            scene_from_spec([{"type": "torus"}])
        with pytest.raises(ValueError):
            scene_from_spec([])


class TestPositionalEncoding:
    def test_shape_and_identity_part(self):
        x = torch.randn(5, 3, dtype=torch.float64)
        enc = positional_encoding(x, 4)
        assert enc.shape == (5, 3 * (1 + 2 * 4))
        assert torch.equal(enc[:, :3], x)

    def test_octave_zero_passthrough(self):
        x = torch.randn(5, 3, dtype=torch.float64)
        assert torch.equal(positional_encoding(x, 0), x)

    def test_frequency_content(self):
        x = torch.tensor([[math.pi / 2, 0.0, 0.0]], dtype=torch.float64)
        enc = positional_encoding(x, 2)
        # first octave sin block starts right after the identity columns
        assert enc[0, 3] == pytest.approx(1.0)        # sin(pi/2)
        assert enc[0, 6] == pytest.approx(0.0, abs=1e-12)  # cos(pi/2)


class TestNetworks:
    def test_init_deterministic(self):
        a = init_geometric(42, SMALL)
        b = init_geometric(42, SMALL)
        assert torch.equal(a.theta(), b.theta())
        assert torch.equal(a.phi(), b.phi())
        c = init_geometric(43, SMALL)
        assert not torch.equal(a.theta(), c.theta())

    def test_init_does_not_disturb_global_rng(self):
        torch.manual_seed(7)
        before = torch.rand(4)
        torch.manual_seed(7)
        init_geometric(0, SMALL)
        after = torch.rand(4)
        assert torch.equal(before, after)

    def test_geometric_init_is_signed_sphere(self):
        # wider net approximates ||x|| - r0 well enough to get the sign right
        fp = init_geometric(0, FieldConfig(width=128, sdf_hidden=4,
                                           radiance_width=32, radiance_hidden=2,
                                           feature_dim=16))
        inside = torch.tensor([[0.1, 0.0, 0.0], [0.0, 0.2, 0.1]], dtype=torch.float64)
        outside = torch.tensor([[0.9, 0.0, 0.0], [0.0, 0.0, -0.95]], dtype=torch.float64)
        assert (fp.sdf_eval(inside) < 0).all()
        assert (fp.sdf_eval(outside) > 0).all()

    def test_radiance_nonnegative(self):
        fp = init_geometric(0, SMALL)
        x = torch.randn(50, 3, dtype=torch.float64)
        d = torch.nn.functional.normalize(torch.randn(50, 3, dtype=torch.float64), dim=-1)
        assert (fp.radiance_eval(x, d) >= 0).all()

    def test_radiance_rejects_nonunit_direction(self):
        fp = init_geometric(0, SMALL)
        x = torch.zeros(1, 3, dtype=torch.float64)
        with pytest.raises(ValueError):
            fp.radiance_eval(x, 2.0 * torch.ones(1, 3, dtype=torch.float64))

    def test_sharpness_positive_and_trainable(self):
        fp = init_geometric(0, SMALL)
        assert fp.s.item() == pytest.approx(10.0)
        assert fp.log_s.requires_grad

    def test_sdf_grad_matches_finite_differences(self):
        fp = init_geometric(1, SMALL)
        x = torch.randn(10, 3, dtype=torch.float64)
        g = fp.sdf_grad(x)
        eps = 1e-6
        for k in range(3):
            dx = torch.zeros(3, dtype=torch.float64)
            dx[k] = eps
            with torch.no_grad():
                fd = (fp.sdf_eval(x + dx) - fp.sdf_eval(x - dx)) / (2 * eps)
            np.testing.assert_allclose(g[:, k].detach(), fd, atol=1e-8)

    def test_normalization_scales_metric_sdf(self):
        norm = SceneNormalization(center=np.array([1.0, 2.0, 3.0]), scale=2.0)
        fp = init_geometric(0, SMALL, norm)
        fp_unit = init_geometric(0, SMALL)
        x_unit = torch.randn(5, 3, dtype=torch.float64)
        x_metric = x_unit * 2.0 + torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        with torch.no_grad():
            a = fp.sdf_eval(x_metric)
            b = fp_unit.sdf_eval(x_unit) * 2.0
        np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-12)

    def test_from_bbox(self):
        n = SceneNormalization.from_bbox([-1.0, -2.0, 0.0], [3.0, 2.0, 4.0])
        np.testing.assert_allclose(n.center, [1.0, 0.0, 2.0])
        assert n.scale == pytest.approx(math.sqrt(4 + 4 + 4))


class TestCheckpointIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        fp = init_geometric(5, SMALL)
        fp.iteration = 123
        p = tmp_path / "f.ckpt"
        save_checkpoint(p, fp)
        fp2, leftover = load_checkpoint(p)
        assert leftover == {}
        assert fp2.iteration == 123
        assert torch.equal(fp.theta(), fp2.theta())
        assert torch.equal(fp.phi(), fp2.phi())
        assert torch.equal(fp.log_s, fp2.log_s)
        x = torch.randn(10, 3, dtype=torch.float64)
        with torch.no_grad():
            assert torch.equal(fp.sdf_eval(x), fp2.sdf_eval(x))

    def test_extra_blocks_roundtrip(self, tmp_path):
        fp = init_geometric(0, SMALL)
        tw = np.arange(12.0)
        p = tmp_path / "f.ckpt"
        save_checkpoint(p, fp, extra_blocks={"twists": tw})
        _, blocks = load_checkpoint(p)
        np.testing.assert_array_equal(blocks["twists"], tw)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_config_preserved(self, tmp_path):
        cfg = FieldConfig(width=48, sdf_hidden=3, radiance_width=24,
                          radiance_hidden=2, feature_dim=8, pe_octaves=5)
        fp = init_geometric(0, cfg)
        p = tmp_path / "f.ckpt"
        save_checkpoint(p, fp)
        fp2, _ = load_checkpoint(p)
        assert fp2.config == cfg
