import math

import numpy as np
import pytest
import torch

from sonarfield import se3, sensor
from sonarfield.fields import AnalyticScene, SpherePrimitive
from sonarfield.renderer import (LambertianAnalyticField, SamplingConfig,
                                 corrected_pose, discrete_opacity,
                                 exp_se3_torch, render_image, render_pixel,
                                 render_pixels, transmittance)
from sonarfield.se3 import Pose, Twist


@pytest.fixture
def K():
    return sensor.symmetric_aperture(0.3, 2.0, 40.0, 14.0, 24, 24)


def sphere_field(center=(1.0, 0.0, 0.0), radius=0.3, s=40.0):
    scene = AnalyticScene((SpherePrimitive(np.asarray(center, float), radius),))
    return LambertianAnalyticField(scene, sharpness=s)


class TestExpTorch:
    def test_matches_numpy(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = rng.normal(size=3)
            w = w / np.linalg.norm(w) * rng.uniform(0.0, 3.0)
            t = rng.normal(size=3)
            R, tt = exp_se3_torch(torch.tensor(np.concatenate([w, t])))
            P = se3.exp_se3(Twist(w, t))
            np.testing.assert_allclose(R.numpy(), P.rotation, atol=1e-13)
            np.testing.assert_allclose(tt.numpy(), P.translation, atol=1e-13)

    def test_zero_twist_exact_identity(self):
        R, t = exp_se3_torch(torch.zeros(6, dtype=torch.float64))
        assert torch.equal(R, torch.eye(3, dtype=torch.float64))
        assert torch.equal(t, torch.zeros(3, dtype=torch.float64))

    def test_differentiable_at_zero(self):
        xi = torch.zeros(6, dtype=torch.float64, requires_grad=True)
        R, t = exp_se3_torch(xi)
        (R.sum() + t.sum()).backward()
        assert torch.isfinite(xi.grad).all()
        # translation block gradient is the identity at zero rotation
        np.testing.assert_allclose(xi.grad[3:].numpy(), [1.0, 1.0, 1.0], atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        xi0 = torch.tensor([0.2, -0.1, 0.3, 0.5, -0.4, 0.1], dtype=torch.float64)
        eps = 1e-6
        xi = xi0.clone().requires_grad_(True)
        R, t = exp_se3_torch(xi)
        out = (R * torch.arange(9, dtype=torch.float64).reshape(3, 3)).sum() + (t * 2).sum()
        out.backward()
        for k in range(6):
            d = torch.zeros(6, dtype=torch.float64)
            d[k] = eps
            def f(v):
                R_, t_ = exp_se3_torch(v)
                return ((R_ * torch.arange(9, dtype=torch.float64).reshape(3, 3)).sum()
                        + (t_ * 2).sum()).item()
            fd = (f(xi0 + d) - f(xi0 - d)) / (2 * eps)
            assert xi.grad[k].item() == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_batched(self):
        xi = torch.randn(5, 4, 6, dtype=torch.float64) * 0.3
        R, t = exp_se3_torch(xi)
        assert R.shape == (5, 4, 3, 3) and t.shape == (5, 4, 3)
        R1, t1 = exp_se3_torch(xi[2, 1])
        np.testing.assert_allclose(R[2, 1].numpy(), R1.numpy(), atol=1e-15)
        np.testing.assert_allclose(t[2, 1].numpy(), t1.numpy(), atol=1e-15)


class TestCorrectedPose:
    def test_none_twist_bypasses(self):
        base = Pose(np.eye(3), np.array([1.0, 2.0, 3.0]))
        R, t = corrected_pose(base, None, torch.float64)
        assert torch.equal(t, torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))

    def test_right_multiplication(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=3) * 0.3
        v = rng.normal(size=3)
        base = se3.exp_se3(Twist(rng.normal(size=3) * 0.5, rng.normal(size=3)))
        xi = torch.tensor(np.concatenate([w, v]), dtype=torch.float64)
        R, t = corrected_pose(base, xi, torch.float64)
        expect = se3.apply_correction(base, Twist(w, v))
        np.testing.assert_allclose(R.numpy(), expect.rotation, atol=1e-13)
        np.testing.assert_allclose(t.numpy(), expect.translation, atol=1e-13)


class TestOpacity:
    def test_unit_logit_drop(self):
        # sigmoid(1) -> sigmoid(-1): alpha = 1 - sigmoid(-1)/sigmoid(1) = 1 - e^{-1}
        a = discrete_opacity(torch.tensor(1.0, dtype=torch.float64),
                             torch.tensor(-1.0, dtype=torch.float64), 1.0)
        assert a.item() == pytest.approx(1.0 - math.exp(-1.0), abs=1e-12)

    def test_nonnegative_clamp(self):
        a = discrete_opacity(torch.tensor(-1.0), torch.tensor(1.0), 1.0)
        assert a.item() == 0.0

    def test_range(self):
        rng = np.random.default_rng(2)
        x = torch.tensor(rng.normal(size=100))
        y = torch.tensor(rng.normal(size=100))
        a = discrete_opacity(x, y, 5.0)
        assert (a >= 0).all() and (a <= 1).all()

    def test_transmittance_cumulative(self):
        al = torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64)
        T = transmittance(al)
        np.testing.assert_allclose(T.numpy(), [1.0, 0.5, 0.25], atol=1e-15)

    def test_transmittance_monotone(self):
        al = torch.rand(10, 8, dtype=torch.float64)
        T = transmittance(al)
        assert (T[..., 1:] <= T[..., :-1] + 1e-15).all()
        assert (T[..., 0] == 1.0).all()


class TestRenderPixels:
    def test_intensity_nonnegative(self, K):
        f = sphere_field()
        out = render_pixels(f, Pose.identity(), np.array([[10, 12], [5, 5]]),
                            K, SamplingConfig(n_arc=8, n_ray=16))
        assert (out["intensity"] >= 0).all()

    def test_empty_scene_renders_zero(self, K):
        f = sphere_field(center=(50.0, 0.0, 0.0))  # far outside the fov
        img = render_image(f, Pose.identity(), K, SamplingConfig(n_arc=4, n_ray=8))
        assert img.max() == pytest.approx(0.0, abs=1e-12)

    def test_sphere_appears_at_expected_range(self, K):
        f = sphere_field(center=(1.0, 0.0, 0.0), radius=0.3)
        img = render_image(f, Pose.identity(), K, SamplingConfig(n_arc=16, n_ray=64))
        row_energy = img.sum(axis=1)
        first = np.argmax(row_energy > 0.05 * row_energy.max())
        expected = (0.7 - K.r_min) / K.bin_width
        assert abs(first - expected) <= 2

    def test_occlusion_two_spheres(self, K):
        # a second sphere hidden behind the first contributes ~nothing
        front = AnalyticScene((SpherePrimitive(np.array([0.9, 0.0, 0.0]), 0.25),))
        both = AnalyticScene((SpherePrimitive(np.array([0.9, 0.0, 0.0]), 0.25),
                              SpherePrimitive(np.array([1.6, 0.0, 0.0]), 0.25)))
        cfgs = SamplingConfig(n_arc=16, n_ray=96)
        img_front = render_image(LambertianAnalyticField(front, 60.0),
                                 Pose.identity(), K, cfgs)
        img_both = render_image(LambertianAnalyticField(both, 60.0),
                                Pose.identity(), K, cfgs)
        # rows behind the front sphere's near face stay dark
        far_rows = slice(int((1.3 - K.r_min) / K.bin_width), None)
        assert img_both[far_rows].max() <= 0.05 * img_front.max()
        # front part unchanged
        near_rows = slice(0, int((1.2 - K.r_min) / K.bin_width))
        np.testing.assert_allclose(img_both[near_rows], img_front[near_rows],
                                   atol=1e-6)

    def test_zero_twist_matches_none(self, K):
        f = sphere_field()
        pix = np.array([[10, 12], [14, 6]])
        cfgs = SamplingConfig(n_arc=8, n_ray=16)
        a = render_pixels(f, Pose.identity(), pix, K, cfgs)["intensity"]
        z = torch.zeros(6, dtype=torch.float64)
        b = render_pixels(f, Pose.identity(), pix, K, cfgs, twist=z)["intensity"]
        assert torch.equal(a, b)

    def test_gauge_invariance(self, K):
        # moving the base pose and countering with the twist leaves the image
        # unchanged: T * exp(xi) == (T * exp(xi)) * exp(0)
        f = sphere_field()
        rng = np.random.default_rng(3)
        w = rng.normal(size=3) * 0.1
        v = rng.normal(size=3) * 0.1
        base = Pose.identity()
        moved = se3.apply_correction(base, Twist(w, v))
        pix = np.array([[12, 12]])
        cfgs = SamplingConfig(n_arc=8, n_ray=32)
        xi = torch.tensor(np.concatenate([w, v]), dtype=torch.float64)
        a = render_pixels(f, base, pix, K, cfgs, twist=xi)["intensity"]
        b = render_pixels(f, moved, pix, K, cfgs)["intensity"]
        assert a.item() == pytest.approx(b.item(), rel=1e-10, abs=1e-14)

    def test_jitter_deterministic_given_seed(self, K):
        f = sphere_field()
        pix = np.array([[12, 12]])
        cfgs = SamplingConfig(n_arc=8, n_ray=16, jitter=True)
        a = render_pixels(f, Pose.identity(), pix, K, cfgs,
                          rng=np.random.default_rng(5))["intensity"]
        b = render_pixels(f, Pose.identity(), pix, K, cfgs,
                          rng=np.random.default_rng(5))["intensity"]
        assert torch.equal(a, b)

    def test_record_contributions_sum(self, K):
        f = sphere_field()
        rec = render_pixel(f, Pose.identity(), (12, 12), K,
                           SamplingConfig(n_arc=8, n_ray=32))
        assert rec.intensity == pytest.approx(rec.contributions.sum(), rel=1e-12)
        assert rec.T.shape == rec.alpha.shape == rec.M.shape == (8,)
        assert (rec.T >= 0).all() and (rec.T <= 1).all()

    def test_pose_gradients_flow(self, K):
        f = sphere_field()
        xi = torch.zeros(6, dtype=torch.float64, requires_grad=True)
        # pixels straddling the sphere's front face, where opacity is active
        out = render_pixels(f, Pose.identity(), np.array([[5, 12], [6, 12], [7, 12]]),
                            K, SamplingConfig(n_arc=8, n_ray=32), twist=xi)
        out["intensity"].sum().backward()
        assert xi.grad is not None and torch.isfinite(xi.grad).all()
        assert xi.grad.abs().max() > 0
