import math

import torch
from django.test import SimpleTestCase

from CompactGaussianSplatting.dyn_attributes import (DynGaussianSet, PhiMlp, decode_color, feature_at,
                                                     position_at, render_dynamic, rotation_at,
                                                     temporal_opacity, time_covariance)
from CompactGaussianSplatting.scene_model import DTYPE
from CompactGaussianSplatting.splat_renderer import build_covariance, pixel_ray_directions, rasterize

from .fixtures import camera, random_dynamic, seeded_phi


def zero_phi():
    phi = seeded_phi()
    with torch.no_grad():
        for p in phi.parameters():
            p.zero_()
    return phi


def one_gaussian(t_center=0.25, t_scale=2.0):
    return DynGaussianSet.from_points(torch.zeros((1, 3), dtype=DTYPE), torch.tensor([t_center], dtype=DTYPE),
                                      torch.full((1, 3), 0.2, dtype=DTYPE), opacity=0.6, t_scale=t_scale)


class MotionTests(SimpleTestCase):
    def test_canonical_attributes_at_temporal_centre(self):
        dyn = random_dynamic(5)
        dyn.t_center = torch.full((5,), 0.5, dtype=DTYPE)
        self.assertTrue(torch.equal(position_at(dyn, 0.5), dyn.position))
        self.assertTrue(torch.equal(rotation_at(dyn, 0.5), dyn.rotation))

    def test_position_follows_cubic_polynomial(self):
        dyn = one_gaussian()
        dyn.motion[0] = torch.eye(3, dtype=DTYPE)
        self.assertTrue(torch.allclose(position_at(dyn, 0.75)[0],
                                       torch.tensor([0.5, 0.25, 0.125], dtype=DTYPE), atol=1e-15))

    def test_rotation_is_linear_in_time(self):
        dyn = one_gaussian()
        dyn.rotation_motion[0, 0] = torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=DTYPE)
        self.assertTrue(torch.allclose(rotation_at(dyn, 0.0)[0],
                                       torch.tensor([1.0, -0.25, 0.0, 0.0], dtype=DTYPE), atol=1e-15))

    def test_covariance_uses_the_normalised_time_rotation(self):
        dyn = random_dynamic(5, seed=3)
        sigma = time_covariance(dyn, 0.7)
        self.assertTrue(torch.allclose(sigma, sigma.transpose(-1, -2), atol=1e-15))
        unit = rotation_at(dyn, 0.7)
        unit = unit / torch.linalg.vector_norm(unit, dim=-1, keepdim=True)
        self.assertTrue(torch.allclose(sigma, build_covariance(dyn.scale, unit), atol=1e-12))
        eigenvalues = torch.linalg.eigvalsh(sigma)
        expected = torch.sort(dyn.scale ** 2, dim=-1).values
        self.assertTrue(torch.allclose(eigenvalues, expected, atol=1e-12))

    def test_shape_mismatch_raises(self):
        dyn = one_gaussian()
        with self.assertRaises(ValueError):
            DynGaussianSet(**{**{name: getattr(dyn, name) for name in dyn.attribute_names()},
                              'motion': torch.zeros((1, 2, 3), dtype=DTYPE)})


class TemporalOpacityTests(SimpleTestCase):
    def test_peaks_at_temporal_centre(self):
        dyn = one_gaussian()
        self.assertAlmostEqual(float(temporal_opacity(dyn, 0.25)[0]), 0.6, places=12)

    def test_radial_basis_falloff(self):
        dyn = one_gaussian(t_scale=2.0)
        before = float(temporal_opacity(dyn, 0.0)[0])
        after = float(temporal_opacity(dyn, 0.5)[0])
        self.assertAlmostEqual(before, 0.6 * math.exp(-2.0 * 0.0625), places=12)
        self.assertAlmostEqual(before, after, places=12)
        self.assertLess(float(temporal_opacity(dyn, 1.0)[0]), before)


class FeatureTests(SimpleTestCase):
    def test_time_scaled_channels_vanish_at_centre(self):
        dyn = random_dynamic(4)
        dyn.t_center = torch.full((4,), 0.3, dtype=DTYPE)
        features = feature_at(dyn, 0.3)
        self.assertTrue(torch.equal(features[:, :6], dyn.features[:, :6]))
        self.assertTrue(torch.equal(features[:, 6:], torch.zeros((4, 3), dtype=DTYPE)))

    def test_field_features_need_spatial_part(self):
        dyn = random_dynamic(3, field_features=True)
        with self.assertRaises(ValueError):
            feature_at(dyn, 0.5)
        spatial = torch.ones((3, 6), dtype=DTYPE)
        self.assertEqual(tuple(feature_at(dyn, 0.5, spatial).shape), (3, 9))

    def test_zero_head_decodes_the_base_colour(self):
        features = torch.rand((4, 5, 9), generator=torch.Generator().manual_seed(0), dtype=DTYPE)
        directions = torch.zeros((4, 5, 3), dtype=DTYPE)
        self.assertTrue(torch.equal(decode_color(features, directions, zero_phi()), features[..., :3]))

    def test_coverage_scales_only_the_view_term(self):
        features = torch.rand((4, 5, 9), generator=torch.Generator().manual_seed(1), dtype=DTYPE)
        directions = torch.nn.functional.normalize(torch.randn((4, 5, 3), dtype=DTYPE), dim=-1)
        phi = seeded_phi()
        coverage = torch.full((4, 5, 1), 0.25, dtype=DTYPE)
        full = decode_color(features, directions, phi)
        scaled = decode_color(features, directions, phi, coverage=coverage)
        self.assertTrue(torch.allclose(scaled - features[..., :3], 0.25 * (full - features[..., :3]), atol=1e-14))


class RenderDynamicTests(SimpleTestCase):
    STEP = 1e-4

    def test_still_gaussian_renders_like_a_static_one(self):
        cam = camera(width=12, height=12)
        dyn = one_gaussian(t_center=0.5)
        dyn.features[0, :3] = torch.tensor([0.9, 0.4, 0.1], dtype=DTYPE)
        out = render_dynamic(dyn, cam, 0.5, zero_phi())
        expected = rasterize(dyn.position, dyn.scale, dyn.rotation, dyn.opacity, dyn.features[:, :3], cam,
                             background=torch.zeros(3, dtype=DTYPE)).image
        self.assertTrue(torch.allclose(out.image, expected, rtol=0.0, atol=1e-12))
        self.assertEqual(tuple(out.features.shape), (12, 12, 9))

    def test_uncovered_pixels_show_the_background(self):
        cam = camera(width=12, height=12)
        dyn = one_gaussian(t_center=0.5)
        phi = seeded_phi()
        background = torch.tensor([0.2, 0.5, 0.7], dtype=DTYPE)
        directions = pixel_ray_directions(cam)
        # the head does not map a zero feature to zero
        self.assertGreater(float(phi(torch.zeros((12, 12, 6), dtype=DTYPE), directions).abs().max()), 1e-6)
        out = render_dynamic(dyn, cam, 0.5, phi, opacity=torch.zeros(1, dtype=DTYPE), background=background)
        self.assertTrue(torch.equal(out.splat.transmittance, torch.ones((12, 12), dtype=DTYPE)))
        self.assertTrue(torch.allclose(out.image, background.expand(12, 12, 3), rtol=0.0, atol=1e-15))

    def test_still_gaussian_over_a_coloured_background(self):
        cam = camera(width=12, height=12)
        dyn = one_gaussian(t_center=0.5)
        dyn.features[0, :3] = torch.tensor([0.9, 0.4, 0.1], dtype=DTYPE)
        background = torch.tensor([0.2, 0.5, 0.7], dtype=DTYPE)
        out = render_dynamic(dyn, cam, 0.5, zero_phi(), background=background)
        expected = rasterize(dyn.position, dyn.scale, dyn.rotation, dyn.opacity, dyn.features[:, :3], cam,
                             background=background).image
        self.assertTrue(torch.allclose(out.image, expected, rtol=0.0, atol=1e-12))

    def test_head_sees_unit_ray_directions(self):
        directions = pixel_ray_directions(camera(width=6, height=6))
        self.assertEqual(tuple(directions.shape), (6, 6, 3))
        norms = torch.linalg.vector_norm(directions, dim=-1)
        self.assertTrue(torch.allclose(norms, torch.ones((6, 6), dtype=DTYPE), atol=1e-14))

    def test_motion_gradient_matches_finite_differences(self):
        cam = camera(width=10, height=10)
        dyn = random_dynamic(3, seed=2)
        torch.manual_seed(1)
        phi = PhiMlp(layers=0)
        d_image = torch.randn((10, 10, 3), generator=torch.Generator().manual_seed(4), dtype=DTYPE)

        motion = dyn.motion.clone().requires_grad_(True)
        dyn.motion = motion
        (render_dynamic(dyn, cam, 0.8, phi).image * d_image).sum().backward()
        analytic = motion.grad.reshape(-1)
        base = motion.detach().clone()

        def loss(value):
            dyn.motion = value
            with torch.no_grad():
                return float((render_dynamic(dyn, cam, 0.8, phi).image * d_image).sum())

        flat = base.reshape(-1)
        for i in range(6):
            plus, minus = flat.clone(), flat.clone()
            plus[i] += self.STEP
            minus[i] -= self.STEP
            numeric = (loss(plus.reshape(base.shape)) - loss(minus.reshape(base.shape))) / (2 * self.STEP)
            g = float(analytic[i])
            if abs(g) > 1e-3:
                self.assertLess(abs(numeric - g) / abs(g), 1e-3, f"entry {i}: {numeric} vs {g}")
            else:
                self.assertLess(abs(numeric - g), 1e-6, f"entry {i}: {numeric} vs {g}")
