import json
import math
import tempfile
import unittest
from pathlib import Path

import torch
from django.test import SimpleTestCase

from CompactGaussianSplatting.compaction_codec import pack, unpack
from CompactGaussianSplatting.exceptions import ConfigError, TrainingDivergedError
from CompactGaussianSplatting.metrics import evaluate_views
from CompactGaussianSplatting.scene_model import DTYPE, FrameSample
from CompactGaussianSplatting.toy_scenes import make_toy_scene
from CompactGaussianSplatting.trainer import (ModelState, TrainConfig, Trainer, attribute_vectors, book_shape,
                                              compute_loss, densify_step, exponential_lr, load_model,
                                              optimizer_step, prune_low_opacity, prune_masked,
                                              quantized_attributes, save_model, train, with_attribute)
from CompactGaussianSplatting.volume_mask import MaskState

from .fixtures import SLOW_TESTS, camera

SHORT_RUN = {
    'iterations': 30,
    'rvq_window': 10,
    'rvq_size': 4,
    'rvq_stages': 2,
    'kmeans_iters': 3,
    'densify_from_iter': 10,
    'densify_interval': 10,
    'densify_until_iter': 25,
}


def short_config(**overrides):
    return TrainConfig.from_dict({**SHORT_RUN, **overrides}, preset='toy')


def static_scene():
    return make_toy_scene({'width': 16, 'height': 16, 'views': 4})


def two_gaussian_state():
    identity = torch.tensor([[1.0, 0.0, 0.0, 0.0]] * 2, dtype=DTYPE)
    tensors = {
        'position': torch.tensor([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]], dtype=DTYPE),
        'opacity_logit': torch.zeros(2, dtype=DTYPE),
        'log_scale': torch.log(torch.tensor([[0.001] * 3, [1.0] * 3], dtype=DTYPE)),
        'rotation': identity,
        'mask': torch.zeros(2, dtype=DTYPE),
    }
    return ModelState(tensors, {name: 1e-3 for name in tensors})


class TrainConfigTests(SimpleTestCase):
    def test_preset_is_merged_under_the_document(self):
        cfg = TrainConfig.from_dict({'iterations': 50, 'rvq_window': 10}, preset='toy')
        self.assertEqual(cfg.iterations, 50)
        self.assertEqual(cfg.hash_levels, 8)
        self.assertEqual(cfg.window_start, 40)
        self.assertTrue(cfg.field_colors)

    def test_defaults_without_preset(self):
        cfg = TrainConfig.from_dict({})
        self.assertEqual(cfg.iterations, 30000)
        self.assertEqual(cfg.rvq_stages, 6)

    def test_unknown_key_is_rejected(self):
        with self.assertRaises(ConfigError) as ctx:
            TrainConfig.from_dict({'iteratons': 10})
        self.assertIn('iteratons', ctx.exception.errors)

    def test_unknown_preset_is_rejected(self):
        with self.assertRaises(ConfigError) as ctx:
            TrainConfig.from_dict({}, preset='garden')
        self.assertIn('preset', ctx.exception.errors)

    def test_window_longer_than_training_is_rejected(self):
        with self.assertRaises(ConfigError) as ctx:
            TrainConfig.from_dict({'iterations': 10, 'rvq_window': 20})
        self.assertIn('rvq_window', ctx.exception.errors)

    def test_learning_rates_must_be_positive(self):
        with self.assertRaises(ConfigError) as ctx:
            TrainConfig.from_dict({'mask_lr': 0.0})
        self.assertIn('mask_lr', ctx.exception.errors)

    def test_quantized_attributes_follow_switches(self):
        self.assertEqual(quantized_attributes(TrainConfig()), ['scale', 'rotation'])
        self.assertEqual(quantized_attributes(TrainConfig(mode='dynamic')),
                         ['scale', 'rotation', 'rotation_coeffs', 'temporal_color'])
        self.assertEqual(quantized_attributes(TrainConfig(use_rvq=False)), [])

    def test_preset_codebook_shapes(self):
        expected = {
            'real': {'scale': (64, 6), 'rotation': (64, 6)},
            'synthetic': {'scale': (64, 6), 'rotation': (64, 6)},
            'dynerf': {'scale': (256, 4), 'rotation': (256, 4),
                       'rotation_coeffs': (256, 3), 'temporal_color': (256, 3)},
            'technicolor': {'scale': (256, 5), 'rotation': (256, 5),
                            'rotation_coeffs': (256, 4), 'temporal_color': (256, 4)},
        }
        for preset, shapes in expected.items():
            cfg = TrainConfig.from_dict({}, preset=preset)
            self.assertEqual(quantized_attributes(cfg), list(shapes), preset)
            self.assertEqual({name: book_shape(cfg, name) for name in shapes}, shapes, preset)


class LossTests(SimpleTestCase):
    def test_perfect_render_without_mask_costs_nothing(self):
        image = torch.rand((12, 12, 3), generator=torch.Generator().manual_seed(0), dtype=DTYPE)
        losses = compute_loss(image, image, None, {}, TrainConfig())
        self.assertEqual(float(losses.l1), 0.0)
        self.assertAlmostEqual(float(losses.total), 0.0, places=12)

    def test_mask_term_is_weighted(self):
        image = torch.zeros((12, 12, 3), dtype=DTYPE)
        mask = MaskState.fresh(4, lambda_m=0.1)
        losses = compute_loss(image, image, mask, {}, TrainConfig())
        self.assertAlmostEqual(float(losses.mask), 0.5, places=12)
        self.assertAlmostEqual(float(losses.total), 0.05, places=12)

    def test_l1_and_ssim_are_blended(self):
        target = torch.zeros((12, 12, 3), dtype=DTYPE)
        image = torch.full((12, 12, 3), 0.2, dtype=DTYPE)
        cfg = TrainConfig(lambda_ssim=0.2)
        losses = compute_loss(image, target, None, {}, cfg)
        expected = 0.8 * 0.2 + 0.2 * (1.0 - float(losses.ssim))
        self.assertAlmostEqual(float(losses.total), expected, places=12)
        self.assertEqual(set(losses.to_dict()), {'ren', 'l1', 'ssim', 'mask', 'total'})


class ScheduleTests(SimpleTestCase):
    def test_exponential_decay_endpoints_and_midpoint(self):
        self.assertAlmostEqual(exponential_lr(0, 1e-2, 1e-4, 100), 1e-2, places=15)
        self.assertAlmostEqual(exponential_lr(100, 1e-2, 1e-4, 100), 1e-4, places=15)
        self.assertAlmostEqual(exponential_lr(50, 1e-2, 1e-4, 100), 1e-3, places=15)
        self.assertAlmostEqual(exponential_lr(500, 1e-2, 1e-4, 100), 1e-4, places=15)

    def test_optimizer_step_sets_named_group_rates(self):
        a = torch.nn.Parameter(torch.ones(2, dtype=DTYPE))
        b = torch.nn.Parameter(torch.ones(2, dtype=DTYPE))
        optimizer = torch.optim.Adam([{'params': [a], 'lr': 0.1, 'name': 'a'},
                                      {'params': [b], 'lr': 0.1, 'name': 'b'}])
        (a.sum() + b.sum()).backward()
        optimizer_step(optimizer, {'a': 0.5})
        self.assertEqual([g['lr'] for g in optimizer.param_groups], [0.5, 0.1])
        # first Adam step moves each entry by the learning rate
        self.assertTrue(torch.allclose(a.detach(), torch.full((2,), 0.5, dtype=DTYPE), atol=1e-6))
        self.assertTrue(torch.allclose(b.detach(), torch.full((2,), 0.9, dtype=DTYPE), atol=1e-6))
        self.assertIsNone(a.grad)


class DensifyTests(SimpleTestCase):
    def test_small_gaussians_are_cloned_and_large_ones_split(self):
        state = two_gaussian_state()
        state.grad_accum[:] = 1.0
        state.denom[:] = 1.0
        densify_step(state, TrainConfig(), extent=1.0, generator=torch.Generator().manual_seed(0))
        self.assertEqual(state.count, 4)
        log_scale = state.params['log_scale'][:, 0]
        split_children = torch.isclose(log_scale, torch.full_like(log_scale, -math.log(1.6)))
        self.assertEqual(int(split_children.sum()), 2)
        cloned = torch.isclose(log_scale, torch.full_like(log_scale, math.log(0.001)))
        self.assertEqual(int(cloned.sum()), 2)
        self.assertEqual(tuple(state.params['mask'].shape), (4,))

    def test_cold_gaussians_are_left_alone(self):
        state = two_gaussian_state()
        densify_step(state, TrainConfig(), extent=1.0)
        self.assertEqual(state.count, 2)

    def test_low_opacity_is_pruned(self):
        state = two_gaussian_state()
        state.replace_tensor('opacity_logit', torch.logit(torch.tensor([0.001, 0.5], dtype=DTYPE)))
        prune_low_opacity(state, TrainConfig())
        self.assertEqual(state.count, 1)
        self.assertEqual(float(state.params['position'][0, 0]), 0.5)

    def test_masked_gaussians_are_pruned(self):
        state = two_gaussian_state()
        state.replace_tensor('mask', torch.tensor([10.0, -10.0], dtype=DTYPE))
        prune_masked(state, TrainConfig())
        self.assertEqual(state.count, 1)
        self.assertEqual(float(state.params['position'][0, 0]), 0.0)

    def test_statistics_skip_gaussians_off_screen(self):
        cam = camera()
        target = torch.rand((16, 16, 3), generator=torch.Generator().manual_seed(0), dtype=DTYPE)
        points = torch.tensor([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [10.0, 0.0, 0.0]], dtype=DTYPE)
        trainer = Trainer([FrameSample(cam, target)], points, short_config())
        trainer.state.replace_tensor('log_scale', torch.full((3, 3), math.log(0.05), dtype=DTYPE))
        trainer.step(0)
        self.assertEqual(trainer.state.denom.tolist(), [1.0, 1.0, 0.0])
        self.assertEqual(float(trainer.state.grad_accum[2]), 0.0)


class AttributeTests(SimpleTestCase):
    def test_temporal_colour_is_the_time_scaled_block(self):
        params = {'features': torch.arange(18, dtype=DTYPE).reshape(2, 9)}
        self.assertTrue(torch.equal(attribute_vectors(params, 'temporal_color'), params['features'][:, 6:]))
        replaced = with_attribute(params, 'temporal_color', torch.zeros((2, 3), dtype=DTYPE))
        self.assertTrue(torch.equal(replaced['features'][:, :6], params['features'][:, :6]))
        self.assertTrue(torch.equal(replaced['features'][:, 6:], torch.zeros((2, 3), dtype=DTYPE)))

    def test_rotation_coefficients_are_flattened(self):
        params = {'rotation_motion': torch.ones((3, 1, 4), dtype=DTYPE)}
        self.assertEqual(tuple(attribute_vectors(params, 'rotation_coeffs').shape), (3, 4))


class TrainingRunTests(SimpleTestCase):
    def test_short_static_run_writes_log_and_quantizes(self):
        scene = static_scene()
        with tempfile.TemporaryDirectory() as tmp:
            log_path = Path(tmp) / 'train_log.jsonl'
            result = train(scene.frames, scene.points, short_config(), colors=scene.colors, log_path=log_path)
            lines = [json.loads(line) for line in log_path.read_text().splitlines()]

        self.assertEqual(len(result.history), 30)
        self.assertEqual(len(lines), 31)
        self.assertEqual([record['iter'] for record in lines[:30]], list(range(30)))
        self.assertTrue(lines[-1]['final'])
        self.assertIn('rvq_scale', lines[-2]['losses'])
        self.assertNotIn('rvq_scale', lines[0]['losses'])

        model = result.model
        self.assertEqual(set(model.books), {'scale', 'rotation'})
        book = model.books['scale']
        self.assertTrue(torch.equal(model.gaussians.log_scale, book.reconstruct(book.indices).detach()))
        self.assertEqual(result.final_metrics['N'], model.count)
        self.assertGreater(result.final_metrics['psnr'], 0.0)

    def test_same_seed_same_history(self):
        scene = static_scene()
        cfg = short_config(iterations=12, rvq_window=4)
        first = train(scene.frames, scene.points, cfg, colors=scene.colors)
        second = train(scene.frames, scene.points, cfg, colors=scene.colors)
        self.assertEqual([r['losses'] for r in first.history], [r['losses'] for r in second.history])
        self.assertTrue(torch.equal(first.model.gaussians.position, second.model.gaussians.position))
        self.assertEqual(pack(first.model, 'ours_pp').to_bytes(), pack(second.model, 'ours_pp').to_bytes())

    def test_snapshot_replays_the_same_images(self):
        scene = static_scene()
        result = train(scene.frames, scene.points, short_config(iterations=12, rvq_window=4), colors=scene.colors)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'model.pt'
            save_model(result.model, path)
            loaded = load_model(path)
        cam = scene.frames[0].camera
        self.assertTrue(torch.equal(loaded.render(cam), result.model.render(cam)))
        self.assertEqual(set(loaded.books), set(result.model.books))

    def test_dynamic_snapshot_replays_the_same_images(self):
        scene = make_toy_scene({'mode': 'dynamic', 'width': 12, 'height': 12, 'views': 2, 'timestamps': 3})
        cfg = short_config(mode='dynamic', iterations=8, rvq_window=4, temporal_rvq_size=4,
                           temporal_rvq_stages=2)
        result = train(scene.frames, scene.points, cfg, timestamps=scene.timestamps)
        self.assertEqual(set(result.model.books), {'scale', 'rotation', 'rotation_coeffs', 'temporal_color'})
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'model.pt'
            save_model(result.model, path)
            loaded = load_model(path)
        frame = scene.frames[-1]
        self.assertTrue(torch.equal(loaded.render(frame.camera, frame.timestamp),
                                    result.model.render(frame.camera, frame.timestamp)))

    def test_missing_snapshot_raises(self):
        with self.assertRaises(ConfigError):
            load_model('/nonexistent/model.pt')

    def test_no_frames_raises(self):
        with self.assertRaises(ConfigError):
            Trainer([], torch.zeros((1, 3), dtype=DTYPE), short_config())

    def test_non_finite_loss_stops_training(self):
        cam = camera()
        frame = FrameSample(cam, torch.full((16, 16, 3), float('nan'), dtype=DTYPE))
        trainer = Trainer([frame], torch.zeros((2, 3), dtype=DTYPE) + 0.1 * torch.eye(3, dtype=DTYPE)[:2],
                          short_config())
        with self.assertRaises(TrainingDivergedError) as ctx:
            trainer.step(0)
        self.assertEqual(ctx.exception.iteration, 0)



def mean_psnr(model, frames):
    views = evaluate_views(lambda f: model.render(f.camera, f.timestamp), frames)
    return sum(v.psnr for v in views) / len(views)


@unittest.skipUnless(SLOW_TESTS, "set COMPACT_GS_SLOW_TESTS=1 to run full trainings")
class ToyReproductionTests(SimpleTestCase):
    def test_static_scene_is_recovered_and_survives_packing(self):
        scene = make_toy_scene()
        result = train(scene.frames, scene.points, TrainConfig.from_dict({}, preset='toy'), colors=scene.colors)
        self.assertGreaterEqual(result.final_metrics['psnr'], 35.0)
        packed = unpack(pack(result.model, 'ours_pp'))
        self.assertLess(result.final_metrics['psnr'] - mean_psnr(packed, scene.frames), 0.1)

    def test_dynamic_scene_is_recovered_and_survives_packing(self):
        scene = make_toy_scene({'mode': 'dynamic'})
        cfg = TrainConfig.from_dict({'mode': 'dynamic', 'temporal_rvq_size': 16}, preset='toy')
        result = train(scene.frames, scene.points, cfg, timestamps=scene.timestamps)
        self.assertGreaterEqual(result.final_metrics['psnr'], 30.0)
        packed = unpack(pack(result.model, 'ours_pp'))
        self.assertLess(result.final_metrics['psnr'] - mean_psnr(packed, scene.frames), 0.1)

    def test_mask_pressure_removes_gaussians(self):
        scene = make_toy_scene({'gaussians': 12})
        counts, psnrs = [], []
        for lambda_mask in (1e-4, 5e-4, 4e-3):
            cfg = TrainConfig.from_dict({'lambda_mask': lambda_mask}, preset='toy')
            result = train(scene.frames, scene.points, cfg, colors=scene.colors)
            counts.append(result.final_metrics['N'])
            psnrs.append(result.final_metrics['psnr'])
        self.assertEqual(counts, sorted(counts, reverse=True))
        self.assertLessEqual(counts[-1], 0.7 * counts[0])
        self.assertLessEqual(psnrs[0] - psnrs[-1], 1.0)
