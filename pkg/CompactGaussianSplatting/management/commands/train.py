"""
Management command to train a compact Gaussian scene
"""

import json
from pathlib import Path

from django.conf import settings

from CompactGaussianSplatting.exceptions import CompactSplatError, ConfigError
from CompactGaussianSplatting.models import TrainingRun
from CompactGaussianSplatting.scene_model import load_frames, load_points
from CompactGaussianSplatting.trainer import TrainConfig, save_model, train

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Train a scene from cameras, target images and an initial point cloud'

    def add_arguments(self, parser):
        parser.add_argument('--scene', help='Scene directory holding cameras.json and points.json')
        parser.add_argument('--cameras', help='Camera JSON with target image paths')
        parser.add_argument('--points', help='Initial point cloud JSON')
        parser.add_argument('--config', help='TrainConfig JSON, merged over the preset')
        parser.add_argument('--preset', help='Named preset (default: settings DEFAULT_PRESET)')
        parser.add_argument('--mode', choices=['static', 'dynamic'], help='Override the scene mode')
        parser.add_argument('--seed', type=int, help='Override the random seed')
        parser.add_argument('--iterations', type=int, help='Override the iteration count')
        parser.add_argument('--out', required=True, help='Output directory')
        parser.add_argument('--name', help='Run name for the registry')

    def run(self, **options):
        scene = Path(options['scene']) if options['scene'] else None
        cameras = options['cameras'] or (scene / 'cameras.json' if scene else None)
        points = options['points'] or (scene / 'points.json' if scene else None)
        if cameras is None or points is None:
            raise ConfigError("Pass --scene or both --cameras and --points")

        data = self.read_json(options['config']) if options['config'] else {}
        if not isinstance(data, dict):
            raise ConfigError("Training configuration must be a JSON object")
        for key in ('mode', 'seed', 'iterations'):
            if options[key] is not None:
                data[key] = options[key]
        preset = data.pop('preset', None)
        preset = options['preset'] or preset or settings.COMPACT_GS['DEFAULT_PRESET']
        cfg = TrainConfig.from_dict(data, preset)

        frames = load_frames(cameras)
        cloud = load_points(points)
        out = Path(options['out'])
        out.mkdir(parents=True, exist_ok=True)
        (out / 'config.json').write_text(json.dumps(cfg.to_dict(), indent=2))

        run = TrainingRun.objects.create(
            name=options['name'] or out.name, mode=cfg.mode, seed=cfg.seed,
            config=cfg.to_dict(), iterations=cfg.iterations, output_dir=str(out),
        )
        self.stdout.write(f"Training {cfg.mode} scene ({len(frames)} frames, "
                          f"{cloud['points'].shape[0]} points, {cfg.iterations} iterations)")
        try:
            result = train(frames, cloud['points'], cfg, cloud['colors'], cloud['timestamps'],
                           log_path=out / 'train_log.jsonl')
        except CompactSplatError as exc:
            run.mark_failed(exc.message)
            raise

        save_model(result.model, out / 'model.pt')
        (out / 'metrics.json').write_text(json.dumps({'run_id': run.id, **result.final_metrics}, indent=2))
        run.mark_completed(result.final_metrics)
        self.stdout.write(self.style.SUCCESS(
            f"Run {run.id}: {result.model.count} Gaussians, PSNR {result.final_metrics['psnr']:.2f} dB, "
            f"SSIM {result.final_metrics['ssim']:.4f}"))
