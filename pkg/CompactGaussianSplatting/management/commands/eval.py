"""
Management command to score a trained scene against its target images
"""

import json
from pathlib import Path

from CompactGaussianSplatting.compaction_codec import read_container
from CompactGaussianSplatting.exceptions import ConfigError
from CompactGaussianSplatting.metrics import EvalReport, evaluate_views, measure_fps
from CompactGaussianSplatting.models import TrainingRun
from CompactGaussianSplatting.scene_model import load_frames
from CompactGaussianSplatting.serializers import EvalReportSerializer

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Report per-view PSNR/SSIM, Gaussian count, storage and FPS'

    def add_arguments(self, parser):
        parser.add_argument('--model', required=True, help='model.pt snapshot or .c3gs container')
        parser.add_argument('--cameras', help='Camera JSON with target image paths')
        parser.add_argument('--scene', help='Scene directory holding cameras.json')
        parser.add_argument('--fps-repeats', type=int, default=0,
                            help='Renders timed for FPS (0 skips the measurement)')
        parser.add_argument('--run-id', type=int, help='Registry run to compare against')
        parser.add_argument('--out', help='Write the JSON report here')

    def run(self, **options):
        if not options['cameras'] and not options['scene']:
            raise ConfigError("Pass --cameras or --scene")
        cameras = options['cameras'] or Path(options['scene']) / 'cameras.json'
        model = self.load_any_model(options['model'])
        frames = load_frames(cameras)
        views = evaluate_views(lambda f: model.render(f.camera, f.timestamp), frames)

        storage = {}
        if str(options['model']).endswith('.c3gs'):
            storage = read_container(options['model']).size_by_attribute()
        fps = 0.0
        if options['fps_repeats'] > 0:
            first = frames[0]
            fps = measure_fps(lambda: model.render(first.camera, first.timestamp),
                              repeats=options['fps_repeats'], warmup=min(10, options['fps_repeats']))

        report = EvalReport(views=views, gaussian_count=model.count, storage=storage, fps=fps,
                            image_size=[frames[0].camera.width, frames[0].camera.height])
        data = EvalReportSerializer(report).data
        text = json.dumps(data, indent=2)
        if options['out']:
            Path(options['out']).write_text(text)
        self.stdout.write(text)

        if options['run_id'] is not None:
            run = TrainingRun.objects.filter(id=options['run_id']).first()
            if run is None or run.final_psnr is None:
                self.stdout.write(self.style.WARNING(f"No finished run {options['run_id']} to compare with"))
            elif run.final_psnr == report.mean_psnr:
                self.stdout.write(self.style.SUCCESS(f"PSNR matches run {run.id} ({run.final_psnr:.4f} dB)"))
            else:
                self.stdout.write(self.style.WARNING(
                    f"PSNR {report.mean_psnr:.4f} dB differs from run {run.id} ({run.final_psnr:.4f} dB)"))
