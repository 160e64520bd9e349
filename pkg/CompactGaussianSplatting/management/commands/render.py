"""
Management command to render a trained scene
"""

from pathlib import Path

from CompactGaussianSplatting.scene_model import load_cameras, write_image

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Render a model snapshot or compact container from the given cameras'

    def add_arguments(self, parser):
        parser.add_argument('--model', required=True, help='model.pt snapshot or .c3gs container')
        parser.add_argument('--cameras', required=True, help='Camera JSON')
        parser.add_argument('--out', required=True, help='Output image directory')
        parser.add_argument('--format', choices=['png', 'ppm'], default='png', help='Image format')

    def run(self, **options):
        model = self.load_any_model(options['model'])
        out = Path(options['out'])
        out.mkdir(parents=True, exist_ok=True)
        records = load_cameras(options['cameras'])
        for i, record in enumerate(records):
            image = model.render(record['camera'], record['t'])
            write_image(image, out / f"render_{i:04d}.{options['format']}")
        self.stdout.write(self.style.SUCCESS(f"Rendered {len(records)} views to {out}"))
