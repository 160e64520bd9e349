"""
Management command to generate a synthetic training scene
"""

from CompactGaussianSplatting.exceptions import ConfigError
from CompactGaussianSplatting.toy_scenes import make_toy_scene, write_toy_scene

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Render a small synthetic scene (ground truth, cameras, images, init points)'

    def add_arguments(self, parser):
        parser.add_argument('--out', required=True, help='Scene directory to write')
        parser.add_argument('--config', help='Optional JSON scene description')
        parser.add_argument('--mode', choices=['static', 'dynamic'], help='Static or dynamic scene')
        parser.add_argument('--seed', type=int, help='Random seed for the ground truth')
        parser.add_argument('--gaussians', type=int, help='Number of ground-truth Gaussians')
        parser.add_argument('--format', choices=['ppm', 'png'], help='Target image format')

    def run(self, **options):
        spec = self.read_json(options['config']) if options['config'] else {}
        if not isinstance(spec, dict):
            raise ConfigError("Scene description must be a JSON object")
        for key, option in (('mode', 'mode'), ('seed', 'seed'), ('gaussians', 'gaussians'),
                            ('image_format', 'format')):
            if options[option] is not None:
                spec[key] = options[option]
        scene = make_toy_scene(spec)
        out = write_toy_scene(scene, options['out'], spec.get('image_format', 'ppm'))
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {scene.mode} scene with {scene.gaussians.count} Gaussians "
            f"and {len(scene.frames)} frames to {out}"))
