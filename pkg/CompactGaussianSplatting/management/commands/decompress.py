"""
Management command to expand a compact container into a model snapshot
"""

from CompactGaussianSplatting.compaction_codec import read_container, unpack
from CompactGaussianSplatting.trainer import save_model

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Decode a C3GS container into a model.pt snapshot'

    def add_arguments(self, parser):
        parser.add_argument('--container', required=True, help='Container path (.c3gs)')
        parser.add_argument('--out', required=True, help='Snapshot path (.pt)')

    def run(self, **options):
        model = unpack(read_container(options['container']))
        save_model(model, options['out'])
        self.stdout.write(self.style.SUCCESS(
            f"Decoded {model.count} Gaussians ({model.mode}) to {options['out']}"))
