"""
Management command to pack a trained scene into a compact container
"""

from pathlib import Path

from CompactGaussianSplatting.compaction_codec import (LEVELS, SizeAccountingObserver, pack,
                                                       write_container)
from CompactGaussianSplatting.models import CompressedArtifact, TrainingRun
from CompactGaussianSplatting.trainer import load_model

from ._base import PipelineCommand


class Command(PipelineCommand):
    help = 'Write a C3GS container from a model snapshot'

    def add_arguments(self, parser):
        parser.add_argument('--model', required=True, help='model.pt snapshot')
        parser.add_argument('--out', required=True, help='Container path (.c3gs)')
        parser.add_argument('--level', choices=LEVELS, default='ours', help='Packing level')
        parser.add_argument('--full-precision', action='store_true',
                            help='Store float streams as float32 instead of binary16')
        parser.add_argument('--run-id', type=int, help='Registry run the model came from')

    def run(self, **options):
        model = load_model(options['model'])
        accounting = SizeAccountingObserver()
        container = pack(model, options['level'], half_precision=not options['full_precision'],
                         observer=accounting)
        out = Path(options['out'])
        out.parent.mkdir(parents=True, exist_ok=True)
        size = write_container(container, out)

        run = TrainingRun.objects.filter(id=options['run_id']).first() if options['run_id'] else None
        CompressedArtifact.objects.create(
            run=run, level=options['level'], path=str(out), size_bytes=size,
            attribute_sizes=accounting.get_stats(), gaussian_count=model.count,
        )
        for attribute, nbytes in accounting.get_stats().items():
            self.stdout.write(f"  {attribute:<12} {nbytes:>12} bytes")
        self.stdout.write(self.style.SUCCESS(
            f"Packed {model.count} Gaussians at level {options['level']}: {size} bytes -> {out}"))
