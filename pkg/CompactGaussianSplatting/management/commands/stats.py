"""
Management command to print the storage table of a compact container
"""

import json

from CompactGaussianSplatting.compaction_codec import read_container, storage_report
from CompactGaussianSplatting.trainer import load_model

from ._base import PipelineCommand

ATTRIBUTE_ORDER = ['position', 'opacity', 'scale', 'rotation', 'color', 'temporal',
                   'field_hash', 'field_mlp', 'phi']


class Command(PipelineCommand):
    help = 'Per-attribute storage of a container next to the float32 baseline'

    def add_arguments(self, parser):
        parser.add_argument('--container', required=True, help='Container path (.c3gs)')
        parser.add_argument('--model', help='model.pt snapshot, to add codebook stage statistics')
        parser.add_argument('--json', action='store_true', help='Print the report as JSON')

    def run(self, **options):
        report = storage_report(read_container(options['container']))
        if options['model']:
            model = load_model(options['model'])
            report['codebooks'] = {name: book.stage_stats() for name, book in model.books.items()}
        if options['json']:
            self.stdout.write(json.dumps(report, indent=2))
            return

        n = report['count']
        self.stdout.write(f"{report['mode']} scene, level {report['level']}, {n} Gaussians")
        self.stdout.write(f"{'attribute':<12} {'bytes':>12} {'MB':>10} {'baseline MB':>12}")
        baseline = report['baseline_per_attribute']
        for name in ATTRIBUTE_ORDER:
            if name not in report['attributes'] and name not in baseline:
                continue
            nbytes = report['attributes'].get(name, 0)
            self.stdout.write(f"{name:<12} {nbytes:>12} {nbytes / 1e6:>10.4f} "
                              f"{baseline.get(name, 0) / 1e6:>12.4f}")
        self.stdout.write(f"{'header':<12} {report['header']:>12}")
        self.stdout.write(self.style.SUCCESS(
            f"{'total':<12} {report['total']:>12} {report['total'] / 1e6:>10.4f} "
            f"{report['baseline'] / 1e6:>12.4f}"))
        for name, stages in report.get('codebooks', {}).items():
            for stage in stages:
                self.stdout.write(f"  {name} stage {stage['stage']}: {stage['used_codes']} codes used, "
                                  f"entropy {stage['entropy_bits']:.3f} bits, "
                                  f"mean norm {stage['mean_code_norm']:.5f}")
