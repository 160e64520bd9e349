"""
Shared plumbing for the pipeline's management commands
"""

import json
import logging
import sys
from pathlib import Path

from django.core.management.base import BaseCommand

from CompactGaussianSplatting.compaction_codec import read_container, unpack
from CompactGaussianSplatting.exceptions import CompactSplatError, ConfigError
from CompactGaussianSplatting.trainer import load_model

logger = logging.getLogger(__name__)


class PipelineCommand(BaseCommand):
    """
    Runs ``run()`` and turns pipeline errors into one JSON line on stderr
    plus exit status 1
    """

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except CompactSplatError as exc:
            logger.error(f"{self.__module__.rsplit('.', 1)[-1]} failed: {exc.message}")
            self.stderr.write(json.dumps(exc.to_dict(), default=str))
            sys.exit(1)

    def run(self, **options):
        raise NotImplementedError

    @staticmethod
    def read_json(path):
        try:
            return json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"Cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc

    @staticmethod
    def load_any_model(path):
        """Model snapshot (.pt) or compact container (.c3gs)."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Model file {path} does not exist")
        if path.suffix == '.c3gs':
            return unpack(read_container(path))
        return load_model(path)
