"""Shared plumbing for the toolkit's management commands.

Exit codes are a stable contract: 0 success, 1 verification failure,
2 usage, IO or parse error.
"""

import json
import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError
from rest_framework.exceptions import ValidationError as SerializerError

from ..artifacts import RunManifest, resolve_config
from ..exceptions import ConvexControlError

logger = logging.getLogger(__name__)

VERIFICATION_FAILED = 1
USAGE_ERROR = 2


def error_message(exc) -> str:
    if isinstance(exc, SerializerError):
        return f'invalid document: {json.dumps(exc.detail, sort_keys=True)}'
    return str(exc)


class ToolkitCommand(BaseCommand):
    """Adds ``--seed``, ``--config`` and ``--out`` and maps toolkit errors onto exit code 2.

    Subclasses implement ``add_command_arguments`` and ``run``; ``run``
    writes its outputs under ``self.out`` and may return a failure message,
    which becomes exit code 1 once the manifest is written.
    """

    config_sections = ()

    def add_arguments(self, parser):
        parser.add_argument('--seed', type=int, help='root seed for every random stream')
        parser.add_argument('--config', help='JSON file of per-section overrides')
        parser.add_argument('--out', required=True, help='output directory')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def command_flags(self, options) -> dict:
        """Section overrides taken from the flags; ``None`` means not given."""
        return {}

    def handle(self, *args, **options):
        try:
            flags = {'seed': options.get('seed'), **self.command_flags(options)}
            self.config = resolve_config(self.config_sections, options.get('config'), flags)
            self.seed = self.config['seed']
            self.out = Path(options['out'])
            self.manifest = RunManifest(self.name, self.config, self.seed)
            failure = self.run(options)
            self.manifest.finish(self.out / 'manifest.json')
        except CommandError:
            raise
        # readers raise ArtifactError; OSError is left to failed writes
        except (ConvexControlError, SerializerError, OSError, ValueError) as exc:
            logger.debug('%s failed', self.name, exc_info=True)
            raise CommandError(error_message(exc), returncode=USAGE_ERROR) from exc
        if failure:
            raise CommandError(failure, returncode=VERIFICATION_FAILED)

    @property
    def name(self) -> str:
        return self.__module__.rsplit('.', 1)[-1]

    def input(self, path) -> str:
        self.manifest.inputs.append(str(path))
        return path

    def output(self, filename) -> Path:
        path = self.out / filename
        self.manifest.add_output(path)
        return path

    def run(self, options):
        raise NotImplementedError
