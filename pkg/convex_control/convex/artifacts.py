"""Files written and read by the management commands.

Every write goes to a temporary file in the target directory and is then
renamed over the destination, so readers never see half a file.
"""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import pandas as pd
from django.conf import settings

from . import __version__
from .exceptions import ArtifactError, InvalidParameter
from .serializers import RunManifestSerializer, dump_model, load_model

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = '%.17g'


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug('wrote %s', path)
    return path


def write_json(path, data) -> Path:
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + '\n')


def _read_failure(path, exc) -> ArtifactError:
    if isinstance(exc, FileNotFoundError):
        return ArtifactError(f'file not found: {path}')
    if isinstance(exc, OSError):
        return ArtifactError(f'cannot read {path}: {exc.strerror or exc}')
    return ArtifactError(f'cannot parse {path}: {exc}')


def read_json(path):
    try:
        with open(path, encoding='utf-8') as handle:
            return json.load(handle)
    except (OSError, ValueError) as exc:
        raise _read_failure(path, exc) from exc


def write_csv(path, frame: pd.DataFrame) -> Path:
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator='\n')
    return atomic_write_text(path, buffer.getvalue())


def read_csv(path) -> pd.DataFrame:
    # pandas parser errors, empty files and bad encodings are all ValueErrors
    try:
        return pd.read_csv(path, float_precision='round_trip')
    except (OSError, ValueError) as exc:
        raise _read_failure(path, exc) from exc


def save_model(path, model) -> Path:
    return write_json(path, dump_model(model))


def load_model_file(path):
    return load_model(read_json(path))


@dataclass
class RunManifest:
    """What a command ran with and what it wrote.

    ``wall_clock`` is informational; every other field, and every output
    it lists, is a function of the command, config and seed.
    """

    command: str
    config: dict
    seed: int
    version: str = __version__
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    wall_clock: float = 0.0
    _started: float = field(default_factory=time.perf_counter, repr=False)

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def finish(self, path) -> Path:
        self.wall_clock = time.perf_counter() - self._started
        data = {k: v for k, v in asdict(self).items() if not k.startswith('_')}
        serializer = RunManifestSerializer(data=data)
        serializer.is_valid(raise_exception=True)
        return write_json(path, serializer.validated_data)


def resolve_config(sections: Sequence[str], config_path=None, flags: dict | None = None) -> dict:
    """Effective config: flags over the ``--config`` file over ``settings.CONVEX_CONTROL``.

    ``flags`` maps a section name (or ``'seed'``) to overrides; ``None``
    values mean "not given".
    """
    defaults = settings.CONVEX_CONTROL
    effective = {'seed': defaults['seed']}
    for name in sections:
        if name not in defaults:
            raise InvalidParameter(f'unknown config section {name!r}')
        effective[name] = dict(defaults[name])
    if config_path:
        from_file = read_json(config_path)
        if not isinstance(from_file, dict):
            raise InvalidParameter('config file must hold a JSON object')
        for name, values in from_file.items():
            if name == 'seed':
                effective['seed'] = int(values)
            elif name in effective and isinstance(values, dict):
                effective[name].update(values)
            else:
                raise InvalidParameter(f'config file section {name!r} does not apply to this command')
    for name, values in (flags or {}).items():
        if name == 'seed':
            if values is not None:
                effective['seed'] = int(values)
        else:
            effective.setdefault(name, {}).update({k: v for k, v in values.items() if v is not None})
    return effective
