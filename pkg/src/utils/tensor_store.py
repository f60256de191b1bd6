"""Tensor directory format shared by teacher renders and field checkpoints.

A tensor directory holds a `manifest.json` listing entries
{name, dtype: "f32", shape, file}; each file is raw little-endian float32 in
row-major order. Extra JSON metadata rides along under the `meta` key.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
FORMAT_VERSION = 1


def _file_name(name: str) -> str:
    return name.replace('/', '__').replace('.', '_') + '.f32'


def save_tensors(directory, tensors: Mapping[str, np.ndarray], meta: Dict = None) -> Path:
    """Write arrays to a tensor directory.

    Args:
        directory (str | Path): Target directory, created if missing.
        tensors (Mapping[str, np.ndarray]): Arrays keyed by entry name.
        meta (Dict, optional): JSON-serializable metadata stored in the manifest.

    Returns:
        Path: The manifest path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries = []
    for name, array in tensors.items():
        data = np.ascontiguousarray(np.asarray(array, dtype='<f4'))
        file_name = _file_name(name)
        data.tofile(directory / file_name)
        entries.append({
            'name': name,
            'dtype': 'f32',
            'shape': [int(s) for s in data.shape],
            'file': file_name,
        })

    manifest = {'version': FORMAT_VERSION, 'entries': entries, 'meta': meta or {}}
    manifest_path = directory / MANIFEST_NAME
    with open(manifest_path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    logger.debug(f"Wrote {len(entries)} tensors to {directory}")
    return manifest_path


def load_tensors(directory) -> Tuple[Dict[str, np.ndarray], Dict]:
    """Read every entry of a tensor directory.

    Args:
        directory (str | Path): Directory containing `manifest.json`.

    Returns:
        Tuple[Dict[str, np.ndarray], Dict]: Arrays keyed by name (float32) and
            the manifest metadata.

    Raises:
        FileNotFoundError: If the manifest is missing.
        InvalidArgumentError: If an entry is malformed or truncated.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"No tensor manifest in {directory}")

    with open(manifest_path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)

    tensors = {}
    for entry in manifest.get('entries', []):
        if entry.get('dtype') != 'f32':
            raise InvalidArgumentError(f"Unsupported dtype {entry.get('dtype')!r} for {entry.get('name')}")
        shape = tuple(int(s) for s in entry['shape'])
        data = np.fromfile(directory / entry['file'], dtype='<f4')
        expected = int(np.prod(shape)) if shape else 1
        if data.size != expected:
            raise InvalidArgumentError(
                f"Tensor {entry['name']} holds {data.size} values, manifest says {expected}"
            )
        tensors[entry['name']] = data.reshape(shape).astype(np.float32)

    return tensors, manifest.get('meta', {})
