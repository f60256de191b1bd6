"""Run manifests written next to every CLI output for reproducibility."""
import json
import logging
import platform
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Dict

logger = logging.getLogger(__name__)

TRACKED_PACKAGES = ('numpy', 'scipy', 'torch', 'scikit-learn', 'pandas', 'pydantic', 'PyYAML', 'Flask', 'requests')


def package_versions() -> Dict[str, str]:
    """Collect installed versions of the packages that shape numerical results."""
    versions = {'python': platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = 'missing'
    return versions


def write_run_manifest(output_dir, command: str, arguments: Dict, seeds: Dict, inputs: Dict = None) -> Path:
    """Write `run_manifest.json` into `output_dir`.

    Args:
        output_dir (str | Path): Folder receiving the command outputs.
        command (str): CLI subcommand name.
        arguments (Dict): Parsed CLI arguments.
        seeds (Dict): Seeds in effect, keyed by config section.
        inputs (Dict, optional): Input artifact paths.

    Returns:
        Path: Path of the written manifest.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        'command': command,
        'arguments': {k: (str(v) if isinstance(v, Path) else v) for k, v in arguments.items()},
        'inputs': {k: str(v) for k, v in (inputs or {}).items()},
        'seeds': seeds,
        'versions': package_versions(),
        'argv': sys.argv,
        'created_utc': datetime.now(timezone.utc).isoformat(),
    }
    path = output_dir / 'run_manifest.json'
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, default=str)
    logger.debug(f"Run manifest written to {path}")
    return path
