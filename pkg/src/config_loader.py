"""Pipeline configuration: `config/config.yaml` plus environment placeholders and per-run overlays.

Typical usage:
    config = get_config()
    steps = config.get('train.steps', 2000)
    config.merge_file('overrides.yaml')
"""
import os
import yaml
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Union

_PLACEHOLDER = re.compile(r'\$\{([^}]+)\}|\$([A-Za-z_][A-Za-z0-9_]*)')
_TRUE = ('true', 'yes', 'on')
_FALSE = ('false', 'no', 'off')


def _default_config_path() -> Path:
    """`config/config.yaml` next to `src/`."""
    return Path(__file__).resolve().parent.parent / 'config' / 'config.yaml'


def _coerce_scalar(value: str) -> Union[str, int, float, bool]:
    """Re-type a string that spells a bool, int or float; leave anything else alone."""
    lowered = value.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def _expand(value):
    """Fill `${VAR:-default}`, `${VAR}` and `$VAR` placeholders from the environment.

    Unset variables without a default become empty strings. A string that
    changed is re-typed, so `${STEPS:-200}` yields the integer 200.
    """
    if not isinstance(value, str):
        return value

    def lookup(match):
        expression = match.group(1) or match.group(2)
        name, _, fallback = expression.partition(':-')
        return os.environ.get(name.strip(), fallback)

    expanded = _PLACEHOLDER.sub(lookup, value)
    return _coerce_scalar(expanded) if expanded != value else expanded


def _expand_tree(node):
    if isinstance(node, dict):
        return {key: _expand_tree(child) for key, child in node.items()}
    if isinstance(node, list):
        return [_expand_tree(child) for child in node]
    return _expand(node)


def _deep_merge(base: Dict, override: Dict) -> Dict:
    """Copy of `base` with `override` merged in; nested sections merge key by key."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ConfigLoader:
    """Dot-path view over the pipeline configuration.

    The base document is read once; overlay files passed to `merge_file` are
    remembered so `reload` can rebuild the same layered result. JSON overlays
    work because JSON parses as YAML.

    Attributes:
        config_file (Path): The base document.
    """

    def __init__(self, config_file: str = None):
        """
        Args:
            config_file (str, optional): Base YAML document. Defaults to
                `config/config.yaml` of the project.

        Raises:
            FileNotFoundError: If the document is missing.
            ValueError: If it is not a YAML mapping.
        """
        self.config_file = Path(config_file) if config_file is not None else _default_config_path()
        self._overlays: List[Path] = []
        self._config: Dict = {}
        self._load_config()

    def _read_document(self, path: Path) -> Dict:
        if not path.exists():
            raise FileNotFoundError(f"Configuration file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                document = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ValueError(f"Invalid YAML configuration file {path}: {e}")
        if not isinstance(document, dict):
            raise ValueError(f"Configuration file {path} must contain a mapping")
        return _expand_tree(document)

    def _load_config(self) -> None:
        self._config = self._read_document(self.config_file)
        for overlay in self._overlays:
            self._config = _deep_merge(self._config, self._read_document(overlay))

    def merge_file(self, overlay_file: str) -> None:
        """Deep-merge a YAML/JSON file over the current values (the CLI `--config` flag)."""
        overlay_path = Path(overlay_file)
        self._config = _deep_merge(self._config, self._read_document(overlay_path))
        self._overlays.append(overlay_path)
        logging.info(f"Configuration overlay applied from {overlay_path}")

    def reload(self) -> None:
        """Re-read the base document and every overlay; values from `set` are lost."""
        self._load_config()

    def set(self, key_path: str, value: Any) -> None:
        """Set `value` at a dot path such as `describe.budget`, creating sections on the way."""
        *parents, leaf = key_path.split('.')
        section = self._config
        for key in parents:
            if not isinstance(section.get(key), dict):
                section[key] = {}
            section = section[key]
        section[leaf] = value

    def update_multiple(self, updates: Dict[str, Any]) -> None:
        for key_path, value in updates.items():
            self.set(key_path, value)

    def override_seed(self, seed: int) -> List[str]:
        """Replace the `seed` of every section that declares one.

        Returns:
            List[str]: The overridden key paths, e.g. `['scene.seed', 'train.seed']`.
        """
        touched = []
        for section, values in self._config.items():
            if isinstance(values, dict) and 'seed' in values:
                values['seed'] = int(seed)
                touched.append(f"{section}.seed")
        return touched

    def get_config_sections(self) -> List[str]:
        return list(self._config.keys())

    def get(self, key_path: str, default: Any = None, env_override: str = None) -> Any:
        """Value at a dot path.

        Args:
            key_path (str): Dot path, e.g. `train.loss_weights.depth`.
            default (Any, optional): Returned when the path does not resolve.
            env_override (str, optional): Environment variable that wins over
                the document when set. It is read at call time.

        Returns:
            Any: The environment value (re-typed), the document value or `default`.
        """
        if env_override and env_override in os.environ:
            return self._convert_env_value(os.environ[env_override])

        node = self._config
        try:
            for key in key_path.split('.'):
                node = node[key]
        except (KeyError, TypeError):
            return default
        return node

    def _convert_env_value(self, value: str) -> Union[str, int, float, bool]:
        # '1' and '0' read as flags here, unlike placeholders in the document
        if value.lower() in ('1',) + _TRUE:
            return True
        if value.lower() in ('0',) + _FALSE:
            return False
        return _coerce_scalar(value)

    def get_list(self, key_path: str, default: List = None, env_override: str = None) -> List:
        """List at a dot path; an `env_override` variable is split on commas (strings, blanks dropped)."""
        if env_override and env_override in os.environ:
            return [item.strip() for item in os.environ[env_override].split(',') if item.strip()]
        return self.get(key_path, default or [])

    def get_dict(self, key_path: str, default: Dict = None) -> Dict:
        """Shallow copy of the section at a dot path; `{}` when the path holds a scalar."""
        value = self.get(key_path, default or {})
        return dict(value) if isinstance(value, dict) else {}

    def validate_required_keys(self, required_keys: List[str]) -> List[str]:
        """The key paths from `required_keys` that resolve to nothing."""
        return [key for key in required_keys if self.get(key) is None]

    def get_output_folder(self) -> str:
        return self.get('files.output_folder', 'runs')

    def get_cache_directory(self) -> str:
        return self.get('cache.directory', '.cache')

    def get_cache_expiration_days(self) -> int:
        return self.get('cache.expiration_days', 7)

    def get_cache_enabled(self) -> bool:
        return bool(self.get('cache.enabled', True))

    def get_answer_endpoint(self) -> str:
        """Remote answer URL; `ANSWER_ENDPOINT` wins over `backend.endpoint`."""
        return self.get('backend.endpoint', 'http://127.0.0.1:8808/answer', env_override='ANSWER_ENDPOINT')

    def get_answer_timeout(self) -> float:
        return float(self.get('backend.timeout_seconds', 30))


_config_instance = None


def get_config(config_file: str = None) -> ConfigLoader:
    """Process-wide configuration, created on first use.

    Args:
        config_file (str, optional): Only honoured by the first call.
    """
    global _config_instance
    if _config_instance is None:
        _config_instance = ConfigLoader(config_file)
    return _config_instance


def reset_config(config_file: str = None) -> ConfigLoader:
    """Replace the process-wide configuration with a fresh load."""
    global _config_instance
    _config_instance = ConfigLoader(config_file)
    return _config_instance


def reload_config() -> None:
    if _config_instance is not None:
        _config_instance.reload()
