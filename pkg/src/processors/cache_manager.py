import json
import shutil
import hashlib
import logging
from pathlib import Path
from datetime import datetime
from typing import Dict, Optional, Sequence
from config_loader import get_config
from processors.scenegen import CameraPose, SceneSpec, TeacherOutputs


class TeacherCache:
    """
    Caches rendered teacher views so repeated runs on the same scene skip the render.

    Each entry is a directory named after the cache key holding the tensor
    directory written by `TeacherOutputs.save` plus an `entry.json` with the
    creation timestamp. Entries older than the configured expiration are
    removed on lookup, and unreadable entries are treated as misses.

    Attributes:
        config: Configuration object containing cache settings
        cache_dir (Path): Directory where cache entries are stored
        logger (logging.Logger): Logger instance for this class

    Example:
        >>> cache = TeacherCache()
        >>> key = cache.generate_cache_key(spec, poses, render_settings)
        >>> teacher = cache.get_cached_teacher(key)
        >>> if teacher is None:
        ...     teacher = render_teacher_views(oracle, poses)
        ...     cache.save_cached_teacher(key, teacher)
    """

    ENTRY_FILE = 'entry.json'

    def __init__(self, cache_dir: str = None, config=None):
        """
        Initialize the TeacherCache with optional custom cache directory.

        Args:
            cache_dir (str, optional): Custom cache directory path. If None, uses
                the directory from configuration. Defaults to None.
            config (ConfigLoader, optional): Configuration to read. Defaults to
                the global configuration.

        Note:
            If the specified cache directory cannot be created, falls back to
            the current working directory.
        """
        self.config = config or get_config()
        self.cache_dir = Path(cache_dir or self.config.get_cache_directory()) / 'teacher'
        self.enabled = self.config.get_cache_enabled()
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self._ensure_cache_directory()

    def _ensure_cache_directory(self):
        try:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            self.logger.debug(f"Cache directory ensured: {self.cache_dir}")
        except OSError as e:
            self.logger.warning(f"Could not create cache directory {self.cache_dir}: {e}")
            self.cache_dir = Path(".")
            self.logger.info(f"Falling back to current directory for cache: {self.cache_dir}")

    def generate_cache_key(self, spec: SceneSpec, poses: Sequence[CameraPose], settings: Dict = None) -> str:
        """
        Generate a deterministic key from the scene, the camera poses and the render settings.

        Args:
            spec (SceneSpec): Scene being rendered.
            poses (Sequence[CameraPose]): Views being rendered.
            settings (Dict, optional): Render settings that change the output
                (token grid, erosion, density).

        Returns:
            str: A 16-character hexadecimal cache key
        """
        cache_input = json.dumps({
            'scene': spec.model_dump(mode='json'),
            'poses': [pose.to_dict() for pose in poses],
            'settings': settings or {},
        }, sort_keys=True)
        cache_key = hashlib.sha256(cache_input.encode()).hexdigest()[:16]
        self.logger.debug(f"Generated cache key {cache_key} for {len(poses)} views")
        return cache_key

    def get_cached_teacher(self, cache_key: str) -> Optional[TeacherOutputs]:
        """
        Retrieve cached teacher outputs if they exist and are still valid.

        Args:
            cache_key (str): The cache key to look up

        Returns:
            Optional[TeacherOutputs]: The cached outputs, or None on a miss, an
            expired entry or a corrupted entry.
        """
        if not self.enabled:
            return None
        entry_dir = self.cache_dir / cache_key
        entry_file = entry_dir / self.ENTRY_FILE
        if not entry_file.exists():
            self.logger.debug(f"No cache entry found for key: {cache_key}")
            return None

        try:
            with open(entry_file, 'r', encoding='utf-8') as f:
                entry = json.load(f)
            cache_time = datetime.fromisoformat(entry.get('timestamp', ''))
            age_days = (datetime.now() - cache_time).days
            if age_days < self.config.get_cache_expiration_days():
                teacher = TeacherOutputs.load(entry_dir)
                self.logger.info(f"Using cached teacher views for {cache_key[:8]}... ({teacher.n_views} views)")
                return teacher
            shutil.rmtree(entry_dir, ignore_errors=True)
            self.logger.info(f"Expired cache removed for {cache_key[:8]} (age: {age_days} days)")
        except (json.JSONDecodeError, KeyError, ValueError, OSError) as e:
            shutil.rmtree(entry_dir, ignore_errors=True)
            self.logger.warning(f"Corrupted cache removed for {cache_key[:8]}: {e}")
        return None

    def save_cached_teacher(self, cache_key: str, teacher: TeacherOutputs) -> None:
        """
        Save teacher outputs under `cache_key` with the current timestamp.

        Errors are logged and swallowed; a failed save only costs a re-render.
        """
        if not self.enabled:
            return
        entry_dir = self.cache_dir / cache_key
        try:
            teacher.save(entry_dir)
            with open(entry_dir / self.ENTRY_FILE, 'w', encoding='utf-8') as f:
                json.dump({'timestamp': datetime.now().isoformat(), 'views': teacher.n_views}, f, indent=2)
            self.logger.info(f"Cached teacher views for {cache_key[:8]}...")
        except OSError as e:
            self.logger.error(f"Could not save cache for {cache_key[:8]}: {e}")

    def clear_cache(self) -> Dict:
        """
        Remove every cache entry and return statistics.

        Returns:
            Dict[str, Any]: Statistics of the clearing operation:
                - entries_removed (int): number of entries removed
                - space_freed_mb (float): freed space in megabytes (rounded to 2 decimals)
        """
        self.logger.info("Clearing all cached teacher views")
        if not self.cache_dir.exists():
            self.logger.info("Cache directory doesn't exist - nothing to clear")
            return {'entries_removed': 0, 'space_freed_mb': 0}

        entries_removed = 0
        total_size_freed = 0
        for entry_dir in self.cache_dir.iterdir():
            if not entry_dir.is_dir():
                continue
            try:
                size = sum(p.stat().st_size for p in entry_dir.rglob('*') if p.is_file())
                shutil.rmtree(entry_dir)
                entries_removed += 1
                total_size_freed += size
                self.logger.debug(f"Removed cache entry: {entry_dir.name}")
            except OSError as e:
                self.logger.error(f"Could not remove cache entry {entry_dir}: {e}")

        space_freed_mb = round(total_size_freed / (1024 * 1024), 2)
        self.logger.info(f"Cache cleared: {entries_removed} entries removed, {space_freed_mb} MB freed")
        return {'entries_removed': entries_removed, 'space_freed_mb': space_freed_mb}

    def get_cache_info(self) -> Dict:
        """
        Get information about cached entries, newest first.

        Returns:
            Dict: Dictionary containing cache information with keys:
                - cache_directory (str): Path to the cache directory
                - cache_entries_count (int): Number of entries
                - total_size_mb (float): Total size of all entries in MB
                - entries (List[Dict]): name, size_bytes, modified, age_days per entry
        """
        self.logger.debug("Getting cache information")
        if not self.cache_dir.exists():
            return {'cache_directory': str(self.cache_dir), 'cache_entries_count': 0, 'total_size_mb': 0,
                    'entries': []}

        entries = []
        total_size = 0
        for entry_dir in self.cache_dir.iterdir():
            if not entry_dir.is_dir():
                continue
            try:
                size = sum(p.stat().st_size for p in entry_dir.rglob('*') if p.is_file())
                modified = entry_dir.stat().st_mtime
                entries.append({
                    'name': entry_dir.name,
                    'size_bytes': size,
                    'modified': modified,
                    'age_days': (datetime.now().timestamp() - modified) / (24 * 60 * 60),
                })
                total_size += size
            except OSError as e:
                self.logger.warning(f"Could not get info for cache entry {entry_dir}: {e}")

        entries.sort(key=lambda x: x['modified'], reverse=True)
        cache_info = {
            'cache_directory': str(self.cache_dir),
            'cache_entries_count': len(entries),
            'total_size_mb': round(total_size / (1024 * 1024), 2),
            'entries': entries,
        }
        self.logger.debug(f"Cache info: {len(entries)} entries, {cache_info['total_size_mb']} MB")
        return cache_info
