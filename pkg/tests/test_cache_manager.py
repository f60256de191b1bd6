import json
import os
import time
from datetime import datetime, timedelta

import numpy as np
import pytest

from processors.cache_manager import TeacherCache
from processors.scenegen import render_teacher_views


@pytest.fixture
def teacher(two_objects, poses, config):
    _, oracle = two_objects
    return render_teacher_views(oracle, poses[:2], config)


def test_cache_key_is_deterministic_and_sensitive(two_objects, poses):
    spec, _ = two_objects
    cache = TeacherCache()
    key = cache.generate_cache_key(spec, poses, {'token_grid': 8})
    assert len(key) == 16
    assert key == cache.generate_cache_key(spec, poses, {'token_grid': 8})
    assert key != cache.generate_cache_key(spec, poses[:3], {'token_grid': 8})
    assert key != cache.generate_cache_key(spec, poses, {'token_grid': 27})


def test_saved_teacher_is_returned(two_objects, poses, teacher, config, tmp_path):
    spec, _ = two_objects
    cache = TeacherCache()
    assert cache.cache_dir == tmp_path / 'cache' / 'teacher'
    key = cache.generate_cache_key(spec, poses[:2])
    assert cache.get_cached_teacher(key) is None
    cache.save_cached_teacher(key, teacher)
    cached = cache.get_cached_teacher(key)
    assert cached.n_views == 2
    np.testing.assert_array_equal(cached.instances, teacher.instances)


def test_expired_entries_are_removed(teacher):
    cache = TeacherCache()
    cache.save_cached_teacher('stale', teacher)
    entry = cache.cache_dir / 'stale' / TeacherCache.ENTRY_FILE
    old = (datetime.now() - timedelta(days=30)).isoformat()
    entry.write_text(json.dumps({'timestamp': old, 'views': 2}), encoding='utf-8')
    assert cache.get_cached_teacher('stale') is None
    assert not (cache.cache_dir / 'stale').exists()


def test_corrupt_entries_are_removed(teacher):
    cache = TeacherCache()
    cache.save_cached_teacher('broken', teacher)
    (cache.cache_dir / 'broken' / TeacherCache.ENTRY_FILE).write_text('{oops', encoding='utf-8')
    assert cache.get_cached_teacher('broken') is None
    assert not (cache.cache_dir / 'broken').exists()


def test_disabled_cache_never_stores(teacher, config):
    config.set('cache.enabled', False)
    cache = TeacherCache()
    cache.save_cached_teacher('key', teacher)
    assert not (cache.cache_dir / 'key').exists()
    assert cache.get_cached_teacher('key') is None


def test_cache_info_and_clear(teacher):
    cache = TeacherCache()
    cache.save_cached_teacher('first', teacher)
    time.sleep(0.01)
    cache.save_cached_teacher('second', teacher)
    os.utime(cache.cache_dir / 'first', (time.time() - 100, time.time() - 100))

    info = cache.get_cache_info()
    assert info['cache_entries_count'] == 2
    assert [e['name'] for e in info['entries']] == ['second', 'first']
    assert info['entries'][0]['size_bytes'] > 0

    stats = cache.clear_cache()
    assert stats['entries_removed'] == 2
    assert cache.get_cache_info()['cache_entries_count'] == 0
