"""Shared fixtures: a throwaway configuration per test and small analytic scenes."""
import pytest
from hypothesis import HealthCheck, settings

from config_loader import reset_config
from processors.oracle import OracleFieldSet, OracleSegmentModel, oracle_graph
from processors.scenegen import build_scene, make_trajectory, preset_scene

# The autouse config fixture is function scoped; it only resets global state.
settings.register_profile('scenetokens', suppress_health_check=[HealthCheck.function_scoped_fixture], deadline=None)
settings.load_profile('scenetokens')


@pytest.fixture(autouse=True)
def config(tmp_path):
    """Fresh global configuration writing into tmp_path, sized for fast tests."""
    config = reset_config()
    config.update_multiple({
        'files.output_folder': str(tmp_path / 'runs'),
        'files.logs_folder': str(tmp_path / 'logs'),
        'cache.directory': str(tmp_path / 'cache'),
        'logging.file_handler': False,
        'scene.resolution': [24, 24],
        'scene.token_grid': 8,
        'scene.n_views': 8,
        'frames.feature_views': 4,
        'describe.workers': 2,
        'grounding.workers': 2,
    })
    return config


@pytest.fixture
def two_objects(config):
    spec = preset_scene('two-objects', config=config)
    return spec, build_scene(spec, config)


@pytest.fixture
def poses(two_objects, config):
    spec, _ = two_objects
    return make_trajectory(spec, 8, config)


@pytest.fixture
def oracle_stack(two_objects):
    """Analytic fields, segment model and ground-truth graph of the two-object scene."""
    _, oracle = two_objects
    fields = OracleFieldSet(oracle, samples_per_ray=16)
    segments = OracleSegmentModel(oracle)
    return fields, segments, oracle_graph(oracle, segments)
