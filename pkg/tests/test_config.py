import pytest

from config_loader import ConfigLoader, get_config, reset_config


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'config.yaml'
    path.write_text(
        "train:\n"
        "  steps: ${TRAIN_STEPS:-200}\n"
        "  lr_grid: ${TRAIN_LR:-0.01}\n"
        "  seed: 0\n"
        "  resolutions: [4, 8]\n"
        "describe:\n"
        "  budget: 300\n"
        "  seed: 3\n"
        "cache:\n"
        "  enabled: ${CACHE_ON:-true}\n"
        "backend:\n"
        "  endpoint: http://localhost:9000/answer\n",
        encoding='utf-8',
    )
    return path


def test_placeholder_defaults_are_typed(config_file, monkeypatch):
    monkeypatch.delenv('TRAIN_STEPS', raising=False)
    monkeypatch.delenv('TRAIN_LR', raising=False)
    config = ConfigLoader(config_file)
    assert config.get('train.steps') == 200
    assert config.get('train.lr_grid') == pytest.approx(0.01)
    assert config.get_cache_enabled() is True


def test_environment_fills_placeholders(config_file, monkeypatch):
    monkeypatch.setenv('TRAIN_STEPS', '17')
    monkeypatch.setenv('CACHE_ON', 'off')
    config = ConfigLoader(config_file)
    assert config.get('train.steps') == 17
    assert config.get_cache_enabled() is False


def test_dot_path_access_and_defaults(config_file):
    config = ConfigLoader(config_file)
    assert config.get('train.resolutions') == [4, 8]
    assert config.get('train.missing', 'fallback') == 'fallback'
    assert config.get('train.steps.deeper') is None
    assert config.get_list('eval.iou_thresholds', [0.1]) == [0.1]


def test_get_dict_returns_a_copy(config_file):
    config = ConfigLoader(config_file)
    section = config.get_dict('describe')
    section['budget'] = 1
    assert config.get('describe.budget') == 300
    assert config.get_dict('describe.budget') == {}


def test_env_override_wins(config_file, monkeypatch):
    config = ConfigLoader(config_file)
    monkeypatch.setenv('ANSWER_ENDPOINT', 'http://elsewhere/answer')
    assert config.get_answer_endpoint() == 'http://elsewhere/answer'
    monkeypatch.delenv('ANSWER_ENDPOINT')
    assert config.get_answer_endpoint() == 'http://localhost:9000/answer'


def test_list_env_override_splits_commas(config_file, monkeypatch):
    monkeypatch.setenv('THRESHOLDS', '0.1, 0.5,')
    assert ConfigLoader(config_file).get_list('eval.iou_thresholds', env_override='THRESHOLDS') == ['0.1', '0.5']


def test_overlay_merges_nested_sections(config_file, tmp_path):
    overlay = tmp_path / 'overlay.json'
    overlay.write_text('{"train": {"steps": 5}, "server": {"port": 9999}}', encoding='utf-8')
    config = ConfigLoader(config_file)
    config.merge_file(overlay)
    assert config.get('train.steps') == 5
    assert config.get('train.resolutions') == [4, 8]
    assert config.get('server.port') == 9999
    config.reload()
    assert config.get('train.steps') == 5


def test_override_seed_touches_every_seeded_section(config_file):
    config = ConfigLoader(config_file)
    touched = config.override_seed(42)
    assert sorted(touched) == ['describe.seed', 'train.seed']
    assert config.get('describe.seed') == 42


def test_set_creates_missing_sections(config_file):
    config = ConfigLoader(config_file)
    config.update_multiple({'grounding.voxel_size': 0.02, 'train.steps': 9})
    assert config.get('grounding.voxel_size') == 0.02
    assert config.get('train.steps') == 9
    assert config.validate_required_keys(['grounding.voxel_size', 'frames.beta']) == ['frames.beta']


def test_bad_documents_are_rejected(tmp_path):
    with pytest.raises(FileNotFoundError):
        ConfigLoader(tmp_path / 'missing.yaml')
    scalar = tmp_path / 'scalar.yaml'
    scalar.write_text('just a string', encoding='utf-8')
    with pytest.raises(ValueError):
        ConfigLoader(scalar)
    broken = tmp_path / 'broken.yaml'
    broken.write_text('train: [1, 2', encoding='utf-8')
    with pytest.raises(ValueError):
        ConfigLoader(broken)


def test_reset_replaces_the_global_instance(config_file):
    first = get_config()
    second = reset_config(config_file)
    assert second is not first
    assert get_config() is second
    assert second.get('describe.budget') == 300


def test_shipped_defaults_cover_every_stage():
    config = reset_config()
    for section in ('scene', 'frames', 'train', 'segfield', 'decomp', 'describe', 'backend', 'grounding', 'eval'):
        assert section in config.get_config_sections()
    assert config.get('describe.sweep_lambda') == pytest.approx(0.0157)
    assert config.get('describe.bins') == 20
