import json

import pandas as pd
import pytest
import requests

import processors.pipeline as pipeline
from errors import NumericalError
from main import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, EXIT_TRANSPORT, main


@pytest.fixture
def overlay(tmp_path, config):
    config.set('logging.console_handler', False)
    path = tmp_path / 'overrides.yaml'
    path.write_text("describe:\n  ray_cap_factor: 500\nframes:\n  blur_fraction: 0.0\n", encoding='utf-8')
    return str(path)


@pytest.fixture
def run_dir(tmp_path, overlay):
    run = tmp_path / 'two'
    assert main(['--config', overlay, 'gen-scene', '--views', '6', '--no-previews', '--out', str(run)]) == EXIT_OK
    return run


def test_gen_scene_writes_the_run(run_dir):
    for name in ('scene.json', 'poses.json', 'teacher', 'run_manifest.json'):
        assert (run_dir / name).exists()
    assert len(json.loads((run_dir / 'poses.json').read_text(encoding='utf-8'))) == 6
    manifest = json.loads((run_dir / 'run_manifest.json').read_text(encoding='utf-8'))
    assert manifest['command'] == 'gen-scene'
    assert manifest['seeds']['scene'] == 0


def test_seed_flag_reaches_the_manifest(tmp_path, overlay):
    run = tmp_path / 'seeded'
    assert main(['--seed', '7', 'gen-scene', '--views', '4', '--no-previews', '--out', str(run)]) == EXIT_OK
    seeds = json.loads((run / 'run_manifest.json').read_text(encoding='utf-8'))['seeds']
    assert set(seeds.values()) == {7}


def test_oracle_pipeline_end_to_end(run_dir, overlay, capsys):
    run = str(run_dir)
    assert main(['--config', overlay, 'select-frames', '--run', run, '--k', '6']) == EXIT_OK
    assert len(json.loads((run_dir / 'frames.json').read_text(encoding='utf-8'))['feature_views']) == 6

    assert main(['--config', overlay, 'segment', '--run', run, '--ground-truth']) == EXIT_OK
    assert main(['--config', overlay, 'describe', '--run', run, '--w', '40', '--oracle',
                 '--question', 'Which object is the box?']) == EXIT_OK
    prompt = json.loads((run_dir / 'prompt.json').read_text(encoding='utf-8'))
    assert [o['virtual_id'] for o in prompt['objects']] == [1, 2]
    assert all(len(o['tokens']) == 20 for o in prompt['objects'])
    assert (run_dir / 'descriptions.csv').exists()

    capsys.readouterr()
    assert main(['ask', '--prompt', str(run_dir / 'prompt.json'), '--kind', 'nearest_object_to',
                 '--reference', '1']) == EXIT_OK
    assert capsys.readouterr().out.strip() == '<image id=2>'
    assert json.loads((run_dir / 'answer.json').read_text(encoding='utf-8'))['chosen_virtual_id'] == 2

    assert main(['--config', overlay, 'ground', '--run', run, '--virtual-id', '1', '--oracle']) == EXIT_OK
    assert (run_dir / 'grounding_1.ply').exists()

    assert main(['--config', overlay, 'eval', '--run', run, '--queries', '5', '--oracle']) == EXIT_OK
    summary = json.loads((run_dir / 'eval.json').read_text(encoding='utf-8'))
    assert summary['queries'] == 5
    assert summary['choice_accuracy'] == 1.0
    assert summary['miou_large'] > 0.95
    assert summary['object_ari'] > 0.9


def test_missing_artifacts_are_invalid_input(tmp_path, overlay, capsys):
    assert main(['describe', '--run', str(tmp_path / 'nothing'), '--oracle']) == EXIT_INVALID
    assert 'segment' in capsys.readouterr().err


def test_unknown_preset_is_invalid_input(tmp_path, overlay):
    assert main(['gen-scene', '--preset', 'three-teapots', '--out', str(tmp_path / 'x')]) == EXIT_INVALID


def test_no_command_prints_help(overlay):
    assert main([]) == EXIT_INVALID


def test_oracle_ask_needs_a_query(tmp_path, overlay):
    prompt = tmp_path / 'prompt.json'
    prompt.write_text(json.dumps({'v': 1, 'question': 'q', 'objects': []}), encoding='utf-8')
    assert main(['ask', '--prompt', str(prompt)]) == EXIT_INVALID


def test_unreachable_endpoint_is_a_transport_failure(tmp_path, overlay, monkeypatch):
    prompt = tmp_path / 'prompt.json'
    prompt.write_text(json.dumps({'v': 1, 'question': 'q', 'objects': []}), encoding='utf-8')

    def refuse(*args, **kwargs):
        raise requests.exceptions.ConnectionError('connection refused')
    monkeypatch.setattr(requests, 'post', refuse)
    assert main(['ask', '--prompt', str(prompt), '--remote', '--endpoint', 'http://127.0.0.1:9/answer']) \
        == EXIT_TRANSPORT


def test_numerical_failure_exit_code(tmp_path, overlay, monkeypatch):
    def diverge(*args, **kwargs):
        raise NumericalError("loss is NaN", {'step': 3.0})
    monkeypatch.setattr(pipeline, 'train_fields', diverge)
    assert main(['train', '--run', str(tmp_path), '--quiet']) == EXIT_NUMERICAL


def test_select_frames_from_a_poses_file(run_dir, overlay, capsys):
    out = run_dir / 'picked.json'
    capsys.readouterr()
    assert main(['--config', overlay, 'select-frames', '--poses', str(run_dir / 'poses.json'), '--k', '3',
                 '--beta', '0.0', '--out', str(out)]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out.strip())
    selection = json.loads(out.read_text(encoding='utf-8'))
    assert printed == selection['feature_views']
    assert len(printed) == len(set(printed)) == 3
    assert selection['kept'] == list(range(6))
    assert selection['beta'] == 0.0
    lo, hi = json.loads((run_dir / 'scene.json').read_text(encoding='utf-8'))['bounds']
    assert selection['diagonal'] == pytest.approx(sum((b - a) ** 2 for a, b in zip(lo, hi)) ** 0.5)


def test_segment_and_describe_with_explicit_paths(run_dir, overlay, tmp_path):
    graph = run_dir / 'gt_graph.json'
    assert main(['--config', overlay, 'segment', '--ground-truth', '--out', str(graph)]) == EXIT_OK
    assert graph.exists() and not (run_dir / 'graph.json').exists()

    prompt = tmp_path / 'elsewhere' / 'prompt.json'
    assert main(['--config', overlay, 'describe', '--graph', str(graph), '--w', '40', '--oracle',
                 '--out', str(prompt)]) == EXIT_OK
    assert [o['virtual_id'] for o in json.loads(prompt.read_text(encoding='utf-8'))['objects']] == [1, 2]


def test_stage_without_run_or_paths_is_invalid_input(overlay):
    assert main(['segment', '--ground-truth']) == EXIT_INVALID


def test_both_fields_train_on_the_selected_views(run_dir, overlay, monkeypatch):
    calls = {}

    def fake_token_fit(fs, teacher, cfg, views=None, progress=False):
        calls['token'] = views
        return fs, pd.DataFrame({'total': [1.0]})

    def fake_seg_fit(sf, teacher, cfg, geometry, views=None, progress=False):
        calls['seg'] = views
        return sf, pd.DataFrame({'total': [0.5]})

    monkeypatch.setattr(pipeline, 'fit_token_field', fake_token_fit)
    monkeypatch.setattr(pipeline, 'fit_seg_field', fake_seg_fit)
    run = str(run_dir)
    assert main(['--config', overlay, 'select-frames', '--run', run, '--k', '3']) == EXIT_OK
    assert main(['--config', overlay, 'train', '--run', run, '--with-segfield', '--quiet']) == EXIT_OK
    selected = json.loads((run_dir / 'frames.json').read_text(encoding='utf-8'))['feature_views']
    assert calls['token'] == calls['seg'] == selected
