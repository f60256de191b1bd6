import numpy as np
import pytest

from app import create_app
from processors.describe import PromptObject, ScenePrompt


def _wire(query=None):
    objects = [
        PromptObject(1, 10, np.array([0.0, 0.0, 0.0]), np.array([[1.0, 0.0]]), ['VI']),
        PromptObject(2, 20, np.array([1.0, 0.0, 0.0]), np.array([[0.0, 1.0]]), ['VI']),
        PromptObject(3, 30, np.array([5.0, 0.0, 0.0]), np.array([[0.7, 0.7]]), ['VD']),
    ]
    return ScenePrompt('scene', 'Which object is closest to the first?', objects, query=query).to_wire()


@pytest.fixture
def make_client(config):
    config.set('logging.console_handler', False)

    def build(mode=None):
        app = create_app(config, mode=mode)
        app.config['TESTING'] = True
        return app.test_client()
    return build


def test_health_reports_mode_and_uptime(make_client):
    response = make_client('oracle').get('/health')
    assert response.status_code == 200
    body = response.get_json()
    assert body['status'] == 'healthy'
    assert body['mode'] == 'oracle'
    assert body['uptime'] >= 0


def test_health_fails_without_cache_folder(make_client, config, tmp_path):
    client = make_client()
    client.application.config['CACHE_FOLDER'] = str(tmp_path / 'gone')
    response = client.get('/health')
    assert response.status_code == 503
    assert 'does not exist' in response.get_json()['error']


def test_ready_checks_the_answer_mode(make_client):
    assert make_client('echo').get('/ready').get_json()['mode'] == 'echo'
    response = make_client('telepathy').get('/ready')
    assert response.status_code == 503
    assert response.get_json()['status'] == 'not_ready'


def test_oracle_answers_structured_queries(make_client):
    client = make_client('oracle')
    response = client.post('/answer', json=_wire({'kind': 'nearest_object_to', 'reference_virtual_id': 1}))
    assert response.status_code == 200
    assert response.get_json() == {'answer': '<image id=2>', 'chosen_virtual_id': 2}

    response = client.post('/answer', json=_wire({'kind': 'find_object_by_feature', 'embedding': [0.1, 0.9]}))
    assert response.get_json()['chosen_virtual_id'] == 2


def test_echo_returns_the_question(make_client):
    response = make_client('echo').post('/answer', json=_wire())
    assert response.status_code == 200
    assert response.get_json() == {'answer': 'Which object is closest to the first?'}


@pytest.mark.parametrize('payload', [
    None,
    {'objects': []},
    {'v': 9, 'question': 'q', 'objects': []},
])
def test_malformed_prompts_are_rejected(make_client, payload):
    client = make_client('oracle')
    if payload is None:
        response = client.post('/answer', data='not json', content_type='text/plain')
    else:
        response = client.post('/answer', json=payload)
    assert response.status_code == 400
    assert 'error' in response.get_json()


def test_oracle_needs_a_valid_query(make_client):
    client = make_client('oracle')
    assert client.post('/answer', json=_wire()).status_code == 400
    missing_reference = client.post('/answer', json=_wire({'kind': 'nearest_object_to'}))
    assert missing_reference.status_code == 400
    unknown_reference = client.post('/answer', json=_wire({'kind': 'nearest_object_to', 'reference_virtual_id': 7}))
    assert unknown_reference.status_code == 400


def test_unknown_routes_answer_json(make_client):
    response = make_client().get('/nowhere')
    assert response.status_code == 404
    assert response.get_json() == {'error': 'Not found'}
