"""
Health check routes for the answer server.

This module defines two Flask endpoints under the `health_bp` blueprint:

- /health : Basic health check (directory existence & write permissions)
- /ready  : Readiness check (answer mode configured and supported)

Each route returns a JSON payload and appropriate HTTP status code
to integrate with load balancers or container orchestrators.
"""

import os
import time
from datetime import datetime, timezone
from flask import Blueprint, jsonify, current_app
from pathlib import Path

health_bp = Blueprint('health', __name__)

SUPPORTED_MODES = ('oracle', 'echo')


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@health_bp.route('/health', methods=['GET'])
def health_check():
    """Basic health check endpoint.

    Verifies write access to the cache and logs folders.

    Returns:
        Tuple[Response, int]:
          - (200) JSON {'status': 'healthy', 'timestamp', 'mode', 'uptime'} if all checks pass.
          - (503) JSON {'status': 'unhealthy', 'error', 'timestamp'} on first failure.
    """
    try:
        for directory in (current_app.config.get('CACHE_FOLDER', '.cache'),
                          current_app.config.get('LOGS_FOLDER', 'logs')):
            if not Path(directory).exists():
                return jsonify({
                    'status': 'unhealthy',
                    'error': f'Directory {directory} does not exist',
                    'timestamp': _now()
                }), 503
            if not os.access(directory, os.W_OK):
                return jsonify({
                    'status': 'unhealthy',
                    'error': f'Directory {directory} is not writable',
                    'timestamp': _now()
                }), 503

        return jsonify({
            'status': 'healthy',
            'timestamp': _now(),
            'mode': current_app.config.get('ANSWER_MODE'),
            'uptime': time.time() - current_app.config.get('START_TIME', time.time())
        }), 200

    except OSError as e:
        current_app.logger.error(f"Health check failed: {str(e)}")
        return jsonify({'status': 'unhealthy', 'error': str(e), 'timestamp': _now()}), 503


@health_bp.route('/ready', methods=['GET'])
def readiness_check():
    """Readiness check endpoint.

    Returns:
        Tuple[Response, int]:
          - (200) JSON {'status': 'ready', 'mode', 'timestamp'} when the answer mode is supported.
          - (503) JSON {'status': 'not_ready', 'reason', 'timestamp'} otherwise.
    """
    mode = current_app.config.get('ANSWER_MODE')
    if mode not in SUPPORTED_MODES:
        return jsonify({
            'status': 'not_ready',
            'reason': f'Unsupported answer mode {mode!r}',
            'timestamp': _now()
        }), 503
    return jsonify({'status': 'ready', 'mode': mode, 'timestamp': _now()}), 200
