"""Flask application factory and development server for the answer endpoint.

Note:
    This module is intended for development environments only. For production deployments,
    use wsgi.py instead of running this file directly.

Typical usage example:
    python src/app.py  # Development server

For production, use a WSGI server with wsgi.py:
    gunicorn -c gunicorn.conf.py wsgi:app
"""

import time
from flask import Flask, request
from dotenv import load_dotenv
from config_loader import get_config
from utils.logging_setup import setup_flask_logging
from utils.directory_setup import ensure_directories
from routes.answer_routes import answer_bp
from routes.health_routes import health_bp

load_dotenv()


def create_app(config=None, mode: str = None):
    """Create and configure the Flask application instance.

    Args:
        config (ConfigLoader, optional): Configuration to read. Defaults to the
            global configuration.
        mode (str, optional): Answer mode (`oracle` or `echo`). Defaults to
            `server.mode`.

    Returns:
        Flask: Configured Flask application instance ready for use.
    """
    config = config or get_config()
    app = Flask(__name__)

    app.config['ANSWER_MODE'] = mode or config.get('server.mode', 'oracle')
    app.config['PREFER_VI'] = bool(config.get('backend.prefer_vi', True))
    app.config['CACHE_FOLDER'] = config.get_cache_directory()
    app.config['LOGS_FOLDER'] = config.get('files.logs_folder', 'logs')
    app.config['MAX_CONTENT_LENGTH'] = int(config.get('server.max_request_mb', 256)) * 1024 * 1024
    app.config['START_TIME'] = time.time()

    ensure_directories(config=config)
    logger = setup_flask_logging(app, config)

    @app.before_request
    def log_request_info():
        """Log incoming requests except health checks."""
        if not request.path.startswith('/health') and not request.path.startswith('/ready'):
            logger.info(f"Request: {request.method} {request.url} - Remote IP: {request.remote_addr}")

    @app.after_request
    def log_response_info(response):
        """Log response status except for health checks."""
        if not request.path.startswith('/health') and not request.path.startswith('/ready'):
            logger.info(f"Response: {response.status_code} for {request.method} {request.url}")
        return response

    app.register_blueprint(answer_bp)
    app.register_blueprint(health_bp)

    @app.errorhandler(413)
    def too_large(e):
        logger.warning("Scene prompt too large")
        return {'error': 'Scene prompt too large'}, 413

    @app.errorhandler(404)
    def not_found(e):
        return {'error': 'Not found'}, 404

    @app.errorhandler(500)
    def internal_error(e):
        logger.error(f"Internal server error: {str(e)}")
        return {'error': 'Internal server error'}, 500

    return app


if __name__ == '__main__':
    config = get_config()
    create_app(config).run(
        debug=config.get('server.debug', False),
        host=config.get('server.host', '127.0.0.1'),
        port=config.get('server.port', 8808),
    )
