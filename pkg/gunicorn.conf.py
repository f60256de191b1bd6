"""
Gunicorn configuration file for the scenetokens answer server.
"""

import os
import multiprocessing

# Server socket
bind = f"{os.environ.get('HOST', '127.0.0.1')}:{os.environ.get('PORT', '8808')}"
backlog = 2048

# Worker processes
workers = int(os.environ.get('GUNICORN_WORKERS', min(4, multiprocessing.cpu_count())))
worker_class = 'sync'
timeout = int(os.environ.get('GUNICORN_TIMEOUT', 60))
keepalive = 5

max_requests = 1000
max_requests_jitter = 500

preload_app = True

daemon = False
pidfile = '/tmp/scenetokens-gunicorn.pid'

# Logging
errorlog = '-'
loglevel = os.environ.get('LOG_LEVEL', 'info').lower()
accesslog = '-'
access_log_format = '%(h)s %(l)s %(u)s %(t)s "%(r)s" %(s)s %(b)s %(D)s'

proc_name = 'scenetokens'

chdir = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src')
wsgi_app = 'wsgi:application'

limit_request_line = 4094
limit_request_fields = 100
limit_request_field_size = 8190


def when_ready(server):
    """Called just after the server is started."""
    server.log.info("scenetokens answer server is ready. Listening on: %s", server.address)


def post_fork(server, worker):
    """Called just after a worker has been forked."""
    server.log.info("Worker spawned (pid: %s)", worker.pid)


def worker_abort(worker):
    """Called when a worker received the SIGABRT signal."""
    worker.log.info("Worker aborted (pid: %s)", worker.pid)
