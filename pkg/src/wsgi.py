#!/usr/bin/env python3
"""
WSGI entry point for the answer server under Gunicorn.
"""

import sys
from pathlib import Path

current_dir = Path(__file__).parent
sys.path.insert(0, str(current_dir))

from app import create_app  # noqa: E402

application = create_app()
app = application  # Alias for compatibility

if __name__ == "__main__":
    app.run()
