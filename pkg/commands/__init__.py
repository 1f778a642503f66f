# Commands Package
# One module per subcommand group; each exposes register(subparsers)
import json
import logging
import sys

logger = logging.getLogger(__name__)


def respond(payload, stream=None):
    """Print a JSON document on stdout; returns exit status 0"""
    stream = stream or sys.stdout
    stream.write(json.dumps(payload, indent=2, sort_keys=True, default=str) + '\n')
    return 0


def fail(message, **extra):
    """Log and print an error document; returns exit status 1"""
    logger.error(f"✗ {message}")
    respond({'error': message, **extra})
    return 1
