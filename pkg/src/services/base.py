#!/usr/bin/env python3
import os
import logging
import configparser
from pathlib import Path

from .exceptions import LseError, ValidationError

logger = logging.getLogger('lse')

DEFAULT_THREADS = 1


def env_threads():
    """Thread ceiling from LSE_THREADS, or the default when unset"""
    raw = os.environ.get('LSE_THREADS')
    if not raw:
        return DEFAULT_THREADS
    try:
        threads = int(raw)
    except ValueError:
        raise ValidationError(f"LSE_THREADS must be an integer, got {raw!r}", contract="threads")
    if threads < 1:
        raise ValidationError(f"LSE_THREADS must be >= 1, got {threads}", contract="threads")
    return threads


def new_config():
    """ConfigParser that keeps key case and does no interpolation"""
    config = configparser.ConfigParser(interpolation=None)
    config.optionxform = str
    return config


def read_ini(path):
    """Read an INI document, raising ValidationError when it cannot be parsed"""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"File not found: {path}", contract="file-exists")
    config = new_config()
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            config.read_file(fh)
    except configparser.Error as e:
        raise ValidationError(f"Malformed document {path}: {e}", contract="ini-format")
    except UnicodeDecodeError as e:
        raise ValidationError(f"{path} is not UTF-8 text: {e}", contract="ini-format")
    return config


def write_ini(config, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as fh:
        config.write(fh)


def parse_id_list(raw, field="ids"):
    """Parse a comma separated list of non-negative integers"""
    raw = (raw or "").strip()
    if not raw:
        return []
    ids = []
    for token in raw.split(','):
        token = token.strip()
        try:
            value = int(token)
        except ValueError:
            raise ValidationError(f"{field}: expected integer, got {token!r}", contract=field)
        if value < 0:
            raise ValidationError(f"{field}: ids must be >= 0, got {value}", contract=field)
        ids.append(value)
    return ids


def parse_float_list(raw, field="values"):
    raw = (raw or "").strip()
    if not raw:
        return []
    try:
        return [float(token) for token in raw.split(',')]
    except ValueError:
        raise ValidationError(f"{field}: expected comma separated numbers, got {raw!r}", contract=field)


def format_list(values):
    return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in values)


class BaseService:
    """Base class for LSE services"""

    def __init__(self, threads=None, strict=False, seed=0):
        self.threads = threads or env_threads()
        self.strict = strict
        self.seed = seed

    def _success(self, **payload):
        result = {"status": "success"}
        result.update(payload)
        return result

    def _error(self, action, exc):
        """Log a failure and turn it into an error result"""
        logger.error(f"Error {action}: {exc}")
        if isinstance(exc, LseError):
            return exc.as_dict()
        if isinstance(exc, OSError):
            return {"status": "error", "kind": "io", "message": str(exc)}
        return {"status": "error", "kind": "runtime", "message": str(exc)}

    def _run(self, action, func, *args, **kwargs):
        """
        Call func and wrap its outcome

        Args:
            action (str): Human readable description used in log lines
            func (callable): Returns a dict merged into the success payload

        Returns:
            dict: {"status": "success", ...} or {"status": "error", ...}
        """
        try:
            payload = func(*args, **kwargs)
            return self._success(**(payload or {}))
        except (LseError, OSError) as e:
            return self._error(action, e)
