"""Lightweight instrumentation: which files a process stage opened and which
service routes it contacted.  Used by the black-box seal tests to prove the
adaptation stage never touches source data or source checkpoints."""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path

_FILES: list[list[str]] = []
_ROUTES: list[list[str]] = []


def note_open(path) -> None:
    if _FILES:
        p = str(Path(path).resolve())
        for sink in _FILES:
            sink.append(p)


def note_route(route: str) -> None:
    if _ROUTES:
        for sink in _ROUTES:
            sink.append(route)


@contextmanager
def record_access():
    """Collect (opened file paths, contacted routes) for the enclosed block."""
    files: list[str] = []
    routes: list[str] = []
    _FILES.append(files)
    _ROUTES.append(routes)
    try:
        yield files, routes
    finally:
        _FILES.remove(files)
        _ROUTES.remove(routes)
