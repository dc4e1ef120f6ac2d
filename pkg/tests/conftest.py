import socket
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def no_network(monkeypatch):
    """Network-forbidding harness mode: any socket creation fails loudly.

    Scripted runs must perform zero network operations; apply this fixture
    to prove it. Subprocesses spawned by the sandbox are unaffected (the
    guard is in-process only), which is exactly the boundary we want.
    """
    def _blocked(*args, **kwargs):
        raise AssertionError("network operation attempted during a scripted run")

    monkeypatch.setattr(socket, "socket", _blocked)
    monkeypatch.setattr(socket, "create_connection", _blocked)
    yield


@pytest.fixture
def golden(fixtures):
    """Paths making up the golden end-to-end fixture."""
    root = fixtures / "golden"
    return {
        "task": (root / "task.txt").read_text(encoding="utf-8").strip(),
        "script": root / "script.yaml",
        "workspace": root / "workspace",
    }
