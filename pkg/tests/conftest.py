from __future__ import annotations

import socket

import pytest

from ami_agent.simkit import mock_embedder, mock_llm

LOCAL_HOSTS = {"127.0.0.1", "::1", "localhost"}


def pytest_addoption(parser):
    parser.addoption("--run-live", action="store_true", default=False,
                     help="run tests that call real search and LLM endpoints")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-live"):
        return
    skip = pytest.mark.skip(reason="live test; pass --run-live to enable")
    for item in items:
        if "live" in item.keywords:
            item.add_marker(skip)


class NetworkGuard:
    """Records every outbound connect; anything off the loopback is refused."""

    def __init__(self):
        self.local: list[tuple] = []
        self.blocked: list[tuple] = []


@pytest.fixture(autouse=True)
def network_guard(request, monkeypatch):
    guard = NetworkGuard()
    if "live" in request.keywords:
        yield guard
        return
    real_connect = socket.socket.connect

    def connect(sock, address):
        host = address[0] if isinstance(address, tuple) else address
        if sock.family in (socket.AF_INET, socket.AF_INET6) and host not in LOCAL_HOSTS:
            guard.blocked.append(address)
            raise ConnectionRefusedError(f"network guard: refusing connection to {address!r}")
        guard.local.append(address)
        return real_connect(sock, address)

    monkeypatch.setattr(socket.socket, "connect", connect)
    yield guard


@pytest.fixture
def llm_server():
    server = mock_llm()
    yield server
    server.stop()


@pytest.fixture
def embed_server():
    server = mock_embedder()
    yield server
    server.stop()
