"""Shared fixtures for the sidecar suite."""

from __future__ import annotations

import base64
import io

import pytest
from fastapi.testclient import TestClient

from textkvqa_sidecar.samples import sample_signboards
from textkvqa_sidecar.service import create_app

# Criterion outcome lines recorded by the contract suite; emitted in the
# terminal summary so they are visible even with output capture on.
SECONDARY_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if SECONDARY_RESULTS:
        terminalreporter.section("secondary acceptance")
        for line in SECONDARY_RESULTS:
            terminalreporter.write_line(line)


def encode_png(image) -> str:
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


@pytest.fixture(scope="session")
def boards():
    return sample_signboards(10, seed=7)


@pytest.fixture(scope="session")
def client():
    with TestClient(create_app()) as test_client:
        yield test_client
