"""Shared fixtures: small deterministic data and a desk-scale synthetic dataset."""

from __future__ import annotations

import contextlib
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from emt import backbones as bb
from emt import synthetic as syn
from emt import video as vd

settings.register_profile(
    "emt", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
settings.load_profile("emt")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def espcn2():
    return bb.build_model("espcn", 2, seed=0)


@pytest.fixture(scope="session")
def small_video(tmp_path_factory) -> Path:
    """30 frames of 48x48, one I-frame every 10 frames, 3 chunks at fps 2 / 5 s."""
    root = tmp_path_factory.mktemp("small_video")
    syn.write_video(root, seed=3, n_frames=30, chunk_frames=10, size=48)
    return root


@pytest.fixture(scope="session")
def small_manifest(small_video) -> vd.ChunkManifest:
    m = vd.ingest(small_video / "frames", fps=2, scale=2, iframe_source=small_video / "iframes.txt")
    return vd.chunkify(m, 5.0)


# ---------------------------------------------------------------------------
# acceptance criterion reporting
# ---------------------------------------------------------------------------

_CRITERIA = []


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        info = {"detail": ""}
        t0 = time.perf_counter()
        try:
            yield info
        except BaseException:
            _CRITERIA.append((number, title, "FAIL", time.perf_counter() - t0, info["detail"]))
            raise
        _CRITERIA.append((number, title, "PASS", time.perf_counter() - t0, info["detail"]))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, secs, detail in sorted(_CRITERIA):
        line = f"{status} criterion {number:2d}: {title} [{secs:.1f} s]"
        terminalreporter.write_line(line + (f" {detail}" if detail else ""))
