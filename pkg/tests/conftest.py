import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from arannot.config import PipelineConfig  # noqa: E402
from arannot.pipeline import run_pipeline, write_phantom  # noqa: E402
from arannot.phantom import PhantomConfig, generate_phantom  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def default_phantom():
    return generate_phantom(PhantomConfig(rng_seed=42))


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory, default_phantom):
    out = tmp_path_factory.mktemp("phantom")
    write_phantom(PipelineConfig(), out)
    return out


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory, phantom_dir):
    """Default pipeline on the seed-42 phantom, single worker."""
    import time

    out = tmp_path_factory.mktemp("run_w1")
    cfg = PipelineConfig(input=str(phantom_dir / "stack"), output=str(out), truth=str(phantom_dir / "truth"),
                         workers=1)
    t0 = time.perf_counter()
    report = run_pipeline(cfg)
    return out, report, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance():
    def record(name: str, ok: bool, detail: str = ""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
