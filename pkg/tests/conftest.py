import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from llmseg.config import load_config  # noqa: E402
from llmseg.synthetic import build_synthetic_benchmark  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
TEMPLATES = ["T1", "T4", "T7"]


@pytest.fixture(autouse=True)
def _no_live_endpoints(monkeypatch):
    for var in ("LLMSEG_API_URL", "LLMSEG_API_KEY", "LLMSEG_EMBED_URL"):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture(scope="session")
def synth(tmp_path_factory):
    """Noisy benchmark: a leaky superclass and background-leaning confusable subclasses."""
    return build_synthetic_benchmark(tmp_path_factory.mktemp("synth"), n_images=4, seed=0)


@pytest.fixture(scope="session")
def synth_clean(tmp_path_factory):
    """Clean benchmark: orthonormal regions, subclasses = class vector + bounded noise."""
    return build_synthetic_benchmark(tmp_path_factory.mktemp("synth_clean"), n_images=3, seed=1, confusable=0,
                                     super_leak=0.0, image_noise=0.02, subclass_noise=0.1)


def synth_config(sb, **over):
    return load_config(None, {**sb.config_overrides(), "templates": TEMPLATES, **over})


@pytest.fixture
def fixture_dir():
    return FIXTURES



ACCEPTANCE_COUNT = 10


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        ok, detail = mod.RESULTS.get(n, (False, "no result recorded (test errored or was not run)"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
