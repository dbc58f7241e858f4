import time

import numpy as np
import pytest

from pnphvae.toy_hvae import as_hvae_model, generate_dataset, load_reference_config, train_reference

_CRITERIA_LINES = []
TIMINGS = {}


@pytest.fixture(scope="session")
def reference_toy():
    """The pinned reference training run, shared by every test that needs it."""
    t0 = time.perf_counter()
    params, curve, data = train_reference()
    TIMINGS["reference_training"] = time.perf_counter() - t0
    return params, curve, data


@pytest.fixture(scope="session")
def reference_toy_model(reference_toy):
    return as_hvae_model(reference_toy[0])


@pytest.fixture(scope="session")
def held_out_patches():
    cfg = load_reference_config()
    return generate_dataset(200, cfg["patch_size"], 12345).patches


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def criterion_report():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def report(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {title}: {detail}"
        _CRITERIA_LINES.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def timings(reference_toy):
    """Wall-clock seconds of the session-level setup steps."""
    return TIMINGS
