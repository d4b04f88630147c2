import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(number, title, **checks)`` records one PASS/FAIL line and asserts every check.

    Each check is a ``(passed, detail)`` pair; the details go into the line.
    """

    def record(number: int, title: str, **checks):
        ok = all(bool(passed) for passed, _ in checks.values())
        detail = "; ".join(f"{name}: {d}" for name, (_, d) in checks.items())
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  [{detail}]"
        _ACCEPTANCE[number] = line
        print(line)
        failed = [name for name, (passed, _) in checks.items() if not passed]
        assert ok, f"criterion {number} failed: {', '.join(failed)} ({detail})"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k])


@pytest.fixture(scope="session")
def sphere_scene():
    from gbr.synthetic import PRESETS, generate_synthetic

    return generate_synthetic(PRESETS["sphere"])


@pytest.fixture(scope="session")
def plane_scene():
    from gbr.synthetic import PRESETS, generate_synthetic

    return generate_synthetic(PRESETS["plane"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
