import numpy as np
import pytest

from intermix.core import FrameStream, Vocabulary


@pytest.fixture
def quick_vocab():
    return Vocabulary(("this", "is", "quick"))


@pytest.fixture
def quick_steps(quick_vocab):
    """W W this W W is quick <EOS>"""
    v = quick_vocab
    W = v.wait_id
    return (W, W, v.id_of("this"), W, W, v.id_of("is"), v.id_of("quick"), v.eos_id)


@pytest.fixture
def five_chunk_stream():
    # 5 chunks of 8 frames at 640 ms: 3.2 s
    return FrameStream(np.zeros((40, 4)), 8, 640)


# -- one pass/fail line per acceptance criterion ------------------------------

_criteria: dict[int, str] = {}


def pytest_runtest_logreport(report):
    marker = "test_criterion_"
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith(marker):
        return
    n = int(name[len(marker):].split("_", 1)[0])
    if report.failed:
        _criteria[n] = "FAIL"
    elif report.when == "call" and report.passed:
        _criteria.setdefault(n, "PASS")
    elif report.skipped:
        _criteria.setdefault(n, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"criterion {n}: {_criteria[n]}")
