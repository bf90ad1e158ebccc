"""Shared fixtures and the acceptance summary.

Dataset files are looked up under ``$QFOREST_DATA_DIR`` first and then under
the repository's ``data/`` directory::

    mnist/train-images-idx3-ubyte
    mnist/train-labels-idx1-ubyte
    cifar-10-batches-bin/data_batch_{1..5}.bin

Tests marked ``@pytest.mark.criterion(n)`` are acceptance checks.  After the
run one line per criterion is printed: PASS when every test of that
criterion passed and FAIL otherwise, so a skipped test counts as a failure.
"""

import os
from collections import defaultdict
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parents[1]

CRITERIA = {
    1: "dense-oracle equivalence of ttn_forward",
    2: "canonicalization preserves outputs and yields isometries",
    3: "exact embedding at w=0",
    4: "weighted-state simulator against a state-vector oracle",
    5: "gradient correctness and Riemannian projection",
    6: "desk-scale MNIST (8000 samples, 16x16, chi=2)",
    7: "desk-scale CIFAR-10 (2000 samples, 8x8, chi=8)",
    8: "barren-plateau gradient contrast chi=8 vs chi=2",
    9: "encoding trajectory shape",
}

_outcomes: dict[int, list[bool]] = defaultdict(list)


def data_roots() -> list[Path]:
    roots = []
    if os.environ.get("QFOREST_DATA_DIR"):
        roots.append(Path(os.environ["QFOREST_DATA_DIR"]))
    roots.append(REPO / "data")
    return roots


def find_data(relative: str) -> Path | None:
    for root in data_roots():
        if (root / relative).exists():
            return root / relative
    return None


@pytest.fixture(scope="session")
def mnist_paths():
    images = find_data("mnist/train-images-idx3-ubyte")
    labels = find_data("mnist/train-labels-idx1-ubyte")
    if images is None or labels is None:
        pytest.fail(
            "MNIST IDX files not found under "
            + " or ".join(str(r / "mnist") for r in data_roots())
        )
    return images, labels


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call":
        _outcomes[n].append(report.passed)
    elif report.failed or report.skipped:
        _outcomes[n].append(False)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in _outcomes:
            status = "NOT RUN"
        else:
            status = "PASS" if all(_outcomes[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")
