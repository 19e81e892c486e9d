import numpy as np
import pytest

import rlm
from rlm.corpus import Corpus
from rlm.layers import LanguageModel, ModelConfig

_criteria: dict[int, tuple[str, dict[str, int]]] = {}
_notes: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        counts = _criteria.setdefault(number, (title, {"passed": 0, "failed": 0, "skipped": 0}))[1]
        counts[report.outcome] += 1


def _verdict(counts):
    # a criterion split over several tests passes only if none of them fail
    if counts["failed"]:
        return "FAIL"
    if not counts["passed"]:
        return "SKIP"
    return "PASS" + (f" ({counts['skipped']} skipped)" if counts["skipped"] else "")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report.criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, counts = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {_verdict(counts)}  {title}")
    for line in _notes:
        terminalreporter.write_line(f"  note: {line}")


@pytest.fixture
def note():
    """Append a line to the acceptance summary (shown even without -s)."""
    return _notes.append


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def tiny_text():
    with open(rlm.tiny_corpus_path(), encoding="utf-8") as fh:
        return fh.read()


@pytest.fixture(scope="session")
def tiny_corpus(tiny_text):
    return Corpus.from_text(tiny_text)


def small_model(cell="lstm", V=11, H=4, layers=2, dp=0.0, dp_h=0.0, tied=True, seed=0):
    cfg = ModelConfig(vocab_size=V, hidden_size=H, cell_kind=cell, num_layers=layers,
                      dp=dp, dp_h=dp_h, tied=tied)
    return LanguageModel.create(cfg, seed)
