import numpy as np
import pytest
import torch

from hhc.audio import load_corpus, read_manifest
from hhc.fixtures import make_fixture_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fixture_manifest(tmp_path_factory):
    """The 2-minute synthetic single-speaker corpus (12 clips x 10 s)."""
    return make_fixture_corpus(tmp_path_factory.mktemp("fixture"))


@pytest.fixture(scope="session")
def fixture_corpus(fixture_manifest):
    return load_corpus(read_manifest(fixture_manifest))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Context manager recording a PASS/FAIL line for an acceptance criterion."""
    import contextlib

    results = request.config.stash[_RESULTS]

    @contextlib.contextmanager
    def record(number: int, title: str):
        detail = {}
        try:
            yield detail
        except BaseException as exc:
            line = f"criterion {number:2d} FAIL  {title}: {type(exc).__name__}: {str(exc)[:200]}"
            results[number] = line
            print(line)
            raise
        extra = "; ".join(f"{k}={v}" for k, v in detail.items())
        line = f"criterion {number:2d} PASS  {title}" + (f" ({extra})" if extra else "")
        results[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if results:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
