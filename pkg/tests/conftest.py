import numpy as np
import pytest
import torch

from estargan import corpus as C


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Two speakers, six sentences, one noise per split; small enough to train in seconds."""
    root = tmp_path_factory.mktemp("small_corpus")
    return C.build_desk_corpus(
        root,
        seed=3,
        n_speakers=2,
        utts_per_speaker=6,
        n_test_texts=2,
        train_noises=("white",),
        test_noises=("street",),
        snrs_db=(10.0,),
    )


@pytest.fixture(scope="session")
def features():
    return C.FeatureStore()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------------------
# acceptance verdict lines
# ---------------------------------------------------------------------------

_VERDICTS: list[str] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not report.failed:
        return
    lines = [v for k, v in report.user_properties if k == "acceptance"]
    if report.when == "call":
        _VERDICTS.extend(lines)
    if report.failed and not lines and "test_acceptance" in report.nodeid and "criterion" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _VERDICTS.append(f"FAIL  {name}: error during {report.when}")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
