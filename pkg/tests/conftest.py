import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from turntake.dataio import make_windows
from turntake.synth import SynthSpec, synth_generate

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance criterion number -> its PASS/FAIL line
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])


@pytest.fixture(scope="session")
def small_corpus():
    return synth_generate(SynthSpec(duration=400, seed=3))


@pytest.fixture(scope="session")
def small_windows(small_corpus):
    batch, _ = make_windows(small_corpus.frames, small_corpus.log, small_corpus.labels, compact=True)
    return batch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
