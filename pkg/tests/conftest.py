import numpy as np
import pytest

from bixse_lab.synth import SynthConfig, synth_generate
from bixse_lab.trainer import EvalSet

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS: dict = {}


@pytest.fixture(scope="session")
def reference():
    """The reference synthetic dataset (seed 7, 8 topics, 512 words, 2k records)."""
    return synth_generate(SynthConfig())


@pytest.fixture(scope="session")
def reference_eval(reference):
    return EvalSet(reference.queries, reference.corpus, reference.qrels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
