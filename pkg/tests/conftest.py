import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("quick", max_examples=30, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def corpus_small():
    from obfusdetect.corpus import synth_corpus

    return synth_corpus(101, 1500)


@pytest.fixture(scope="session")
def tok_small(corpus_small):
    from obfusdetect import tokenizer as tk
    from obfusdetect.normalizer import normalize

    return tk.train([normalize(l.raw).text for l in corpus_small], 600)


def pytest_terminal_summary(terminalreporter):
    from _acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n])
