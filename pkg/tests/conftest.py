import numpy as np
import pytest

from srattack.audio import generate_corpus
from srattack.srs import EmbedderSpec, TaskKind, enroll
from srattack.harness import build_system, make_split


@pytest.fixture(scope="session")
def corpus():
    """10 speakers x 6 utterances of 0.5 s; first 3 enroll, last 3 test."""
    return generate_corpus(10, 6, 0.5, 1)


@pytest.fixture(scope="session")
def spec():
    return EmbedderSpec()


@pytest.fixture(scope="session")
def csi_db(corpus, spec):
    return enroll({k: v[:3] for k, v in corpus.items()}, spec, TaskKind.CSI)


@pytest.fixture(scope="session")
def split():
    return make_split(master_seed=0)


@pytest.fixture(scope="session")
def osi_db(split, spec):
    return build_system(split, spec, TaskKind.OSI)


@pytest.fixture(scope="session")
def sv_db(split, spec):
    return build_system(split, spec, TaskKind.SV)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured detail."""
    reports = [r for key in ("passed", "failed") for r in terminalreporter.stats.get(key, [])
               if r.when == "call" and "test_acceptance.py" in r.nodeid]
    if not reports:
        return
    terminalreporter.section("acceptance criteria")
    def order(r):
        head = str(dict(r.user_properties).get("criterion", "")).split(" ")[0]
        return (int(head) if head.isdigit() else 99, r.nodeid)

    for r in sorted(reports, key=order):
        props = dict(r.user_properties)
        status = "PASS" if r.passed else "FAIL"
        terminalreporter.write_line(f"{props.get('criterion', r.nodeid)}: {status}  "
                                    f"{props.get('detail', '')}")
