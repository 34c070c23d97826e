import itertools
import random

import pytest

from bracelet.matching import InfectedIndex


def counter_ids(start=1):
    """Deterministic 16-byte group ids for tests."""
    counter = itertools.count(start)
    return lambda: next(counter).to_bytes(16, "big")


def random_tag(rng: random.Random) -> bytes:
    return rng.randbytes(16)


@pytest.fixture
def index():
    return InfectedIndex(id_factory=counter_ids())


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
