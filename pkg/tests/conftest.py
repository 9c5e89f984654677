import itertools

import numpy as np
import pytest
from hypothesis import settings

from permdebias.core import Permutation, RecordSet

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def full_recordset(answer_fn, k, example_ids=("a",), gold=0):
    """Record set whose answer-space distribution under ordering m is answer_fn(eid, m)."""
    rs = RecordSet()
    for eid in example_ids:
        perms = [Permutation(p) for p in itertools.permutations(range(k))]
        rows = []
        for p in perms:
            ans = np.asarray(answer_fn(eid, p.mapping), dtype=np.float64)
            rows.append(ans[list(p.mapping)])
        rs.add_block(eid, perms, np.array(rows), gold)
    return rs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].lstrip("C"))):
            terminalreporter.write_line(line)
