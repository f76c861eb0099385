import numpy as np
import pytest
from hypothesis import settings

from fssl.flows import Flow

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {title}: {detail}")


def make_flow(timestamps, lengths, directions, flow_id="f", label=None):
    return Flow(flow_id, label, np.asarray(timestamps, float), np.asarray(lengths), np.asarray(directions))


def random_flow(rng, num_packets, flow_id="f", label=None):
    ns = np.concatenate([[0], np.cumsum(rng.integers(0, 5_000_000, num_packets - 1))])
    return make_flow(ns / 1e9, rng.integers(1, 1501, num_packets), rng.choice([1, -1], num_packets),
                     flow_id, label)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
