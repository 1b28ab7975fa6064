from pathlib import Path

import pytest

from lawline.core import CheckpointRecord, ConfigId, LossMeasurement
from lawline.ingest import group_by_config
from lawline.synth import generate, reference_world

DATA = Path(__file__).parent / "data"
TABLE1 = DATA / "table1.csv"
VAL_SETS = ["C4", "Pile UC", "FW-E", "RW", "SPJ"]
TEST_SETS = ["ARC-C", "ARC-E", "HellaSwag", "MMLU", "PIQA"]
# published Avg Val. Loss / Avg Test Task Loss columns, in table row order
TABLE1_AVERAGES = [
    (3.63, 3.88), (3.58, 4.04), (3.41, 4.70), (3.41, 4.68), (3.61, 4.75), (3.58, 4.78),
    (3.72, 4.18), (3.67, 4.36), (3.49, 4.93), (3.49, 5.02), (3.70, 4.97), (3.67, 4.92),
]

BASE = ConfigId("fineweb-edu", "llama", "tiktoken")


def make_record(losses, n=100_000_000, d=1_000_000_000, config=BASE, seed=None, step=None, unit="nats"):
    return CheckpointRecord(
        config, n, d, {k: LossMeasurement(k, v, unit) for k, v in losses.items()}, seed, step
    )


@pytest.fixture(scope="session")
def reference_records():
    return generate(reference_world(), 0)


@pytest.fixture(scope="session")
def reference_group(reference_records):
    (group,) = group_by_config(reference_records)
    return group


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)
