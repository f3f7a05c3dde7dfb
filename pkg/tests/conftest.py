import numpy as np
import pytest

from semiprune import data, gcn
from semiprune.trainer import Dataset

ACCEPTANCE_LINES = []


def make_datasets(classes=4, joints=6, frames=16, samples_per_class=10, noise=0.05, seed=0, chunks=4):
    adj = gcn.skeleton_adjacency(joints, [(j, j + 1) for j in range(joints - 1)])
    split = {"train": [], "test": []}
    for seq, part in data.synth_sequences(classes, joints, frames, samples_per_class, noise, seed):
        split[part].append(gcn.temporal_chunking(seq, chunks, adj))
    return adj, Dataset.from_graphs(split["train"]), Dataset.from_graphs(split["test"])


@pytest.fixture
def small_task():
    return make_datasets()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
