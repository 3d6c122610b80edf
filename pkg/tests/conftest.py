import numpy as np
import pytest

from wsigraph.graph import build_wsi_graph, merge_patient_graph, normalize_adjacency
from wsigraph.records import Patch

ACCEPTANCE_LINES = []


def grid_patches(width, height, wsi_id="W0"):
    cells = [(r, c) for r in range(height) for c in range(width)]
    return [Patch(wsi_id, i, r, c) for i, (r, c) in enumerate(cells)]


def random_patches(rng, n, span, wsi_id="W0"):
    """``n`` distinct random cells inside a ``span`` x ``span`` box."""
    flat = rng.choice(span * span, size=n, replace=False)
    return [Patch(wsi_id, i, int(f // span), int(f % span)) for i, f in enumerate(flat)]


def random_patient_graph(rng, max_nodes=12, span=4, patient_id="P"):
    n = int(rng.integers(1, max_nodes + 1))
    g = build_wsi_graph(random_patches(rng, n, span))
    return merge_patient_graph([g], patient_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance_report():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
