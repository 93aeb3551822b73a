"""Temporal calibrators respond more to motion classes than to global ones."""
import statistics

import pytest

from conftest import TOY_SEEDS


@pytest.mark.parametrize("kind", ["ECalT", "ECalL"])
def test_temporal_gates_favour_temporal_classes(toy_runs, kind):
    gaps = []
    for seed in TOY_SEEDS:
        gates = toy_runs.get("gc", seed)["gates"]
        gaps.append(gates.family_mean(kind, "TEMPORAL") - gates.family_mean(kind, "GLOBAL"))
    # individual seeds can invert; the median over seeds must not
    assert statistics.median(gaps) > 0, gaps
