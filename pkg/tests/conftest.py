"""Shared toy-benchmark runs: trained once per session, used by several tests."""
import time

import pytest

from gcnet import toybench as tb

TOY_STEPS = 800
TOY_SEEDS = (0, 1, 2)
VARIANTS = {"gc": ("on", "GSTL"), "nogc": ("off", "GSTL"), "s_only": ("on", "S")}


class ToyRuns:
    """Lazily trained micro-nets keyed by (variant, seed)."""

    def __init__(self):
        self.results = {}
        self.seconds = 0.0

    def get(self, variant, seed):
        key = (variant, seed)
        if key not in self.results:
            gc, cals = VARIANTS[variant]
            t0 = time.perf_counter()
            run = tb.run_experiment(gc, cals, seed=seed, steps=TOY_STEPS)
            acc, per_class = tb.evaluate(run.model, run.val_set)
            gates = tb.gate_stats(run.model, run.val_set) if gc == "on" else None
            self.seconds += time.perf_counter() - t0
            self.results[key] = dict(
                acc=acc,
                per_class=per_class,
                temporal=tb.family_accuracy(per_class, run.val_set, "TEMPORAL"),
                gates=gates,
                steps=len(run.log.steps),
            )
        return self.results[key]


@pytest.fixture(scope="session")
def toy_runs():
    return ToyRuns()
