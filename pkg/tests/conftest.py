"""Shared fixtures: a small hierarchy, model configs, and tiny datasets.

The toy setups keep shapes small enough that structural tests run in
milliseconds while still exercising every code path (two regions, two
views, all variants).
"""

import sys

import numpy as np
import pytest

from histn.data import TrialRecord
from histn.graph import build_hierarchy
from histn.model import ModelConfig


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance criterion lines after capture is released."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", ()) if mod is not None else ()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.line(line)


TOY_CHANNELS = ("c1", "c2", "c3", "c4")
TOY_REGIONS = {"L": ("c1", "c2"), "R": ("c3", "c4")}
TOY_REGION_EDGES = (("L", "R"),)


@pytest.fixture
def toy_hierarchy():
    return build_hierarchy(TOY_CHANNELS, TOY_REGIONS, TOY_REGION_EDGES)


@pytest.fixture
def toy_config(toy_hierarchy):
    return ModelConfig(
        hierarchy=toy_hierarchy,
        variant="D",
        num_views=2,
        head_kernel=3,
        head_pool=2,
        sep_kernel=3,
        num_classes=3,
        dropout_rate=0.0,
        input_samples=16,
    )


def make_trial(
    subject="S01",
    trial=1,
    label_v=3,
    label_a=2,
    seconds=4.0,
    rate=8,
    channels=4,
    seed=0,
    base_seconds=2.0,
):
    """A small random trial; deterministic per seed."""
    rng = np.random.default_rng(seed)
    n = int(round(seconds * rate))
    nb = int(round(base_seconds * rate))
    return TrialRecord(
        subject_id=subject,
        trial_id=trial,
        signal=rng.standard_normal((channels, n)),
        baseline=rng.standard_normal((channels, nb)),
        sample_rate_hz=rate,
        labels={"valence": label_v, "arousal": label_a},
    )


@pytest.fixture
def trial_factory():
    return make_trial
