import math
from typing import Callable, Optional

import pytest

from project.core_model_service import StateLabel, Subsystem
from project.montecarlo_service import run_trial
from project.scenarios_service import ScenarioSpec
from project.trajectory_models import Trajectory

LN2 = math.log(2.0)

CONFIGURATIONS = ["apparatus", "apparatus+observer", "cat1", "cat1+observer", "cat2", "cat2+observer"]

END_STATES = {
    "apparatus": {"d1·M(tf)·i1", "d0·M(t0)·i0"},
    "apparatus+observer": {"d1·M(tf)·I1·B1", "d0·M(t0)·I0·B0"},
    "cat1": {"d1·M(tf)·U", "d0·M(t0)·C"},
    "cat1+observer": {"d1·M(tf)·U·B_U", "d0·M(t0)·C·B_C"},
    "cat2": {"d1·M(tf)·C", "d0·M(t0)·U"},
    "cat2+observer": {"d1·M(tf)·C·B_C", "d0·M(t0)·U·B_U"},
}


def label(subsystem: Subsystem, symbol: str) -> StateLabel:
    phase = 0.0 if subsystem in (Subsystem.MECHANISM, Subsystem.INTERNAL_CLOCK) else None
    return StateLabel(subsystem=subsystem, symbol=symbol, phase=phase)


def spec_for(version: str, **overrides) -> ScenarioSpec:
    if version == "cat2-natural":
        overrides.setdefault("ordering", "external-first")
    return ScenarioSpec(version=version, **overrides)


def find_trial(
    spec: ScenarioSpec, predicate: Callable[[Trajectory], bool], limit: int = 400, prune: bool = False
) -> Optional[Trajectory]:
    for seed in range(limit):
        trajectory = run_trial(spec, seed, prune=prune)
        if predicate(trajectory):
            return trajectory
    return None


def has_hit(trajectory: Trajectory) -> bool:
    return trajectory.hit is not None


def no_hit(trajectory: Trajectory) -> bool:
    return trajectory.hit is None


@pytest.fixture
def apparatus_spec() -> ScenarioSpec:
    return spec_for("apparatus")


@pytest.fixture
def apparatus_hit(apparatus_spec) -> Trajectory:
    trajectory = find_trial(apparatus_spec, has_hit)
    assert trajectory is not None
    return trajectory


@pytest.fixture
def apparatus_miss(apparatus_spec) -> Trajectory:
    trajectory = find_trial(apparatus_spec, no_hit)
    assert trajectory is not None
    return trajectory
