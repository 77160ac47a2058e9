import logging
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

from pydantic import BaseModel, Field

from project.core_model_service import ComponentKind, Subsystem
from project.scenarios_service import ScenarioVersion
from project.trajectory_models import ComponentView, EventKind, Trajectory

logger = logging.getLogger(__name__)


class Agent(str, Enum):
    CAT = "cat"
    OBSERVER = "observer"


ALPHABETS: Dict[Agent, Set[str]] = {
    Agent.CAT: {"C", "U"},
    Agent.OBSERVER: {"B0:I0", "B1:I1", "B_C", "B_U"},
}

# The observer's brain is bound to the indicator it sees, so B0/B1 are reported as compound tokens.
_OBSERVER_TOKENS = {"B0": "B0:I0", "B1": "B1:I1", "B_C": "B_C", "B_U": "B_U"}

Transitions = Dict[Agent, FrozenSet[Tuple[str, str]]]

_CAT_SLEEPS = frozenset({("C", "U")})
_CAT_WAKES = frozenset({("U", "C")})

ALLOWED: Dict[Optional[ScenarioVersion], Transitions] = {
    None: {
        Agent.CAT: _CAT_SLEEPS | _CAT_WAKES,
        Agent.OBSERVER: frozenset({("B0:I0", "B1:I1"), ("B_C", "B_U"), ("B_U", "B_C")}),
    },
    ScenarioVersion.APPARATUS: {},
    ScenarioVersion.APPARATUS_OBSERVER: {Agent.OBSERVER: frozenset({("B0:I0", "B1:I1")})},
    ScenarioVersion.CAT1: {Agent.CAT: _CAT_SLEEPS},
    ScenarioVersion.CAT1_OBSERVER: {Agent.CAT: _CAT_SLEEPS, Agent.OBSERVER: frozenset({("B_C", "B_U")})},
    ScenarioVersion.CAT2: {Agent.CAT: _CAT_WAKES},
    ScenarioVersion.CAT2_OBSERVER: {Agent.CAT: _CAT_WAKES, Agent.OBSERVER: frozenset({("B_U", "B_C")})},
    ScenarioVersion.CAT2_NATURAL: {Agent.CAT: _CAT_WAKES},
}


class ExperienceRecord(BaseModel):
    """
    A change of one agent's conscious state, caused by the event with id `cause`.
    """

    time: float
    agent: Agent
    state: str
    cause: str


class ParadoxReport(BaseModel):
    ok: bool
    violations: List[str] = Field(default_factory=list)


def _agent_states(snapshot: List[ComponentView]) -> Dict[Agent, List[str]]:
    states: Dict[Agent, List[str]] = {}
    for view in snapshot:
        if view.kind is not ComponentKind.REALIZED:
            continue
        cat = view.label(Subsystem.CAT)
        if cat is not None:
            seen = states.setdefault(Agent.CAT, [])
            if cat.symbol not in seen:
                seen.append(cat.symbol)
        observer = view.label(Subsystem.OBSERVER_BRAIN)
        # X is the observer before any interaction; it has no experience.
        if observer is not None and observer.symbol in _OBSERVER_TOKENS:
            seen = states.setdefault(Agent.OBSERVER, [])
            token = _OBSERVER_TOKENS[observer.symbol]
            if token not in seen:
                seen.append(token)
    return states


def extract_experiences(trajectory: Trajectory) -> List[ExperienceRecord]:
    """
    Derives the per-agent experience timeline of a completed trial from the realized components
    of its snapshots; ready and phantom components contribute nothing. The state of an agent at
    an instant is the one after the last event at that instant.

    Args:
        trajectory (Trajectory): A completed trial.

    Returns:
        List[ExperienceRecord]: One record per experience change, in time order.

    Example:
        extract_experiences(cat1_hit_trial)
        > [(0.0, cat, C), (t_f, cat, U)]
    """
    frames: List[Tuple[float, str, List[ComponentView]]] = []
    if trajectory.initial_snapshot:
        frames.append((trajectory.start_time, "start", trajectory.initial_snapshot))
    for event in trajectory.events:
        if event.kind in (EventKind.EXPERIENCE, EventKind.PRUNED):
            continue
        if frames and frames[-1][0] == event.time:
            frames[-1] = (event.time, event.id, event.snapshot)
        else:
            frames.append((event.time, event.id, event.snapshot))

    records: List[ExperienceRecord] = []
    current: Dict[Agent, str] = {}
    for time, cause, snapshot in frames:
        for agent, states in _agent_states(snapshot).items():
            if states == [current.get(agent)]:
                continue
            for state in states:
                if len(states) > 1 or state != current.get(agent):
                    records.append(ExperienceRecord(time=time, agent=agent, state=state, cause=cause))
            current[agent] = states[-1]
    return records


def check_no_paradox(records: List[ExperienceRecord], version: Optional[ScenarioVersion] = None) -> ParadoxReport:
    """
    Checks that no agent holds two distinct states at one instant, that each agent's times never
    decrease, and that every change follows the transition order of the configuration
    (C -> U for version I, U -> C for version II, B0:I0 -> B1:I1, B_C -> B_U, B_U -> B_C).

    Args:
        records (List[ExperienceRecord]): Experience timeline of one trial.
        version (Optional[ScenarioVersion]): Configuration whose order applies; without it only
            the version-independent rules are checked.

    Returns:
        ParadoxReport: ok, or the violations found.
    """
    allowed = ALLOWED[version]
    violations: List[str] = []
    by_agent: Dict[Agent, List[ExperienceRecord]] = {}
    for record in records:
        by_agent.setdefault(record.agent, []).append(record)

    for agent, timeline in by_agent.items():
        transitions = allowed.get(agent, frozenset())
        previous: Optional[ExperienceRecord] = None
        for record in timeline:
            if record.state not in ALPHABETS[agent]:
                violations.append(f"{agent.value}: {record.state!r} is not a {agent.value} state")
            if previous is not None:
                if record.time < previous.time:
                    violations.append(f"{agent.value}: time runs backwards at {record.time!r}")
                elif record.time == previous.time and record.state != previous.state:
                    violations.append(
                        f"{agent.value}: {previous.state} and {record.state} at the same time {record.time!r}"
                    )
                elif record.state != previous.state and (previous.state, record.state) not in transitions:
                    violations.append(f"{agent.value}: transition {previous.state} -> {record.state} is not allowed")
            previous = record
    if violations:
        logger.debug("paradox check failed: %s", violations)
    return ParadoxReport(ok=not violations, violations=violations)
