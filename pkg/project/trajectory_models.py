from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from project.core_model_service import Component, ComponentKind, StateLabel, Subsystem


class EventKind(str, Enum):
    HIT = "hit"
    PHASE_COMPLETE = "phase-complete"
    PHANTOMIZED = "phantomized"
    PRUNED = "pruned"
    CUTOFF = "cutoff"
    EXPERIENCE = "experience"
    OBSERVATION_START = "observation-start"
    OBSERVATION_COMPLETE = "observation-complete"
    WARNING = "warning"


class ComponentView(BaseModel):
    """
    What an event snapshot keeps of a component.
    """

    id: str
    kind: ComponentKind
    labels: List[StateLabel]
    modulus: float
    ready_symbols: List[Subsystem] = Field(default_factory=list)

    @classmethod
    def of(cls, component: Component) -> "ComponentView":
        return cls(
            id=component.id,
            kind=component.kind,
            labels=list(component.labels),
            modulus=component.modulus,
            ready_symbols=list(component.ready_symbols),
        )

    def label(self, slot: Subsystem) -> Optional[StateLabel]:
        for label in self.labels:
            if label.slot is slot.slot:
                return label
        return None

    def render(self) -> str:
        ready = set(self.ready_symbols) if self.kind is ComponentKind.READY else set()
        return "·".join(label.render(label.slot in ready) for label in self.labels)


class TrajectoryEvent(BaseModel):
    """
    One entry of a trial's event log. `snapshot` holds the non-phantom components after the event.
    """

    id: str
    time: float
    kind: EventKind
    payload: Dict[str, Any] = Field(default_factory=dict)
    snapshot: List[ComponentView] = Field(default_factory=list)


class Trajectory(BaseModel):
    """
    Ordered, timestamped event log of one trial plus its terminal state.
    """

    scenario: str
    version: str
    seed: int
    dt: float
    start_time: float
    initial_snapshot: List[ComponentView] = Field(default_factory=list)
    events: List[TrajectoryEvent] = Field(default_factory=list)
    terminal_labels: List[str] = Field(default_factory=list)
    terminal_time: float
    flags: List[str] = Field(default_factory=list)

    @property
    def hit(self) -> Optional[TrajectoryEvent]:
        for event in self.events:
            if event.kind is EventKind.HIT:
                return event
        return None

    @property
    def outcome(self) -> str:
        return " + ".join(self.terminal_labels)
