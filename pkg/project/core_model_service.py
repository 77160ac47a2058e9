import logging
import math
import uuid
from enum import Enum
from typing import Dict, Iterable, List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from project.errors import DomainError, SchemaError

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-9

PHASED_SUBSYSTEMS = ("mechanism", "internal-clock")


class Subsystem(str, Enum):
    DETECTOR = "detector"
    MECHANISM = "mechanism"
    INTERNAL_CLOCK = "internal-clock"
    INDICATOR = "indicator"
    CAT = "cat"
    OBSERVER_BRAIN = "observer-brain"
    OBSERVER_RAW = "observer-raw"

    @property
    def slot(self) -> "Subsystem":
        # X and B_* are two roles of the same observer slot.
        if self is Subsystem.OBSERVER_RAW:
            return Subsystem.OBSERVER_BRAIN
        return self


class ComponentKind(str, Enum):
    REALIZED = "realized"
    READY = "ready"
    PHANTOM = "phantom"


class ProcessKind(str, Enum):
    MECHANISM = "mechanism"
    INTERNAL_CLOCK = "internal-clock"
    OBSERVATION = "observation"


class RateForm(str, Enum):
    EXPONENTIAL_DECAY = "exponential-decay"
    CONSTANT = "constant"
    RAMP = "ramp"


class StateLabel(BaseModel):
    """
    One subsystem's state symbol. Mechanisms and internal clocks also carry a phase in [0, 1],
    0 being the t0-configuration and 1 the t_f-configuration.
    """

    model_config = ConfigDict(frozen=True)

    subsystem: Subsystem
    symbol: str
    phase: Optional[float] = None

    @model_validator(mode="after")
    def _check_phase(self) -> "StateLabel":
        phased = self.subsystem.value in PHASED_SUBSYSTEMS
        if phased and self.phase is None:
            raise ValueError(f"{self.subsystem.value} label needs a phase")
        if not phased and self.phase is not None:
            raise ValueError(f"{self.subsystem.value} label cannot carry a phase")
        if self.phase is not None and not 0.0 <= self.phase <= 1.0:
            raise ValueError(f"phase {self.phase} outside [0, 1]")
        return self

    @property
    def slot(self) -> Subsystem:
        return self.subsystem.slot

    def with_phase(self, phase: float) -> "StateLabel":
        return StateLabel(subsystem=self.subsystem, symbol=self.symbol, phase=min(1.0, max(0.0, phase)))

    def render(self, ready: bool = False) -> str:
        text = self.symbol
        if self.phase is not None:
            end = "tff" if self.subsystem is Subsystem.INTERNAL_CLOCK else "tf"
            if self.phase <= 0.0:
                text = f"{self.symbol}(t0)"
            elif self.phase >= 1.0:
                text = f"{self.symbol}({end})"
            else:
                text = f"{self.symbol}({self.phase:.3f})"
        return f"_{text}" if ready else text


class ClassicalProcess(BaseModel):
    """
    A continuous classical evolution running on a realized component: the mechanism M, the
    cat's internal clock N or an observer's physiological interaction. Progress is computed
    from the anchor so that completion times are exact. On a ready component the process is
    frozen (no anchor) until the component is realized, unless the ready row runs it in
    parallel with its source.
    """

    kind: ProcessKind
    duration: float = Field(gt=0.0)
    progress: float = 0.0
    anchor_time: Optional[float] = None
    anchor_progress: float = 0.0

    def progress_at(self, t: float) -> float:
        if self.anchor_time is None:
            return self.progress
        return min(1.0, self.anchor_progress + (t - self.anchor_time) / self.duration)

    def completion_time(self) -> Optional[float]:
        if self.anchor_time is None:
            return None
        return self.anchor_time + (1.0 - self.anchor_progress) * self.duration

    def anchored(self, t: float) -> "ClassicalProcess":
        return self.model_copy(update={"anchor_time": t, "anchor_progress": self.progress})


class Component(BaseModel):
    """
    A product of StateLabels carrying a square modulus. Ready components list the slots whose
    states are ready (underlined); a phantom keeps the list it had when it stopped receiving current.
    """

    id: str
    labels: List[StateLabel]
    modulus: float = Field(ge=0.0)
    kind: ComponentKind
    born_at: float = 0.0
    ready_symbols: List[Subsystem] = Field(default_factory=list)
    processes: List[ClassicalProcess] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_shape(self) -> "Component":
        slots = [label.slot for label in self.labels]
        if len(set(slots)) != len(slots):
            raise ValueError("duplicate subsystem in component labels")
        if self.kind is ComponentKind.READY and not self.ready_symbols:
            raise ValueError("a ready component needs at least one ready state")
        if self.kind is ComponentKind.REALIZED and self.ready_symbols:
            raise ValueError("a realized component cannot hold ready states")
        return self

    def label(self, slot: Subsystem) -> Optional[StateLabel]:
        for label in self.labels:
            if label.slot is slot.slot:
                return label
        return None

    def replace_label(self, new: StateLabel) -> None:
        self.labels = [new if label.slot is new.slot else label for label in self.labels]

    def render(self) -> str:
        ready = set(self.ready_symbols) if self.kind is not ComponentKind.REALIZED else set()
        return "·".join(label.render(label.slot in ready) for label in self.labels)


class RateFunction(BaseModel):
    """
    Time-dependent probability current carried by an edge. `rate` is lambda for
    exponential-decay, the level for constant and the slope for ramp. Identically
    zero before t0 and at or after the cutoff.
    """

    form: RateForm = RateForm.EXPONENTIAL_DECAY
    rate: float = Field(ge=0.0)
    t0: float = 0.0
    cutoff: float

    def evaluate(self, t: float) -> float:
        if t < self.t0 or t >= self.cutoff:
            return 0.0
        if self.form is RateForm.EXPONENTIAL_DECAY:
            return self.rate * math.exp(-self.rate * (t - self.t0))
        if self.form is RateForm.CONSTANT:
            return self.rate
        return self.rate * (t - self.t0)


class CurrentEdge(BaseModel):
    """
    Probability current flowing one way from a realized component into a ready one.
    """

    model_config = ConfigDict(populate_by_name=True)

    source: str = Field(alias="from")
    target: str = Field(alias="to")
    rate_fn: RateFunction
    active_until: float
    active: bool = True

    def rate(self, t: float) -> float:
        if not self.active or t >= self.active_until:
            return 0.0
        return self.rate_fn.evaluate(t)


class SubsystemDecl(BaseModel):
    subsystem: Subsystem
    alphabet: List[str]


class Superposition(BaseModel):
    """
    The live components of a system, the current edges between them and their total square modulus.
    `superseded` counts the ready components of an evolving row's continuum that were replaced
    by a newer parallel one (each became a phantom).
    """

    subsystems: List[SubsystemDecl]
    components: List[Component] = Field(default_factory=list)
    edges: List[CurrentEdge] = Field(default_factory=list)
    total_s: float = 0.0
    next_id: int = 0
    superseded: int = 0
    warnings: List[str] = Field(default_factory=list)

    def component(self, component_id: str) -> Optional[Component]:
        for component in self.components:
            if component.id == component_id:
                return component
        return None

    def allocate_id(self) -> str:
        component_id = f"c{self.next_id}"
        self.next_id += 1
        return component_id

    def of_kind(self, kind: ComponentKind) -> List[Component]:
        return [c for c in self.components if c.kind is kind]

    def live_modulus(self) -> float:
        return sum(c.modulus for c in self.components if c.kind is ComponentKind.REALIZED)

    def slots(self) -> List[Subsystem]:
        return [decl.subsystem.slot for decl in self.subsystems]


class Violation(BaseModel):
    code: str
    message: str
    subject: Optional[str] = None


class ValidationReport(BaseModel):
    """
    Result of `validate`: ok is True iff no violation was found.
    """

    ok: bool
    violations: List[Violation] = Field(default_factory=list)


def make_component(
    labels: List[StateLabel],
    modulus: float,
    kind: ComponentKind,
    *,
    ready: Iterable[Subsystem] = (),
    declared: Optional[List[Subsystem]] = None,
    component_id: Optional[str] = None,
    born_at: float = 0.0,
) -> Component:
    """
    Builds a Component after checking its labels and modulus.

    Args:
        labels (List[StateLabel]): One label per subsystem, in declaration order.
        modulus (float): Square modulus, must be nonnegative.
        kind (ComponentKind): realized, ready or phantom.
        ready (Iterable[Subsystem]): Slots whose states are ready (underlined). Required for ready components.
        declared (Optional[List[Subsystem]]): When given, labels must cover exactly these subsystems.
        component_id (Optional[str]): Identifier; a fresh one is generated when omitted.
        born_at (float): Creation time in seconds.

    Returns:
        Component: The validated component.

    Raises:
        SchemaError: On duplicate or missing subsystems, or ready states inconsistent with the kind.
        DomainError: On a negative modulus.

    Example:
        make_component([d0, m0, i0], 1.0, ComponentKind.REALIZED)
        > Component(labels=[d0, M(t0), i0], modulus=1.0, kind=realized)
    """
    if modulus < 0:
        raise DomainError(f"negative square modulus {modulus}")
    slots = [label.slot for label in labels]
    if len(set(slots)) != len(slots):
        raise SchemaError(f"duplicate subsystem in {[s.value for s in slots]}")
    if declared is not None:
        wanted = {s.slot for s in declared}
        if set(slots) != wanted or len(slots) != len(declared):
            raise SchemaError(
                f"labels cover {sorted(s.value for s in slots)}, expected {sorted(s.value for s in wanted)}"
            )
    ready_set = {s.slot for s in ready}
    if any(s not in slots for s in ready_set):
        raise SchemaError("ready state refers to a subsystem the component does not carry")
    ready_slots = [s for s in slots if s in ready_set]
    if kind is ComponentKind.READY and not ready_slots:
        raise SchemaError("a ready component needs at least one ready state")
    if kind is ComponentKind.REALIZED and ready_slots:
        raise SchemaError("a realized component cannot hold ready states")
    return Component(
        id=component_id or uuid.uuid4().hex[:12],
        labels=list(labels),
        modulus=modulus,
        kind=kind,
        born_at=born_at,
        ready_symbols=ready_slots,
    )


def make_superposition(
    subsystems: List[SubsystemDecl],
    components: Iterable[Component] = (),
    edges: Iterable[CurrentEdge] = (),
) -> Superposition:
    components = list(components)
    return Superposition(
        subsystems=subsystems,
        components=components,
        edges=list(edges),
        total_s=sum(c.modulus for c in components),
        next_id=len(components),
    )


def total_modulus(sup: Superposition) -> float:
    """
    Sum of the square moduli of every component still held by the superposition, phantoms included.

    Args:
        sup (Superposition): The system.

    Returns:
        float: Total square modulus; 0.0 for an empty superposition.
    """
    return math.fsum(c.modulus for c in sup.components)


def validate(sup: Superposition) -> ValidationReport:
    """
    Checks the type invariants of every component and edge plus the nRule-4 edge direction.

    Args:
        sup (Superposition): The system to check.

    Returns:
        ValidationReport: ok, or the structured list of violations found.

    Example:
        validate(exposed_system)
        > ValidationReport(ok=True, violations=[])
    """
    violations: List[Violation] = []
    declared = {decl.subsystem.slot: decl for decl in sup.subsystems}
    seen: Dict[str, Component] = {}

    for component in sup.components:
        if component.id in seen:
            violations.append(Violation(code="duplicate-id", message="component id is not unique", subject=component.id))
        seen[component.id] = component
        if component.modulus < 0:
            violations.append(Violation(code="negative-modulus", message="negative square modulus", subject=component.id))
        slots = [label.slot for label in component.labels]
        if sorted(s.value for s in slots) != sorted(s.value for s in declared) or len(slots) != len(declared):
            violations.append(
                Violation(code="subsystems", message="labels do not cover the declared subsystems once", subject=component.id)
            )
        for label in component.labels:
            decl = declared.get(label.slot)
            if decl is not None and label.symbol not in decl.alphabet:
                violations.append(
                    Violation(
                        code="alphabet",
                        message=f"symbol {label.symbol!r} is not in the {decl.subsystem.value} alphabet",
                        subject=component.id,
                    )
                )
        if component.kind is ComponentKind.READY and not component.ready_symbols:
            violations.append(Violation(code="ready-kind", message="ready component has no ready states", subject=component.id))
        if component.kind is ComponentKind.REALIZED and component.ready_symbols:
            violations.append(Violation(code="ready-kind", message="realized component holds ready states", subject=component.id))

    for edge in sup.edges:
        source = seen.get(edge.source)
        target = seen.get(edge.target)
        if target is None or (source is None and edge.active):
            violations.append(
                Violation(code="dangling-edge", message="edge refers to a missing component", subject=f"{edge.source}->{edge.target}")
            )
            continue
        if edge.active and source is not None and source.kind is not ComponentKind.REALIZED:
            violations.append(
                Violation(
                    code="nrule-4",
                    message=f"{source.kind.value} component emits current",
                    subject=source.id,
                )
            )

    accounted = total_modulus(sup)
    if abs(accounted - sup.total_s) > MASS_TOLERANCE:
        violations.append(
            Violation(code="mass-accounting", message=f"sum of moduli {accounted!r} differs from total_s {sup.total_s!r}")
        )
    return ValidationReport(ok=not violations, violations=violations)
