import logging
import math
from enum import Enum
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from project.core_model_service import (
    Component,
    ComponentKind,
    ProcessKind,
    RateForm,
    RateFunction,
    StateLabel,
    Subsystem,
    SubsystemDecl,
    Superposition,
    make_component,
    make_superposition,
)
from project.dynamics_service import begin_process, spawn_ready
from project.errors import SchemaError

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)

START_TIME = 0.0

DEFAULT_T_HALF = 1.0
DEFAULT_MECH_DURATION = 0.2
DEFAULT_INTERNAL_DURATION = 0.8
DEFAULT_OBS_LOOK_TIME = 0.3
DEFAULT_OBS_PI = 0.05

FLAG_LATE_OBSERVATION = "observation-not-before-cutoff"


class ScenarioVersion(str, Enum):
    APPARATUS = "apparatus"
    APPARATUS_OBSERVER = "apparatus+observer"
    CAT1 = "cat1"
    CAT1_OBSERVER = "cat1+observer"
    CAT2 = "cat2"
    CAT2_OBSERVER = "cat2+observer"
    CAT2_NATURAL = "cat2-natural"

    @property
    def base(self) -> "ScenarioVersion":
        return ScenarioVersion(self.value.replace("+observer", ""))

    @property
    def has_observer(self) -> bool:
        return self.value.endswith("+observer")


class Ordering(str, Enum):
    EXTERNAL_FIRST = "external-first"
    INTERNAL_FIRST = "internal-first"


class ScheduleAction(str, Enum):
    SPAWN_READY = "spawn-ready"
    BEGIN_OBSERVATION = "begin-observation"
    BEGIN_INTERNAL_CLOCK = "begin-internal-clock"
    BEGIN_MECHANISM = "begin-mechanism"
    CUTOFF = "cutoff"


DESCRIPTIONS = {
    ScenarioVersion.APPARATUS: "source, detector d0/d1, mechanism M and indicator i0/i1 (no cat, no observer)",
    ScenarioVersion.APPARATUS_OBSERVER: "apparatus with an observer looking at the indicator at t_look",
    ScenarioVersion.CAT1: "version I: a conscious cat C is made unconscious U by the mechanism",
    ScenarioVersion.CAT1_OBSERVER: "version I with an outside observer looking at the cat",
    ScenarioVersion.CAT2: "version II: an unconscious cat U is woken (C) by the alarm M",
    ScenarioVersion.CAT2_OBSERVER: "version II with an outside observer looking at the cat",
    ScenarioVersion.CAT2_NATURAL: "version II with the cat's internal alarm N; ordering external-first or internal-first",
}

BRAIN_FOR = {"i0": "B0", "I0": "B0", "i1": "B1", "I1": "B1", "C": "B_C", "U": "B_U"}


def declarations(version: ScenarioVersion) -> List[SubsystemDecl]:
    """
    Subsystems and alphabets of a configuration, in label order.
    """
    decls = [
        SubsystemDecl(subsystem=Subsystem.DETECTOR, alphabet=["d0", "d1"]),
        SubsystemDecl(subsystem=Subsystem.MECHANISM, alphabet=["M"]),
    ]
    base = version.base
    if base is ScenarioVersion.APPARATUS:
        indicators = ["i0", "i1", "I0", "I1"] if version.has_observer else ["i0", "i1"]
        decls.append(SubsystemDecl(subsystem=Subsystem.INDICATOR, alphabet=indicators))
    elif base is ScenarioVersion.CAT2_NATURAL:
        decls.append(SubsystemDecl(subsystem=Subsystem.INTERNAL_CLOCK, alphabet=["N"]))
        decls.append(SubsystemDecl(subsystem=Subsystem.CAT, alphabet=["C", "U"]))
    else:
        decls.append(SubsystemDecl(subsystem=Subsystem.CAT, alphabet=["C", "U"]))
    if version.has_observer:
        brains = ["B0", "B1"] if base is ScenarioVersion.APPARATUS else ["B_C", "B_U"]
        decls.append(SubsystemDecl(subsystem=Subsystem.OBSERVER_BRAIN, alphabet=["X"] + brains))
    return decls


def _as_float(value: Any) -> Optional[float]:
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


class ScenarioSpec(BaseModel):
    """
    Declarative description of one configuration. Exactly one of lambda / t_half determines the
    other (t_half = ln2 / lambda); observation parameters belong to the +observer versions only
    and default to t_look = 0.3 s, pi = 0.05 s; ordering belongs to cat2-natural only.
    """

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    name: str = ""
    version: ScenarioVersion
    decay_constant: float = Field(alias="lambda", gt=0.0)
    t_half: float = Field(gt=0.0)
    mech_duration: float = Field(default=DEFAULT_MECH_DURATION, gt=0.0)
    internal_duration: float = Field(default=DEFAULT_INTERNAL_DURATION, gt=0.0)
    obs_look_time: Optional[float] = None
    obs_pi: Optional[float] = Field(default=None, gt=0.0)
    ordering: Optional[Ordering] = None
    subsystems: List[SubsystemDecl] = Field(default_factory=list)

    @model_validator(mode="before")
    @classmethod
    def _derive(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        lam = data.pop("decay_constant", None)
        lam = data.get("lambda", lam)
        if lam is not None:
            data["lambda"] = lam
        half = data.get("t_half")
        lam_f, half_f = _as_float(lam), _as_float(half)
        if lam is None and half is None:
            half_f = DEFAULT_T_HALF
            data["t_half"] = half_f
        if lam is None and half_f is not None and half_f > 0:
            data["lambda"] = LN2 / half_f
        elif half is None and lam_f is not None and lam_f > 0:
            data["t_half"] = LN2 / lam_f
        elif lam is not None:
            if lam_f and half_f and abs(half_f - LN2 / lam_f) > 1e-12 * max(1.0, half_f):
                raise ValueError(f"lambda={lam_f!r} and t_half={half_f!r} disagree (t_half must be ln2/lambda)")

        try:
            version = ScenarioVersion(data.get("version"))
        except ValueError:
            return data
        if version.has_observer and data.get("obs_look_time") is None and data.get("obs_pi") is None:
            data["obs_look_time"] = DEFAULT_OBS_LOOK_TIME
            data["obs_pi"] = DEFAULT_OBS_PI
        if not data.get("name"):
            data["name"] = version.value
        if not data.get("subsystems"):
            data["subsystems"] = declarations(version)
        return data

    @model_validator(mode="after")
    def _check(self) -> "ScenarioSpec":
        if (self.obs_look_time is None) != (self.obs_pi is None):
            raise ValueError("obs_pi and obs_look_time must be given together")
        if self.obs_look_time is not None and not self.version.has_observer:
            raise ValueError(f"observation parameters need an observer version, not {self.version.value}")
        if self.obs_look_time is not None and self.obs_look_time < START_TIME:
            raise ValueError("obs_look_time lies before t0")
        if self.version is ScenarioVersion.CAT2_NATURAL and self.ordering is None:
            raise ValueError("cat2-natural needs an ordering (external-first or internal-first)")
        if self.version is not ScenarioVersion.CAT2_NATURAL and self.ordering is not None:
            raise ValueError("ordering applies to cat2-natural only")
        return self

    @property
    def default_dt(self) -> float:
        return 1e-3 * self.t_half


class InteractionEntry(BaseModel):
    """
    One scheduled interaction: fired at trigger_time, or whenever trigger_event happens.
    """

    trigger_time: Optional[float] = None
    trigger_event: Optional[Literal["hit", "phase-complete"]] = None
    action: ScheduleAction
    duration: Optional[float] = None
    rate_fn: Optional[RateFunction] = None
    new_labels: List[StateLabel] = Field(default_factory=list)
    ready: List[Subsystem] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_trigger(self) -> "InteractionEntry":
        if (self.trigger_time is None) == (self.trigger_event is None):
            raise ValueError("an entry is triggered either by a time or by an event")
        return self


class InteractionSchedule(BaseModel):
    entries: List[InteractionEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_order(self) -> "InteractionSchedule":
        times = [e.trigger_time for e in self.entries if e.trigger_time is not None]
        if times != sorted(times):
            raise ValueError("timed entries must be sorted by trigger time")
        return self

    def timed(self) -> List[InteractionEntry]:
        return [e for e in self.entries if e.trigger_time is not None]

    def on(self, event: str) -> List[InteractionEntry]:
        return [e for e in self.entries if e.trigger_event == event]


class LabelRewrite(BaseModel):
    slot: Subsystem
    before: str
    after: str


class Scenario(BaseModel):
    """
    A built configuration: the initial superposition at t0, its interaction schedule, and the
    label changes each classical process produces when it completes.
    """

    spec: ScenarioSpec
    initial: Superposition
    schedule: InteractionSchedule
    effects: Dict[ProcessKind, List[LabelRewrite]] = Field(default_factory=dict)
    observed: Optional[Subsystem] = None
    exposure_start: float = START_TIME
    cutoff: float
    flags: List[str] = Field(default_factory=list)

    def apply_completion(self, component: Component, kind: ProcessKind) -> None:
        for rewrite in self.effects.get(kind, []):
            label = component.label(rewrite.slot)
            if label is not None and label.symbol == rewrite.before:
                component.replace_label(label.model_copy(update={"symbol": rewrite.after}))
        observer = component.label(Subsystem.OBSERVER_BRAIN)
        if observer is None or self.observed is None:
            return
        if kind is ProcessKind.OBSERVATION or observer.symbol != "X":
            seen = component.label(self.observed)
            component.replace_label(StateLabel(subsystem=Subsystem.OBSERVER_BRAIN, symbol=BRAIN_FOR[seen.symbol]))


def _label(subsystem: Subsystem, symbol: str) -> StateLabel:
    phase = 0.0 if subsystem.value in ("mechanism", "internal-clock") else None
    return StateLabel(subsystem=subsystem, symbol=symbol, phase=phase)


def _decay(spec: ScenarioSpec, t0: float) -> RateFunction:
    return RateFunction(form=RateForm.EXPONENTIAL_DECAY, rate=spec.decay_constant, t0=t0, cutoff=t0 + spec.t_half)


def _exposed(spec: ScenarioSpec, subsystems: List[SubsystemDecl], labels: List[StateLabel]) -> Superposition:
    start = make_component(
        labels,
        1.0,
        ComponentKind.REALIZED,
        declared=[d.subsystem for d in subsystems],
        component_id="c0",
        born_at=START_TIME,
    )
    sup = make_superposition(subsystems, [start])
    return spawn_ready(
        sup,
        start.id,
        [_label(Subsystem.DETECTOR, "d1")],
        {Subsystem.DETECTOR},
        rate_fn=_decay(spec, START_TIME),
        t=START_TIME,
    )


def _require(spec: ScenarioSpec, *versions: ScenarioVersion) -> None:
    if spec.version not in versions:
        raise SchemaError(f"scenario version {spec.version.value} is not one of {[v.value for v in versions]}")


def _decay_scenario(spec: ScenarioSpec, payload: Subsystem, symbol: str, effects: Dict) -> Scenario:
    base = spec.version.base
    subsystems = declarations(base)
    labels = [_label(Subsystem.DETECTOR, "d0"), _label(Subsystem.MECHANISM, "M"), _label(payload, symbol)]
    cutoff = START_TIME + spec.t_half
    schedule = InteractionSchedule(
        entries=[
            InteractionEntry(trigger_time=cutoff, action=ScheduleAction.CUTOFF),
            InteractionEntry(trigger_event="hit", action=ScheduleAction.BEGIN_MECHANISM, duration=spec.mech_duration),
        ]
    )
    return Scenario(
        spec=spec.model_copy(update={"version": base, "obs_look_time": None, "obs_pi": None, "subsystems": subsystems}),
        initial=_exposed(spec, subsystems, labels),
        schedule=schedule,
        effects=effects,
        cutoff=cutoff,
    )


def _finish(spec: ScenarioSpec, scenario: Scenario, with_observer: bool) -> Scenario:
    if with_observer:
        look = DEFAULT_OBS_LOOK_TIME if spec.obs_look_time is None else spec.obs_look_time
        pi = DEFAULT_OBS_PI if spec.obs_pi is None else spec.obs_pi
        scenario = attach_observer(scenario, look, pi)
    if spec.version.has_observer or not with_observer:
        scenario = scenario.model_copy(update={"spec": spec})
    logger.debug("built %s: %d components, %d schedule entries", spec.name, len(scenario.initial.components), len(scenario.schedule.entries))
    return scenario


def build_apparatus(spec: ScenarioSpec, with_observer: bool = False) -> Scenario:
    """
    The bare apparatus: d0·M(t0)·i0 feeding the ready _d1·M(t0)·i0 with the decay current until
    t_half. On a hit the mechanism runs mech_duration and flips the indicator to i1.

    Args:
        spec (ScenarioSpec): apparatus or apparatus+observer.
        with_observer (bool): Attach the observer even for a bare apparatus spec.

    Returns:
        Scenario: The exposed apparatus with its schedule.

    Example:
        build_apparatus(ScenarioSpec(version="apparatus")).initial.components
        > [d0·M(t0)·i0 (1.0), _d1·M(t0)·i0 (0.0)]
    """
    _require(spec, ScenarioVersion.APPARATUS, ScenarioVersion.APPARATUS_OBSERVER)
    effects = {
        ProcessKind.MECHANISM: [
            LabelRewrite(slot=Subsystem.INDICATOR, before="i0", after="i1"),
            LabelRewrite(slot=Subsystem.INDICATOR, before="I0", after="I1"),
        ]
    }
    scenario = _decay_scenario(spec, Subsystem.INDICATOR, "i0", effects)
    return _finish(spec, scenario, with_observer or spec.version.has_observer)


def build_cat_v1(spec: ScenarioSpec, with_observer: bool = False) -> Scenario:
    """
    Version I: the conscious cat C entangled with the mechanism; on a hit M runs to t_f and the cat becomes U.
    """
    _require(spec, ScenarioVersion.CAT1, ScenarioVersion.CAT1_OBSERVER)
    effects = {ProcessKind.MECHANISM: [LabelRewrite(slot=Subsystem.CAT, before="C", after="U")]}
    scenario = _decay_scenario(spec, Subsystem.CAT, "C", effects)
    return _finish(spec, scenario, with_observer or spec.version.has_observer)


def build_cat_v2(spec: ScenarioSpec, with_observer: bool = False) -> Scenario:
    """
    Version II: the unconscious cat U; on a hit the alarm M runs to t_f and wakes it (C).
    """
    _require(spec, ScenarioVersion.CAT2, ScenarioVersion.CAT2_OBSERVER)
    effects = {ProcessKind.MECHANISM: [LabelRewrite(slot=Subsystem.CAT, before="U", after="C")]}
    scenario = _decay_scenario(spec, Subsystem.CAT, "U", effects)
    return _finish(spec, scenario, with_observer or spec.version.has_observer)


def build_natural_wakeup(spec: ScenarioSpec, ordering: Optional[Ordering] = None) -> Scenario:
    """
    Version II with the cat's own internal alarm N next to the external alarm M. Either completion
    wakes the cat. The ordering decides which comes first: external-first opens the detector at t0
    with N running in both rows from t0 until internal_duration after the cutoff, so any hit
    precedes N's completion; internal-first starts N at t0 and opens the detector only when N
    completes at t_ff (cutoff at t_ff + t_half).

    Args:
        spec (ScenarioSpec): A cat2-natural spec.
        ordering (Optional[Ordering]): Overrides spec.ordering.

    Returns:
        Scenario: The configuration for the requested ordering.

    Raises:
        SchemaError: If neither the argument nor the spec names an ordering.
    """
    _require(spec, ScenarioVersion.CAT2_NATURAL)
    ordering = ordering or spec.ordering
    if ordering is None:
        raise SchemaError("cat2-natural needs an ordering")
    subsystems = declarations(ScenarioVersion.CAT2_NATURAL)
    labels = [
        _label(Subsystem.DETECTOR, "d0"),
        _label(Subsystem.MECHANISM, "M"),
        _label(Subsystem.INTERNAL_CLOCK, "N"),
        _label(Subsystem.CAT, "U"),
    ]
    wake = [LabelRewrite(slot=Subsystem.CAT, before="U", after="C")]
    effects = {ProcessKind.MECHANISM: wake, ProcessKind.INTERNAL_CLOCK: wake}
    mechanism = InteractionEntry(trigger_event="hit", action=ScheduleAction.BEGIN_MECHANISM, duration=spec.mech_duration)

    if ordering is Ordering.EXTERNAL_FIRST:
        exposure = START_TIME
        cutoff = exposure + spec.t_half
        exposed = _exposed(spec, subsystems, labels)
        # N runs in both rows and completes internal_duration after the cutoff
        initial = begin_process(
            exposed,
            START_TIME,
            ProcessKind.INTERNAL_CLOCK,
            spec.t_half + spec.internal_duration,
            targets=[c.id for c in exposed.components],
        )
        entries = [InteractionEntry(trigger_time=cutoff, action=ScheduleAction.CUTOFF), mechanism]
    else:
        exposure = START_TIME + spec.internal_duration
        cutoff = exposure + spec.t_half
        start = make_component(labels, 1.0, ComponentKind.REALIZED, component_id="c0", born_at=START_TIME)
        initial = make_superposition(subsystems, [start])
        entries = [
            InteractionEntry(
                trigger_time=START_TIME, action=ScheduleAction.BEGIN_INTERNAL_CLOCK, duration=spec.internal_duration
            ),
            InteractionEntry(
                trigger_time=exposure,
                action=ScheduleAction.SPAWN_READY,
                rate_fn=_decay(spec, exposure),
                new_labels=[_label(Subsystem.DETECTOR, "d1")],
                ready=[Subsystem.DETECTOR],
            ),
            InteractionEntry(trigger_time=cutoff, action=ScheduleAction.CUTOFF),
            mechanism,
        ]
    scenario = Scenario(
        spec=spec.model_copy(update={"ordering": ordering}),
        initial=initial,
        schedule=InteractionSchedule(entries=entries),
        effects=effects,
        exposure_start=exposure,
        cutoff=cutoff,
    )
    logger.debug("built %s (%s)", spec.name, ordering.value)
    return scenario


def attach_observer(base: Scenario, t_look: float, pi: float) -> Scenario:
    """
    Puts an observer X in the wings of an apparatus or cat scenario. At t_look the realized row
    starts a physiological interaction lasting pi; the ready row follows it as a continuum of
    ready components of which only the newest receives current. At t_ob = t_look + pi the
    observer's brain state matches what it looked at (B0/B1 for the indicator, B_C/B_U for the
    cat) and from then on follows it.

    Args:
        base (Scenario): apparatus, cat1 or cat2 scenario without an observer.
        t_look (float): Start of the look in seconds.
        pi (float): Length of the physiological interaction in seconds.

    Returns:
        Scenario: The observed configuration; flagged when the look does not finish before the cutoff.

    Raises:
        SchemaError: If t_look lies before t0, pi is not positive, or the base is not observable.
    """
    observable = {
        ScenarioVersion.APPARATUS: (ScenarioVersion.APPARATUS_OBSERVER, Subsystem.INDICATOR),
        ScenarioVersion.CAT1: (ScenarioVersion.CAT1_OBSERVER, Subsystem.CAT),
        ScenarioVersion.CAT2: (ScenarioVersion.CAT2_OBSERVER, Subsystem.CAT),
    }
    if base.spec.version not in observable:
        raise SchemaError(f"cannot attach an observer to {base.spec.version.value}")
    if t_look is None or pi is None:
        raise SchemaError("an observer needs both t_look and pi")
    if t_look < START_TIME:
        raise SchemaError(f"t_look={t_look!r} lies before t0")
    if pi <= 0:
        raise SchemaError(f"physiological interaction length must be positive, got {pi!r}")
    version, observed = observable[base.spec.version]

    flags = list(base.flags)
    if t_look + pi >= base.cutoff:
        logger.warning(
            "observation window [%s, %s] does not close before the cutoff at %s", t_look, t_look + pi, base.cutoff
        )
        flags.append(FLAG_LATE_OBSERVATION)

    subsystems = declarations(version)
    initial = base.initial.model_copy(deep=True)
    initial.subsystems = subsystems
    for component in initial.components:
        component.labels = component.labels + [StateLabel(subsystem=Subsystem.OBSERVER_RAW, symbol="X")]

    entries = base.schedule.entries + [
        InteractionEntry(trigger_time=t_look, action=ScheduleAction.BEGIN_OBSERVATION, duration=pi)
    ]
    timed = sorted((e for e in entries if e.trigger_time is not None), key=lambda e: e.trigger_time)
    effects = dict(base.effects)
    if observed is Subsystem.INDICATOR:
        effects[ProcessKind.OBSERVATION] = [
            LabelRewrite(slot=Subsystem.INDICATOR, before="i0", after="I0"),
            LabelRewrite(slot=Subsystem.INDICATOR, before="i1", after="I1"),
        ]
    return base.model_copy(
        update={
            "spec": base.spec.model_copy(
                update={"version": version, "obs_look_time": t_look, "obs_pi": pi, "subsystems": subsystems}
            ),
            "initial": initial,
            "schedule": InteractionSchedule(entries=timed + [e for e in entries if e.trigger_time is None]),
            "effects": effects,
            "observed": observed,
            "flags": flags,
        }
    )


def build_scenario(spec: ScenarioSpec) -> Scenario:
    """
    Dispatches a spec to the builder of its version.
    """
    base = spec.version.base
    if base is ScenarioVersion.APPARATUS:
        return build_apparatus(spec)
    if base is ScenarioVersion.CAT1:
        return build_cat_v1(spec)
    if base is ScenarioVersion.CAT2:
        return build_cat_v2(spec)
    return build_natural_wakeup(spec)
