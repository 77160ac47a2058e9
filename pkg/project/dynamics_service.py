import logging
import math
from typing import Dict, List, Optional, Set, Tuple

import numpy as np
from pydantic import BaseModel

from project.core_model_service import (
    ClassicalProcess,
    Component,
    ComponentKind,
    CurrentEdge,
    ProcessKind,
    RateFunction,
    StateLabel,
    Subsystem,
    Superposition,
)
from project.errors import DomainError, RuleViolation, SchemaError, StepSizeError

logger = logging.getLogger(__name__)

TIME_EPS = 1e-9

DEFAULT_SUBSTEP = 1e-3

# p = rate * dt must stay below this for the per-step Bernoulli to be a fair discretization
HIT_PROBABILITY_CAP = 0.1

_PHASE_SLOT = {
    ProcessKind.MECHANISM: Subsystem.MECHANISM,
    ProcessKind.INTERNAL_CLOCK: Subsystem.INTERNAL_CLOCK,
}


class HitEvent(BaseModel):
    """
    A stochastic choice of a ready component under nRule (1).
    """

    time: float
    chosen: str
    rate_at_hit: float


class ProcessCompletion(BaseModel):
    component: str
    kind: ProcessKind
    time: float


def decay_current(t: float, rf: RateFunction) -> float:
    """
    Instantaneous probability current J(t) for a rate function.

    Args:
        t (float): Time in seconds, t >= rf.t0.
        rf (RateFunction): The edge's rate function.

    Returns:
        float: J(t) in 1/seconds; zero at or after the cutoff.

    Example:
        decay_current(0.0, RateFunction(rate=math.log(2), cutoff=1.0))
        > 0.6931471805599453
    """
    return rf.evaluate(t)


def integrate_current(rf: RateFunction, t: float, dt: float, max_substep: float = DEFAULT_SUBSTEP) -> float:
    n = max(1, math.ceil(dt / max_substep - TIME_EPS))
    h = dt / n
    return math.fsum(rf.evaluate(t + (k + 0.5) * h) for k in range(n)) * h


def advance(sup: Superposition, t: float, dt: float, max_substep: float = DEFAULT_SUBSTEP) -> Superposition:
    """
    Moves the system from t to t + dt: every active edge transfers the integral of its current
    (midpoint rule over substeps no longer than max_substep) from its source to its target, the
    classical processes of realized components advance (and the live ones a ready row runs in
    parallel with its source), and edges past their cutoff go inactive.
    Phantom moduli never change.

    Args:
        sup (Superposition): A valid system.
        t (float): Start of the step in seconds.
        dt (float): Step length in seconds, positive.
        max_substep (float): Longest midpoint substep used for the current integral.

    Returns:
        Superposition: The advanced copy.

    Raises:
        DomainError: If dt is not positive.
        RuleViolation: If an active edge leaves a non-realized component or feeds a non-ready one.
    """
    if dt <= 0:
        raise DomainError(f"step must be positive, got {dt}")
    out = sup.model_copy(deep=True)
    by_id = {c.id: c for c in out.components}
    t_end = t + dt

    for edge in out.edges:
        if not edge.active:
            continue
        source = by_id.get(edge.source)
        target = by_id.get(edge.target)
        if source is None or target is None:
            raise RuleViolation(f"edge {edge.source}->{edge.target} refers to a missing component")
        if source.kind is not ComponentKind.REALIZED:
            raise RuleViolation(f"{source.kind.value} component {source.id} emits current")
        if target.kind is not ComponentKind.READY:
            raise RuleViolation(f"current flows into {target.kind.value} component {target.id}")
        amount = integrate_current(edge.rate_fn, t, min(dt, max(0.0, edge.active_until - t)), max_substep)
        if amount > source.modulus:
            message = f"transfer {amount!r} exceeds source modulus {source.modulus!r} at t={t_end!r}; clamped"
            logger.warning(message)
            out.warnings.append(message)
            amount = source.modulus
        source.modulus -= amount
        target.modulus += amount
        if t_end >= edge.active_until - TIME_EPS:
            edge.active = False

    for component in out.components:
        if component.kind is ComponentKind.PHANTOM or not component.processes:
            continue
        advanced = []
        for process in component.processes:
            if component.kind is ComponentKind.READY and process.anchor_time is None:
                advanced.append(process)
                continue
            progress = process.progress_at(t_end)
            advanced.append(process.model_copy(update={"progress": progress}))
            slot = _PHASE_SLOT.get(process.kind)
            label = component.label(slot) if slot is not None else None
            if label is not None:
                component.replace_label(label.with_phase(progress))
        component.processes = advanced
    return out


def ready_currents(sup: Superposition, t: float) -> Dict[str, float]:
    """
    Net current flowing into each ready component at t, positive entries only.
    """
    kinds = {c.id: c.kind for c in sup.components}
    net: Dict[str, float] = {}
    for edge in sup.edges:
        rate = edge.rate(t)
        if rate == 0.0:
            continue
        net[edge.target] = net.get(edge.target, 0.0) + rate
        net[edge.source] = net.get(edge.source, 0.0) - rate
    return {cid: j for cid, j in net.items() if j > 0.0 and kinds.get(cid) is ComponentKind.READY}


def hit_rate(sup: Superposition, t: float) -> float:
    """
    nRule (1): probability per unit time of a stochastic hit at t. The summed positive current
    into ready components is divided by the modulus of the realized components that emit it,
    so that the hazard of an exponential decay source is exactly lambda. Phantoms contribute nothing.

    Args:
        sup (Superposition): A valid system.
        t (float): Time in seconds.

    Returns:
        float: Hit rate in 1/seconds.

    Raises:
        DomainError: If the system has no square modulus, or current flows out of an empty realized row.

    Example:
        hit_rate(exposed_system, 0.0)
        > 0.6931471805599453
    """
    if sup.total_s <= 0.0:
        raise DomainError("hit rate of a system with zero total square modulus")
    total = math.fsum(ready_currents(sup, t).values())
    if total == 0.0:
        return 0.0
    live = sup.live_modulus()
    if live <= 0.0:
        raise DomainError("current flows but the realized modulus is zero")
    return total / live


def choose_ready(sup: Superposition, t: float, u: float) -> Optional[str]:
    """
    Picks a ready component receiving current with probability proportional to its J_n(t),
    using a uniform draw u in [0, 1).
    """
    currents = ready_currents(sup, t)
    if not currents:
        return None
    ids = [c.id for c in sup.components if c.id in currents]
    weights = np.array([currents[cid] for cid in ids])
    cumulative = np.cumsum(weights) / weights.sum()
    index = int(np.searchsorted(cumulative, u, side="right"))
    return ids[min(index, len(ids) - 1)]


def hit_at(sup: Superposition, t: float, rate: float, rng: np.random.Generator) -> HitEvent:
    """
    The hit of a step known to hit: the chosen ready component, drawing a uniform only when
    several of them compete.
    """
    currents = ready_currents(sup, t)
    if len(currents) == 1:
        chosen = next(iter(currents))
    else:
        chosen = choose_ready(sup, t, rng.random())
    return HitEvent(time=t, chosen=chosen, rate_at_hit=rate)


def hit_probability(sup: Superposition, t: float, dt: float) -> Tuple[float, float]:
    rate = hit_rate(sup, t)
    p = rate * dt
    if p >= HIT_PROBABILITY_CAP:
        raise StepSizeError(
            f"hit probability {p:.4f} per step at t={t!r} is not below {HIT_PROBABILITY_CAP}; use a smaller dt"
        )
    return rate, p


def sample_hit(sup: Superposition, t: float, dt: float, rng: np.random.Generator) -> Optional[HitEvent]:
    """
    Per-step Bernoulli version of nRule (1): with probability hit_rate(t)*dt a ready component is
    chosen, proportionally to the current it receives. One uniform is drawn every call; a second
    one only when several ready components compete.

    Args:
        sup (Superposition): A valid system.
        t (float): Time at which the hit is evaluated.
        dt (float): Step length in seconds.
        rng (np.random.Generator): Seeded stream.

    Returns:
        Optional[HitEvent]: The hit, or None.

    Raises:
        StepSizeError: If hit_rate*dt is 0.1 or more.
    """
    rate, p = hit_probability(sup, t, dt)
    if rng.random() >= p:
        return None
    return hit_at(sup, t, rate, rng)


def _frozen(processes: List[ClassicalProcess], t: float) -> List[ClassicalProcess]:
    return [p.model_copy(update={"progress": p.progress_at(t), "anchor_time": None}) for p in processes]


def spawn_ready(
    sup: Superposition,
    source: str,
    new_labels: List[StateLabel],
    marked_new: Set[Subsystem],
    *,
    rate_fn: RateFunction,
    t: float = 0.0,
) -> Superposition:
    """
    nRule (2): a discontinuous interaction on a realized component produces a zero-modulus
    component whose new states are all ready, fed by a current edge from the source.

    Args:
        sup (Superposition): The system.
        source (str): Id of the realized component the interaction acts on.
        new_labels (List[StateLabel]): Labels replacing the source's in the new component.
        marked_new (Set[Subsystem]): Slots of the new states; all of them become ready.
        rate_fn (RateFunction): Current carried by the new edge; its cutoff ends the edge.
        t (float): Creation time.

    Returns:
        Superposition: The system with the new ready component and edge.

    Raises:
        SchemaError: If marked_new is empty or names a slot not among new_labels, or the source is unknown.
        RuleViolation: If the source is ready or a phantom (nRule 4).

    Example:
        spawn_ready(exposed_start, "c0", [d1], {Subsystem.DETECTOR}, rate_fn=decay)
        > second component _d1·M(t0)·i0 with modulus 0.0
    """
    if not marked_new:
        raise SchemaError("all new states of a discontinuous interaction must be ready")
    new_slots = {label.slot for label in new_labels}
    marked = {s.slot for s in marked_new}
    if not marked <= new_slots:
        raise SchemaError("ready states must be among the new labels")
    out = sup.model_copy(deep=True)
    origin = out.component(source)
    if origin is None:
        raise SchemaError(f"unknown source component {source}")
    if origin.kind is not ComponentKind.REALIZED:
        raise RuleViolation(f"{origin.kind.value} component {source} cannot initiate an interaction")
    if not new_slots <= set(out.slots()):
        raise SchemaError("new labels refer to undeclared subsystems")

    replaced = {label.slot: label for label in new_labels}
    labels = [replaced.get(label.slot, label) for label in origin.labels]
    component = Component(
        id=out.allocate_id(),
        labels=labels,
        modulus=0.0,
        kind=ComponentKind.READY,
        born_at=t,
        ready_symbols=[label.slot for label in labels if label.slot in marked],
        processes=_frozen(origin.processes, t),
    )
    out.components.append(component)
    out.edges.append(CurrentEdge(source=source, target=component.id, rate_fn=rate_fn, active_until=rate_fn.cutoff))
    logger.debug("spawned ready component %s from %s at t=%s", component.id, source, t)
    return out


def reduce(sup: Superposition, hit: HitEvent) -> Superposition:
    """
    nRule (3): the chosen component's ready states become realized and every other component is
    reduced to zero and removed, together with every edge. total_s becomes the chosen modulus
    (no renormalization). Frozen classical processes of the chosen component resume at the hit
    time; live ones keep their anchor.

    Args:
        sup (Superposition): The system.
        hit (HitEvent): The stochastic choice.

    Returns:
        Superposition: A single realized component.

    Raises:
        RuleViolation: If the chosen component is not ready.
    """
    chosen = sup.component(hit.chosen)
    if chosen is None or chosen.kind is not ComponentKind.READY:
        kind = chosen.kind.value if chosen is not None else "missing"
        raise RuleViolation(f"hit on {kind} component {hit.chosen}")
    realized = chosen.model_copy(deep=True)
    realized.kind = ComponentKind.REALIZED
    realized.ready_symbols = []
    realized.processes = [p if p.anchor_time is not None else p.anchored(hit.time) for p in realized.processes]
    out = sup.model_copy(deep=True)
    out.components = [realized]
    out.edges = []
    out.total_s = realized.modulus
    return out


def _parallel_labels(source: Component, target: Component) -> List[StateLabel]:
    ready = set(target.ready_symbols)
    return [target.label(label.slot) if label.slot in ready else label for label in source.labels]


def _stale(sup: Superposition, edge: CurrentEdge, t: float) -> bool:
    # the edge's target no longer runs parallel to its evolving source
    if not edge.active or t >= edge.active_until - TIME_EPS:
        return False
    source = sup.component(edge.source)
    target = sup.component(edge.target)
    if source is None or target is None or target.kind is not ComponentKind.READY:
        return False
    if any(p not in target.processes for p in source.processes):
        return True
    return _parallel_labels(source, target) != target.labels


def retarget_continuum(sup: Superposition, t: float) -> Tuple[Superposition, List[str]]:
    """
    While a realized source row evolves, each moment creates a new ready component parallel to
    it; only the newest receives current. The live ready component is replaced by a fresh
    zero-modulus one that copies the source's current labels (keeping its own ready states) and
    the edge is moved onto it. The replaced components are returned; `phantomize` retires them.
    """
    if not any(_stale(sup, edge, t) for edge in sup.edges):
        return sup, []
    out = sup.model_copy(deep=True)
    by_id = {c.id: c for c in out.components}
    superseded: List[str] = []
    for edge in out.edges:
        if not _stale(out, edge, t):
            continue
        source = by_id[edge.source]
        target = by_id[edge.target]
        expected = _parallel_labels(source, target)
        fresh = Component(
            id=out.allocate_id(),
            labels=expected,
            modulus=0.0,
            kind=ComponentKind.READY,
            born_at=t,
            ready_symbols=list(target.ready_symbols),
            processes=_frozen(source.processes, t),
        )
        out.components.append(fresh)
        by_id[fresh.id] = fresh
        superseded.append(edge.target)
        edge.target = fresh.id
        out.superseded += 1
    return out, superseded


def phantomize(sup: Superposition, t: float) -> Tuple[Superposition, List[str]]:
    """
    Every ready component no longer fed by an active edge at t becomes a phantom with a frozen
    modulus. Returns the system and the ids phantomized, one per phantomization event.

    Args:
        sup (Superposition): The system.
        t (float): Time in seconds.

    Returns:
        Tuple[Superposition, List[str]]: The updated copy and the newly phantomized ids.
    """
    fed = {edge.target for edge in sup.edges if edge.active and t < edge.active_until - TIME_EPS}
    pending = [c.id for c in sup.components if c.kind is ComponentKind.READY and c.id not in fed]
    if not pending:
        return sup, []
    out = sup.model_copy(deep=True)
    retired = set(pending)
    for component in out.components:
        if component.id in retired:
            component.kind = ComponentKind.PHANTOM
    out.edges = [edge for edge in out.edges if edge.target not in retired]
    return out, pending


def prune_phantoms(sup: Superposition) -> Superposition:
    """
    Drops phantom components, which is like redefining the system; total_s is recomputed over the survivors.
    """
    out = sup.model_copy(deep=True)
    kept = [c for c in out.components if c.kind is not ComponentKind.PHANTOM]
    ids = {c.id for c in kept}
    out.components = kept
    out.edges = [e for e in out.edges if e.source in ids and e.target in ids]
    out.total_s = math.fsum(c.modulus for c in kept)
    return out


def begin_process(
    sup: Superposition,
    t: float,
    kind: ProcessKind,
    duration: float,
    targets: Optional[List[str]] = None,
) -> Superposition:
    """
    Starts a classical process at t on the given realized components (all realized ones by default).
    A ready component named in targets runs it live, in parallel with its source row.
    """
    out = sup.model_copy(deep=True)
    for component in out.components:
        if targets is None and component.kind is not ComponentKind.REALIZED:
            continue
        if targets is not None and (component.id not in targets or component.kind is ComponentKind.PHANTOM):
            continue
        component.processes.append(
            ClassicalProcess(kind=kind, duration=duration, progress=0.0, anchor_time=t, anchor_progress=0.0)
        )
    return out


def next_completion(sup: Superposition) -> Optional[float]:
    times = [
        p.completion_time()
        for c in sup.components
        if c.kind is ComponentKind.REALIZED
        for p in c.processes
        if p.completion_time() is not None
    ]
    return min(times) if times else None


def complete_processes(sup: Superposition, t: float) -> Tuple[Superposition, List[ProcessCompletion]]:
    """
    Finishes every running process of a realized component whose completion time is not after t:
    its phase label is set to 1 and the process is removed. Label effects of the completion are
    applied by the caller.
    """
    done: List[ProcessCompletion] = []
    due = next_completion(sup)
    if due is None or due > t + TIME_EPS:
        return sup, done
    out = sup.model_copy(deep=True)
    for component in out.components:
        if component.kind is not ComponentKind.REALIZED:
            continue
        running = []
        for process in component.processes:
            finish = process.completion_time()
            if finish is None or finish > t + TIME_EPS:
                running.append(process)
                continue
            slot = _PHASE_SLOT.get(process.kind)
            label = component.label(slot) if slot is not None else None
            if label is not None:
                component.replace_label(label.with_phase(1.0))
            done.append(ProcessCompletion(component=component.id, kind=process.kind, time=finish))
        component.processes = running
    done.sort(key=lambda c: (c.time, c.kind.value))
    return out, done
