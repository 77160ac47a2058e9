import functools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import scipy.stats
from pydantic import BaseModel, Field

from project.core_model_service import ComponentKind, ProcessKind, Superposition
from project.dynamics_service import (
    DEFAULT_SUBSTEP,
    TIME_EPS,
    HitEvent,
    advance,
    begin_process,
    complete_processes,
    hit_at,
    hit_probability,
    next_completion,
    phantomize,
    prune_phantoms,
    reduce,
    retarget_continuum,
    sample_hit,
    spawn_ready,
)
from project.errors import DomainError
from project.experience_service import ExperienceRecord, check_no_paradox, extract_experiences
from project.scenarios_service import START_TIME, Scenario, ScenarioSpec, ScheduleAction, build_scenario
from project.trajectory_models import ComponentView, EventKind, Trajectory, TrajectoryEvent

logger = logging.getLogger(__name__)

DEFAULT_BINS = 20


class HistogramBin(BaseModel):
    lower: float
    upper: float
    count: int


class TrialResult(BaseModel):
    """
    What a batch keeps of one trial.
    """

    index: int
    seed: int
    elapsed: Optional[float] = None
    outcome: str
    paradox_free: bool


class BatchSummary(BaseModel):
    """
    Aggregate of a batch of seeded trials. Hit times in the histogram and in the KS statistic
    are measured from the opening of the detector exposure. Every field is an order-independent
    fold over the trials.
    """

    scenario: str
    version: str
    n_trials: int
    base_seed: int
    dt: float
    hits: int
    hit_fraction: float
    hit_time_histogram: List[HistogramBin] = Field(default_factory=list)
    outcome_counts: Dict[str, int] = Field(default_factory=dict)
    ks_statistic: Optional[float] = None
    paradox_violations: int = 0


def split_seed(base_seed: int, index: int) -> int:
    """
    Seed of trial `index` of a batch: the first 64-bit word of numpy's SeedSequence with entropy
    base_seed and spawn key (index,). Counter-based, so any trial can be regenerated on its own
    and batches split across workers without coordination.

    Args:
        base_seed (int): The batch seed, nonnegative.
        index (int): The trial index, nonnegative.

    Returns:
        int: The trial seed.

    Example:
        split_seed(7, 0) == split_seed(7, 0)
        > True
    """
    if base_seed < 0 or index < 0:
        raise DomainError("seeds and trial indices must be nonnegative")
    sequence = np.random.SeedSequence(entropy=base_seed, spawn_key=(index,))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def trial_outcome_key(labels: Iterable[str]) -> str:
    """
    Canonical string for a terminal label set, e.g. "d1·M(tf)·i1".
    """
    return " + ".join(sorted(labels))


@dataclass
class _RunState:
    sup: Superposition
    t: float
    cursor: int = 0
    counters: Dict[str, int] = field(default_factory=dict)

    def fork(self) -> "_RunState":
        return _RunState(sup=self.sup, t=self.t, cursor=self.cursor, counters=dict(self.counters))


@dataclass
class _Checkpoint:
    state: _RunState
    n_events: int
    rate: float
    p: float


@dataclass
class _Reference:
    events: List[TrajectoryEvent]
    probabilities: np.ndarray
    checkpoints: List[_Checkpoint]
    final: _RunState


class TrialEngine:
    """
    Runs trials of one scenario at a fixed dt.

    Until the first hit nothing depends on the random stream, so the evolution up to the end
    of the trial without a hit is computed once (the reference path), keeping the hit
    probability of each stochastic step and a checkpoint after it. A trial draws one uniform
    per step in a single call, resumes from the checkpoint of the first step whose draw falls
    below its probability, and finishes with the same loop in sampling mode. Stored
    superpositions are never mutated, so checkpoints share them.

    The draw on a reference step is the `sample_hit` test done ahead of time; both pick the
    component with `hit_at`. In sampling mode `sample_hit` runs only while currents remain
    active. A hit reduces every built-in configuration to one component with no edges, so
    there it only settles the classical processes.
    """

    def __init__(self, scenario: Scenario, dt: float, prune: bool = False):
        if dt <= 0:
            raise DomainError(f"dt must be positive, got {dt}")
        self.scenario = scenario
        self.dt = dt
        self.prune = prune
        self.max_substep = DEFAULT_SUBSTEP * scenario.spec.t_half
        self.timed = scenario.schedule.timed()
        self._reference: Optional[_Reference] = None

    def reference(self) -> _Reference:
        if self._reference is None:
            state = _RunState(sup=self.scenario.initial, t=START_TIME)
            events: List[TrajectoryEvent] = []
            checkpoints: List[_Checkpoint] = []
            self._evolve(state, events, rng=None, checkpoints=checkpoints)
            self._reference = _Reference(
                events=events,
                probabilities=np.array([c.p for c in checkpoints], dtype=float),
                checkpoints=checkpoints,
                final=state,
            )
            logger.debug(
                "reference path of %s: %d sampling steps, %d events", self.scenario.spec.name, len(checkpoints), len(events)
            )
        return self._reference

    def run(self, seed: int) -> Trajectory:
        rng = np.random.default_rng(seed)
        reference = self.reference()
        draws = rng.random(len(reference.probabilities))
        steps = np.flatnonzero(draws < reference.probabilities)
        if steps.size == 0:
            return self._trajectory(seed, list(reference.events), reference.final)

        checkpoint = reference.checkpoints[int(steps[0])]
        state = checkpoint.state.fork()
        events = list(reference.events[: checkpoint.n_events])
        self._apply_hit(state, events, hit_at(state.sup, state.t, checkpoint.rate, rng))
        self._evolve(state, events, rng=rng, checkpoints=None)
        return self._trajectory(seed, events, state)

    def _trajectory(self, seed: int, events: List[TrajectoryEvent], final: _RunState) -> Trajectory:
        terminal = [
            ComponentView.of(c).render()
            for c in final.sup.components
            if c.kind is not ComponentKind.PHANTOM and c.modulus > 0.0
        ]
        trajectory = Trajectory(
            scenario=self.scenario.spec.name,
            version=self.scenario.spec.version.value,
            seed=seed,
            dt=self.dt,
            start_time=START_TIME,
            initial_snapshot=_snapshot(self.scenario.initial),
            events=events,
            terminal_labels=sorted(terminal),
            terminal_time=final.t + self.dt,
            flags=list(self.scenario.flags),
        )
        records = extract_experiences(trajectory)
        trajectory.events = _with_experiences(trajectory, records)
        return trajectory

    def _evolve(
        self,
        state: _RunState,
        events: List[TrajectoryEvent],
        rng: Optional[np.random.Generator],
        checkpoints: Optional[List[_Checkpoint]],
    ) -> None:
        while True:
            self._settle(state, events)
            stop = self._next_stop(state)
            if any(edge.active for edge in state.sup.edges):
                h = self.dt if stop is None else min(self.dt, stop - state.t)
                state.sup = advance(state.sup, state.t, h, self.max_substep)
                state.t = stop if stop is not None and state.t + h >= stop - TIME_EPS else state.t + h
                self._drain_warnings(state, events)
                if checkpoints is not None:
                    rate, p = hit_probability(state.sup, state.t, h)
                    checkpoints.append(_Checkpoint(state=state.fork(), n_events=len(events), rate=rate, p=p))
                    continue
                hit = sample_hit(state.sup, state.t, h, rng)
                if hit is not None:
                    self._apply_hit(state, events, hit)
            elif stop is not None:
                state.sup = advance(state.sup, state.t, stop - state.t, self.max_substep)
                state.t = stop
            else:
                return

    def _next_stop(self, state: _RunState) -> Optional[float]:
        candidates = []
        if state.cursor < len(self.timed):
            candidates.append(self.timed[state.cursor].trigger_time)
        finish = next_completion(state.sup)
        if finish is not None:
            candidates.append(finish)
        later = [c for c in candidates if c > state.t + TIME_EPS]
        return min(later) if later else None

    def _settle(self, state: _RunState, events: List[TrajectoryEvent]) -> None:
        retire = False
        state.sup, done = complete_processes(state.sup, state.t)
        for completion in done:
            self.scenario.apply_completion(state.sup.component(completion.component), completion.kind)
            if completion.kind is ProcessKind.OBSERVATION:
                retire = True
                self._emit(state, events, EventKind.OBSERVATION_COMPLETE, completion.time, {"component": completion.component})
            else:
                self._emit(
                    state,
                    events,
                    EventKind.PHASE_COMPLETE,
                    completion.time,
                    {"component": completion.component, "process": completion.kind.value},
                )

        while state.cursor < len(self.timed) and self.timed[state.cursor].trigger_time <= state.t + TIME_EPS:
            entry = self.timed[state.cursor]
            state.cursor += 1
            if entry.action is ScheduleAction.CUTOFF:
                retire = True
                self._emit(state, events, EventKind.CUTOFF, state.t, {})
            elif entry.action is ScheduleAction.SPAWN_READY:
                for source in [c.id for c in state.sup.of_kind(ComponentKind.REALIZED)]:
                    state.sup = spawn_ready(
                        state.sup, source, entry.new_labels, set(entry.ready), rate_fn=entry.rate_fn, t=state.t
                    )
            elif entry.action is ScheduleAction.BEGIN_OBSERVATION:
                state.sup = begin_process(state.sup, state.t, ProcessKind.OBSERVATION, entry.duration)
                self._emit(state, events, EventKind.OBSERVATION_START, state.t, {"duration": entry.duration})
            elif entry.action is ScheduleAction.BEGIN_INTERNAL_CLOCK:
                state.sup = begin_process(state.sup, state.t, ProcessKind.INTERNAL_CLOCK, entry.duration)

        state.sup, superseded = retarget_continuum(state.sup, state.t)
        state.sup, retired = phantomize(state.sup, state.t)
        quiet = set(superseded)
        for component_id in retired:
            if component_id not in quiet:
                modulus = state.sup.component(component_id).modulus
                self._emit(state, events, EventKind.PHANTOMIZED, state.t, {"component": component_id, "modulus": modulus})

        if self.prune and retire:
            phantoms = state.sup.of_kind(ComponentKind.PHANTOM)
            if phantoms:
                state.sup = prune_phantoms(state.sup)
                self._emit(
                    state,
                    events,
                    EventKind.PRUNED,
                    state.t,
                    {"count": len(phantoms), "modulus": math.fsum(c.modulus for c in phantoms)},
                )

    def _apply_hit(self, state: _RunState, events: List[TrajectoryEvent], hit: HitEvent) -> None:
        state.sup = reduce(state.sup, hit)
        for entry in self.scenario.schedule.on("hit"):
            if entry.action is ScheduleAction.BEGIN_MECHANISM:
                state.sup = begin_process(state.sup, hit.time, ProcessKind.MECHANISM, entry.duration, [hit.chosen])
        payload = {"component": hit.chosen, "rate": hit.rate_at_hit, "elapsed": hit.time - self.scenario.exposure_start}
        self._emit(state, events, EventKind.HIT, hit.time, payload)

    def _drain_warnings(self, state: _RunState, events: List[TrajectoryEvent]) -> None:
        if not state.sup.warnings:
            return
        messages, state.sup.warnings = state.sup.warnings, []
        for message in messages:
            self._emit(state, events, EventKind.WARNING, state.t, {"message": message})

    def _emit(self, state: _RunState, events: List[TrajectoryEvent], kind: EventKind, time: float, payload: Dict) -> None:
        count = state.counters.get(kind.value, 0)
        state.counters[kind.value] = count + 1
        events.append(
            TrajectoryEvent(id=f"{kind.value}-{count}", time=time, kind=kind, payload=payload, snapshot=_snapshot(state.sup))
        )


def _snapshot(sup: Superposition) -> List[ComponentView]:
    return [ComponentView.of(c) for c in sup.components if c.kind is not ComponentKind.PHANTOM]


def _with_experiences(trajectory: Trajectory, records: List[ExperienceRecord]) -> List[TrajectoryEvent]:
    # each experience follows the event that caused it
    snapshots = {event.id: event.snapshot for event in trajectory.events}
    snapshots["start"] = trajectory.initial_snapshot
    by_cause: Dict[str, List[TrajectoryEvent]] = {}
    for index, record in enumerate(records):
        by_cause.setdefault(record.cause, []).append(
            TrajectoryEvent(
                id=f"{EventKind.EXPERIENCE.value}-{index}",
                time=record.time,
                kind=EventKind.EXPERIENCE,
                payload={"agent": record.agent.value, "state": record.state, "cause": record.cause},
                snapshot=snapshots[record.cause],
            )
        )
    merged = list(by_cause.get("start", []))
    for event in trajectory.events:
        merged.append(event)
        merged.extend(by_cause.get(event.id, []))
    return merged


@functools.lru_cache(maxsize=32)
def _engine(spec_json: str, dt: float, prune: bool) -> TrialEngine:
    spec = ScenarioSpec.model_validate_json(spec_json)
    return TrialEngine(build_scenario(spec), dt, prune)


def engine_for(spec: ScenarioSpec, dt: Optional[float] = None, prune: bool = False) -> TrialEngine:
    """
    The cached engine for (spec, dt, prune); dt defaults to 1e-3 * t_half.
    """
    dt = spec.default_dt if dt is None else float(dt)
    if dt <= 0:
        raise DomainError(f"dt must be positive, got {dt}")
    return _engine(spec.model_dump_json(by_alias=True), dt, bool(prune))


def run_trial(spec: ScenarioSpec, seed: int, dt: Optional[float] = None, prune: bool = False) -> Trajectory:
    """
    Runs one trial: advance, sample a hit, reduce on a hit or phantomize at the cutoff, and let
    the classical processes finish. A pure function of (spec, seed, dt, prune).

    Args:
        spec (ScenarioSpec): The configuration.
        seed (int): Seed of the trial's random stream.
        dt (Optional[float]): Step in seconds; defaults to 1e-3 * t_half.
        prune (bool): Drop phantoms when an observation completes and at the cutoff.

    Returns:
        Trajectory: The event log, experience events included, and the terminal labels.

    Raises:
        DomainError: If dt is not positive.
        StepSizeError: If dt is too coarse for the hit sampler.

    Example:
        run_trial(ScenarioSpec(version="apparatus"), seed=3).terminal_labels
        > ['d1·M(tf)·i1'] or ['d0·M(t0)·i0']
    """
    trajectory = engine_for(spec, dt, prune).run(seed)
    logger.debug("trial %s seed=%d -> %s", spec.name, seed, trajectory.outcome)
    return trajectory


def trial_result(trajectory: Trajectory, index: int, spec: ScenarioSpec) -> TrialResult:
    hit = trajectory.hit
    report = check_no_paradox(extract_experiences(trajectory), spec.version)
    if not report.ok:
        logger.warning("trial %d (seed %d) violates the experience order: %s", index, trajectory.seed, report.violations)
    return TrialResult(
        index=index,
        seed=trajectory.seed,
        elapsed=hit.payload["elapsed"] if hit is not None else None,
        outcome=trial_outcome_key(trajectory.terminal_labels),
        paradox_free=report.ok,
    )


def _run_chunk(spec_json: str, dt: float, prune: bool, base_seed: int, indices: Sequence[int]) -> List[TrialResult]:
    spec = ScenarioSpec.model_validate_json(spec_json)
    return [trial_result(run_trial(spec, split_seed(base_seed, i), dt, prune), i, spec) for i in indices]


def ks_test(hit_times: Sequence[float], decay_constant: float, cutoff: float) -> float:
    """
    Kolmogorov-Smirnov distance between hit times (measured from the opening of the exposure)
    and the truncated exponential CDF F(tau) = (1 - exp(-lambda tau)) / (1 - exp(-lambda cutoff)).

    Args:
        hit_times (Sequence[float]): Hit times in [0, cutoff].
        decay_constant (float): lambda in 1/seconds.
        cutoff (float): Length of the exposure in seconds.

    Returns:
        float: The KS statistic.

    Raises:
        DomainError: On an empty sample or a time outside [0, cutoff].

    Example:
        ks_test([0.5], math.log(2), 1.0)
        > 0.5857864376269049
    """
    taus = np.asarray(hit_times, dtype=float)
    if taus.size == 0:
        raise DomainError("the KS test needs at least one hit time")
    if decay_constant <= 0 or cutoff <= 0:
        raise DomainError("lambda and the cutoff must be positive")
    if np.any(taus < -TIME_EPS) or np.any(taus > cutoff + TIME_EPS):
        raise DomainError(f"hit times must lie in [0, {cutoff}]")
    norm = -math.expm1(-decay_constant * cutoff)

    def cdf(x):
        return -np.expm1(-decay_constant * np.clip(x, 0.0, cutoff)) / norm

    return float(scipy.stats.kstest(taus, cdf).statistic)


def summarize(
    spec: ScenarioSpec, results: List[TrialResult], base_seed: int, dt: float, bins: int = DEFAULT_BINS
) -> BatchSummary:
    elapsed = [r.elapsed for r in results if r.elapsed is not None]
    outcomes: Dict[str, int] = {}
    for result in results:
        outcomes[result.outcome] = outcomes.get(result.outcome, 0) + 1
    counts, edges = np.histogram(np.asarray(elapsed, dtype=float), bins=bins, range=(0.0, spec.t_half))
    return BatchSummary(
        scenario=spec.name,
        version=spec.version.value,
        n_trials=len(results),
        base_seed=base_seed,
        dt=dt,
        hits=len(elapsed),
        hit_fraction=len(elapsed) / len(results) if results else 0.0,
        hit_time_histogram=[
            HistogramBin(lower=float(edges[i]), upper=float(edges[i + 1]), count=int(counts[i])) for i in range(bins)
        ],
        outcome_counts=dict(sorted(outcomes.items())),
        ks_statistic=ks_test(elapsed, spec.decay_constant, spec.t_half) if elapsed else None,
        paradox_violations=sum(1 for r in results if not r.paradox_free),
    )


def run_batch(
    spec: ScenarioSpec,
    n: int,
    base_seed: int,
    dt: Optional[float] = None,
    *,
    workers: int = 1,
    prune: bool = False,
    bins: int = DEFAULT_BINS,
) -> BatchSummary:
    """
    Runs n seeded trials, trial i with seed split_seed(base_seed, i), and aggregates outcomes,
    hit times, the KS statistic against the decay law and the paradox check.

    Args:
        spec (ScenarioSpec): The configuration.
        n (int): Number of trials, at least 1.
        base_seed (int): Seed the trial seeds derive from.
        dt (Optional[float]): Step in seconds; defaults to 1e-3 * t_half.
        workers (int): Worker processes; results are gathered in trial-index order.
        prune (bool): Prune phantoms during the trials.
        bins (int): Number of hit-time histogram bins over [0, t_half].

    Returns:
        BatchSummary: The aggregate.

    Raises:
        DomainError: If n < 1 or bins < 1.

    Example:
        run_batch(ScenarioSpec(version="apparatus"), 100000, base_seed=7).hit_fraction
        > about 0.5
    """
    if n < 1:
        raise DomainError(f"a batch needs at least one trial, got {n}")
    if bins < 1:
        raise DomainError(f"the histogram needs at least one bin, got {bins}")
    dt = spec.default_dt if dt is None else float(dt)
    logger.info("batch %s: %d trials, base seed %d, dt=%s, workers=%d", spec.name, n, base_seed, dt, workers)

    if workers > 1 and n >= 2 * workers:
        spec_json = spec.model_dump_json(by_alias=True)
        size = math.ceil(n / (4 * workers))
        chunks = [range(start, min(n, start + size)) for start in range(0, n, size)]
        results: List[TrialResult] = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chunk, spec_json, dt, prune, base_seed, chunk) for chunk in chunks]
            for future in futures:
                results.extend(future.result())
    else:
        results = [trial_result(run_trial(spec, split_seed(base_seed, i), dt, prune), i, spec) for i in range(n)]

    summary = summarize(spec, results, base_seed, dt, bins)
    logger.info(
        "batch %s done: hit fraction %.4f, %d paradox violations", spec.name, summary.hit_fraction, summary.paradox_violations
    )
    return summary
