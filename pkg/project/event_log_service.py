import csv
import io
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from project.montecarlo_service import BatchSummary
from project.trajectory_models import ComponentView, Trajectory, TrajectoryEvent

logger = logging.getLogger(__name__)


class OutputFormat(str, Enum):
    JSONL = "jsonl"
    CSV = "csv"


EVENT_COLUMNS = ["t", "id", "kind", "component", "agent", "state", "payload", "labels_after"]
HISTOGRAM_COLUMNS = ["lower", "upper", "count"]


def canonical_number(value: float) -> float:
    """
    Rounds a float to 12 significant digits, the precision every output is written with.

    Example:
        canonical_number(0.1 + 0.2)
        > 0.3
    """
    return float(f"{value:.12g}")


def canonical(value: Any) -> Any:
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, float):
        return canonical_number(value)
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [canonical(v) for v in value]
    return value


def canonical_json(value: Any) -> str:
    return json.dumps(canonical(value), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _labels_after(snapshot: List[ComponentView]) -> List[Dict[str, Any]]:
    return [{"id": view.id, "kind": view.kind.value, "labels": view.render(), "modulus": view.modulus} for view in snapshot]


def event_record(event: TrajectoryEvent) -> Dict[str, Any]:
    return {
        "t": event.time,
        "id": event.id,
        "kind": event.kind.value,
        "payload": event.payload,
        "labels_after": _labels_after(event.snapshot),
    }


def _event_row(event: TrajectoryEvent) -> List[str]:
    payload = event.payload
    labels = " + ".join(f"{view.render()}:{canonical_number(view.modulus)!r}" for view in event.snapshot)
    return [
        repr(canonical_number(event.time)),
        event.id,
        event.kind.value,
        str(payload.get("component", "")),
        str(payload.get("agent", "")),
        str(payload.get("state", "")),
        canonical_json(payload),
        labels,
    ]


def emit_events(trajectory: Trajectory, fmt: Union[OutputFormat, str] = OutputFormat.JSONL) -> bytes:
    """
    Serializes a trial's event log. jsonl writes one object per event with the keys t, id, kind,
    payload and labels_after (the non-phantom components after the event); csv writes one
    flattened row per event. Keys are sorted and numbers carry 12 significant digits, so equal
    trajectories give equal bytes.

    Args:
        trajectory (Trajectory): A completed trial.
        fmt (Union[OutputFormat, str]): jsonl or csv.

    Returns:
        bytes: The UTF-8 encoded log.

    Example:
        emit_events(run_trial(apparatus, seed=1)).splitlines()[0]
        > b'{"id":"hit-0","kind":"hit","labels_after":[...],"payload":{...},"t":0.214}'
    """
    fmt = OutputFormat(fmt)
    if fmt is OutputFormat.JSONL:
        text = "".join(canonical_json(event_record(event)) + "\n" for event in trajectory.events)
        return text.encode("utf-8")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(EVENT_COLUMNS)
    for event in trajectory.events:
        writer.writerow(_event_row(event))
    return buffer.getvalue().encode("utf-8")


def summary_record(summary: BatchSummary) -> Dict[str, Any]:
    return summary.model_dump(mode="json")


def emit_summary(summary: BatchSummary, fmt: Union[OutputFormat, str] = OutputFormat.CSV) -> bytes:
    """
    Serializes a BatchSummary. csv writes metric,value rows with one `outcome:<labels>` row per
    terminal label set; jsonl writes the summary as a single canonical JSON object.
    """
    fmt = OutputFormat(fmt)
    if fmt is OutputFormat.JSONL:
        return (canonical_json(summary_record(summary)) + "\n").encode("utf-8")
    rows = [
        ("scenario", summary.scenario),
        ("version", summary.version),
        ("n_trials", summary.n_trials),
        ("base_seed", summary.base_seed),
        ("dt", canonical_number(summary.dt)),
        ("hits", summary.hits),
        ("hit_fraction", canonical_number(summary.hit_fraction)),
        ("ks_statistic", "" if summary.ks_statistic is None else canonical_number(summary.ks_statistic)),
        ("paradox_violations", summary.paradox_violations),
    ]
    rows += [(f"outcome:{outcome}", count) for outcome, count in summary.outcome_counts.items()]
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["metric", "value"])
    writer.writerows(rows)
    return buffer.getvalue().encode("utf-8")


def emit_histogram(summary: BatchSummary) -> bytes:
    """
    Hit-time histogram as lower,upper,count rows, ready for plotting.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(HISTOGRAM_COLUMNS)
    for row in summary.hit_time_histogram:
        writer.writerow([canonical_number(row.lower), canonical_number(row.upper), row.count])
    return buffer.getvalue().encode("utf-8")


def histogram_path(out: Path) -> Path:
    return out.with_name(f"{out.stem}.histogram.csv")


def write_bytes(data: bytes, out: Optional[Path], stream: Optional[io.BufferedIOBase] = None) -> None:
    """
    Writes data to `out`, or to `stream` (stdout) when no path is given.

    Raises:
        OSError: If the path cannot be written.
    """
    if out is None:
        stream.write(data)
        stream.flush()
        return
    out.write_bytes(data)
    logger.info("wrote %d bytes to %s", len(data), out)
