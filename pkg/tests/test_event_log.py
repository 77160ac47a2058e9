import io
import json
from pathlib import Path

import pytest
from conftest import find_trial, has_hit, spec_for

from project.event_log_service import (
    EVENT_COLUMNS,
    OutputFormat,
    canonical_json,
    canonical_number,
    emit_events,
    emit_histogram,
    emit_summary,
    histogram_path,
    write_bytes,
)
from project.montecarlo_service import BatchSummary, HistogramBin, run_trial


@pytest.fixture
def summary():
    return BatchSummary(
        scenario="apparatus",
        version="apparatus",
        n_trials=4,
        base_seed=7,
        dt=0.001,
        hits=2,
        hit_fraction=0.5,
        hit_time_histogram=[HistogramBin(lower=0.0, upper=0.5, count=2), HistogramBin(lower=0.5, upper=1.0, count=0)],
        outcome_counts={"d0·M(t0)·i0": 2, "d1·M(tf)·i1": 2},
        ks_statistic=0.1 + 0.2,
        paradox_violations=0,
    )


def kinds(trajectory):
    return [e.kind.value for e in trajectory.events if e.kind.value != "experience"]


class TestCanonical:
    def test_number(self):
        assert canonical_number(0.1 + 0.2) == 0.3

    def test_json(self):
        assert canonical_json({"b": 1.0, "a": [0.1 + 0.2, None, True]}) == '{"a":[0.3,null,true],"b":1.0}'


class TestEmitEvents:
    def test_hit_trial(self, apparatus_hit):
        seen = kinds(apparatus_hit)
        assert seen[0] == "hit"
        assert seen.index("phase-complete") > 0
        assert "phantomized" not in seen

    def test_trial_without_hit(self, apparatus_miss):
        assert kinds(apparatus_miss) == ["cutoff", "phantomized"]
        phantomized = apparatus_miss.events[-1]
        assert phantomized.time == 1.0
        assert phantomized.payload["modulus"] == pytest.approx(0.5, abs=1e-3)

    def test_jsonl_records(self, apparatus_hit):
        lines = emit_events(apparatus_hit).decode("utf-8").splitlines()
        assert len(lines) == len(apparatus_hit.events)
        first = json.loads(lines[0])
        assert sorted(first) == ["id", "kind", "labels_after", "payload", "t"]
        assert first["id"] == "hit-0"
        assert [view["kind"] for view in first["labels_after"]] == ["realized"]
        assert first["labels_after"][0]["labels"] == "d1·M(t0)·i0"

    def test_same_seed_same_bytes(self, apparatus_spec):
        assert emit_events(run_trial(apparatus_spec, 21)) == emit_events(run_trial(apparatus_spec, 21))

    def test_csv(self, apparatus_hit):
        rows = emit_events(apparatus_hit, OutputFormat.CSV).decode("utf-8").splitlines()
        assert rows[0] == ",".join(EVENT_COLUMNS)
        assert len(rows) == len(apparatus_hit.events) + 1
        assert rows[1].split(",")[1:3] == ["hit-0", "hit"]

    def test_experiences_in_csv(self):
        trajectory = find_trial(spec_for("cat1"), has_hit)
        rows = emit_events(trajectory, "csv").decode("utf-8").splitlines()
        experience = [row.split(",") for row in rows if ",experience," in row]
        assert [(row[4], row[5]) for row in experience] == [("cat", "C"), ("cat", "U")]

    def test_unknown_format(self, apparatus_hit):
        with pytest.raises(ValueError):
            emit_events(apparatus_hit, "xml")


class TestEmitSummary:
    def test_csv(self, summary):
        rows = emit_summary(summary).decode("utf-8").splitlines()
        assert rows[0] == "metric,value"
        assert "hit_fraction,0.5" in rows
        assert "ks_statistic,0.3" in rows
        assert "outcome:d1·M(tf)·i1,2" in rows

    def test_jsonl(self, summary):
        record = json.loads(emit_summary(summary, "jsonl"))
        assert record["n_trials"] == 4
        assert record["outcome_counts"] == {"d0·M(t0)·i0": 2, "d1·M(tf)·i1": 2}
        assert record["hit_time_histogram"][0] == {"count": 2, "lower": 0.0, "upper": 0.5}

    def test_histogram(self, summary):
        assert emit_histogram(summary).decode("utf-8").splitlines() == [
            "lower,upper,count",
            "0.0,0.5,2",
            "0.5,1.0,0",
        ]

    def test_histogram_path(self):
        assert histogram_path(Path("out/summary.csv")) == Path("out/summary.histogram.csv")


class TestWriteBytes:
    def test_stream(self):
        stream = io.BytesIO()
        write_bytes(b"abc", None, stream)
        assert stream.getvalue() == b"abc"

    def test_file(self, tmp_path):
        out = tmp_path / "log.jsonl"
        write_bytes(b"abc", out)
        assert out.read_bytes() == b"abc"

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            write_bytes(b"abc", tmp_path / "missing" / "log.jsonl")
