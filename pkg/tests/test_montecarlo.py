import math

import numpy as np
import pytest
from conftest import CONFIGURATIONS, LN2, find_trial, has_hit, no_hit, spec_for

from project import montecarlo_service
from project.dynamics_service import hit_at, reduce
from project.errors import DomainError, StepSizeError
from project.event_log_service import emit_events
from project.experience_service import ParadoxReport
from project.montecarlo_service import (
    engine_for,
    ks_test,
    run_batch,
    run_trial,
    split_seed,
    trial_outcome_key,
)

N_SMALL = 2000


def without_pruned(data: bytes):
    return [line for line in data.splitlines() if b'"kind":"pruned"' not in line]


class TestSeeds:
    def test_split_seed_is_deterministic(self):
        assert split_seed(7, 3) == split_seed(7, 3)

    def test_split_seed_differs_per_index(self):
        assert len({split_seed(7, i) for i in range(100)}) == 100
        assert split_seed(7, 0) != split_seed(8, 0)

    def test_negative(self):
        with pytest.raises(DomainError):
            split_seed(-1, 0)

    def test_outcome_key(self):
        assert trial_outcome_key(["d1·M(tf)·i1"]) == "d1·M(tf)·i1"
        assert trial_outcome_key(["b", "a"]) == "a + b"


class TestRunTrial:
    def test_same_seed_same_trajectory(self, apparatus_spec):
        first = run_trial(apparatus_spec, 11)
        montecarlo_service._engine.cache_clear()
        second = run_trial(apparatus_spec, 11)
        assert first.model_dump() == second.model_dump()
        assert emit_events(first) == emit_events(second)

    def test_nonpositive_dt(self, apparatus_spec):
        with pytest.raises(DomainError):
            run_trial(apparatus_spec, 0, dt=0.0)

    def test_coarse_dt(self, apparatus_spec):
        with pytest.raises(StepSizeError):
            run_trial(apparatus_spec, 0, dt=0.2)

    def test_reference_path_gives_half_life_odds(self, apparatus_spec):
        probabilities = engine_for(apparatus_spec).reference().probabilities
        survival = float(np.prod(1.0 - probabilities))
        assert 1.0 - survival == pytest.approx(0.5, abs=2e-3)
        assert probabilities.max() < 0.1
        assert probabilities[-1] == 0.0

    def test_hit_payload(self, apparatus_hit):
        hit = apparatus_hit.hit
        assert hit.id == "hit-0"
        assert hit.payload["rate"] == pytest.approx(LN2, rel=1e-6)
        assert 0.0 < hit.payload["elapsed"] <= 1.0
        assert apparatus_hit.terminal_time > hit.time + 0.2

    @pytest.mark.parametrize("version", CONFIGURATIONS + ["cat2-natural"])
    def test_a_hit_leaves_no_currents(self, version):
        reference = engine_for(spec_for(version)).reference()
        checkpoint = next(c for c in reference.checkpoints if c.p > 0)
        sup = checkpoint.state.sup
        hit = hit_at(sup, checkpoint.state.t, checkpoint.rate, np.random.default_rng(0))
        assert reduce(sup, hit).edges == []

    def test_hit_rate_stays_at_lambda_during_the_look(self):
        trajectory = find_trial(
            spec_for("cat1+observer"), lambda t: has_hit(t) and 0.301 <= t.hit.time <= 0.349, limit=3000
        )
        assert trajectory.hit.payload["rate"] == pytest.approx(LN2, rel=1e-6)

    @pytest.mark.parametrize("version", ["apparatus+observer", "cat2+observer"])
    def test_pruning_does_not_change_the_log(self, version):
        spec = spec_for(version)
        for seed in range(15):
            kept = run_trial(spec, seed)
            pruned = run_trial(spec, seed, prune=True)
            assert pruned.terminal_labels == kept.terminal_labels
            assert without_pruned(emit_events(pruned)) == without_pruned(emit_events(kept))

    def test_pruning_reports_dropped_mass(self):
        trajectory = find_trial(spec_for("apparatus+observer"), no_hit, prune=True)
        pruned = [e for e in trajectory.events if e.kind.value == "pruned"]
        assert pruned
        assert all(e.payload["count"] > 0 for e in pruned)


class TestKsTest:
    def test_single_sample(self):
        assert ks_test([0.5], math.log(2), 1.0) == pytest.approx(0.5857864376269049, abs=1e-12)

    def test_empty(self):
        with pytest.raises(DomainError):
            ks_test([], LN2, 1.0)

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            ks_test([1.5], LN2, 1.0)

    def test_bad_parameters(self):
        with pytest.raises(DomainError):
            ks_test([0.5], 0.0, 1.0)

    def test_exact_sample_passes(self):
        rng = np.random.default_rng(2024)
        u = rng.random(5000)
        taus = -np.log1p(-u * (1.0 - math.exp(-LN2))) / LN2
        assert ks_test(taus, LN2, 1.0) < 1.95 / math.sqrt(len(taus))

    def test_uniform_sample_fails(self):
        taus = np.linspace(0.0, 1.0, 5000)
        assert ks_test(taus, 5.0, 1.0) > 0.3


class TestRunBatch:
    def test_apparatus(self, apparatus_spec):
        summary = run_batch(apparatus_spec, N_SMALL, base_seed=7)
        assert summary.n_trials == N_SMALL
        assert 0.45 <= summary.hit_fraction <= 0.55
        assert set(summary.outcome_counts) == {"d1·M(tf)·i1", "d0·M(t0)·i0"}
        assert sum(summary.outcome_counts.values()) == N_SMALL
        assert summary.outcome_counts["d1·M(tf)·i1"] == summary.hits
        assert sum(b.count for b in summary.hit_time_histogram) == summary.hits
        assert summary.hit_time_histogram[0].lower == 0.0
        assert summary.hit_time_histogram[-1].upper == 1.0
        assert summary.ks_statistic < 1.95 / math.sqrt(summary.hits)
        assert summary.paradox_violations == 0

    def test_histogram_falls_with_time(self, apparatus_spec):
        summary = run_batch(apparatus_spec, N_SMALL, base_seed=1, bins=2)
        early, late = (b.count for b in summary.hit_time_histogram)
        # about 0.59 vs 0.41 of the hits
        assert early > late

    def test_same_seed_same_summary(self, apparatus_spec):
        assert run_batch(apparatus_spec, 50, base_seed=5) == run_batch(apparatus_spec, 50, base_seed=5)

    def test_workers_gather_in_order(self, apparatus_spec):
        serial = run_batch(apparatus_spec, 16, base_seed=9, workers=1)
        parallel = run_batch(apparatus_spec, 16, base_seed=9, workers=2)
        assert parallel == serial

    def test_single_trial(self, apparatus_spec):
        summary = run_batch(apparatus_spec, 1, base_seed=0)
        assert summary.n_trials == 1
        assert sum(summary.outcome_counts.values()) == 1

    @pytest.mark.parametrize("n, bins", [(0, 20), (10, 0)])
    def test_rejected(self, apparatus_spec, n, bins):
        with pytest.raises(DomainError):
            run_batch(apparatus_spec, n, base_seed=0, bins=bins)

    def test_paradoxes_are_counted(self, apparatus_spec, monkeypatch):
        monkeypatch.setattr(
            montecarlo_service, "check_no_paradox", lambda records, version=None: ParadoxReport(ok=False, violations=["x"])
        )
        assert run_batch(apparatus_spec, 5, base_seed=0).paradox_violations == 5

    def test_internal_first_hit_times_start_at_the_exposure(self):
        summary = run_batch(spec_for("cat2-natural", ordering="internal-first"), 300, base_seed=4)
        assert summary.hits > 0
        assert sum(b.count for b in summary.hit_time_histogram) == summary.hits


@pytest.mark.slow
class TestAcceptance:
    @pytest.mark.parametrize("version", CONFIGURATIONS)
    def test_hit_fraction(self, version):
        summary = run_batch(spec_for(version), 100_000, base_seed=7, workers=4)
        assert 0.49 <= summary.hit_fraction <= 0.51
        assert summary.paradox_violations == 0

    def test_hit_times_follow_the_decay_law(self, apparatus_spec):
        summary = run_batch(apparatus_spec, 10_000, base_seed=11, workers=4)
        assert summary.ks_statistic < 1.63 / math.sqrt(summary.hits)

    @pytest.mark.parametrize("version", CONFIGURATIONS)
    def test_paradox_free_with_two_end_states(self, version):
        summary = run_batch(spec_for(version), 10_000, base_seed=13, workers=4)
        assert summary.paradox_violations == 0
        assert len(summary.outcome_counts) == 2
        assert sum(summary.outcome_counts.values()) == 10_000

    def test_natural_wakeup_orderings_agree(self):
        summaries = [
            run_batch(spec_for("cat2-natural", ordering=ordering), 10_000, base_seed=17, workers=4)
            for ordering in ("external-first", "internal-first")
        ]
        for summary in summaries:
            assert set(summary.outcome_counts) == {"d1·M(tf)·N(tff)·C", "d0·M(t0)·N(tff)·C"}
            assert summary.paradox_violations == 0
        assert abs(summaries[0].hit_fraction - summaries[1].hit_fraction) < 0.03
