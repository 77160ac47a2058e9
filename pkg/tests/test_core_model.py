import pytest
from conftest import label
from pydantic import ValidationError

from project.core_model_service import (
    Component,
    ComponentKind,
    CurrentEdge,
    RateFunction,
    StateLabel,
    Subsystem,
    SubsystemDecl,
    make_component,
    make_superposition,
    total_modulus,
    validate,
)
from project.errors import DomainError, SchemaError

DECLS = [
    SubsystemDecl(subsystem=Subsystem.DETECTOR, alphabet=["d0", "d1"]),
    SubsystemDecl(subsystem=Subsystem.MECHANISM, alphabet=["M"]),
    SubsystemDecl(subsystem=Subsystem.INDICATOR, alphabet=["i0", "i1"]),
]
DECLARED = [d.subsystem for d in DECLS]


def exposed_system(moduli=(1.0, 0.0)):
    start = make_component(
        [label(Subsystem.DETECTOR, "d0"), label(Subsystem.MECHANISM, "M"), label(Subsystem.INDICATOR, "i0")],
        moduli[0],
        ComponentKind.REALIZED,
        declared=DECLARED,
        component_id="c0",
    )
    ready = make_component(
        [label(Subsystem.DETECTOR, "d1"), label(Subsystem.MECHANISM, "M"), label(Subsystem.INDICATOR, "i0")],
        moduli[1],
        ComponentKind.READY,
        ready=[Subsystem.DETECTOR],
        declared=DECLARED,
        component_id="c1",
    )
    edge = CurrentEdge(source="c0", target="c1", rate_fn=RateFunction(rate=0.69, cutoff=1.0), active_until=1.0)
    return make_superposition(DECLS, [start, ready], [edge])


class TestStateLabel:
    def test_phase_required_for_mechanism(self):
        with pytest.raises(ValidationError):
            StateLabel(subsystem=Subsystem.MECHANISM, symbol="M")

    def test_phase_rejected_for_detector(self):
        with pytest.raises(ValidationError):
            StateLabel(subsystem=Subsystem.DETECTOR, symbol="d0", phase=0.5)

    def test_phase_range(self):
        with pytest.raises(ValidationError):
            StateLabel(subsystem=Subsystem.MECHANISM, symbol="M", phase=1.5)

    @pytest.mark.parametrize(
        "phase, rendered",
        [(0.0, "M(t0)"), (1.0, "M(tf)"), (0.25, "M(0.250)")],
    )
    def test_render_mechanism(self, phase, rendered):
        assert StateLabel(subsystem=Subsystem.MECHANISM, symbol="M", phase=phase).render() == rendered

    def test_render_internal_clock_and_ready(self):
        assert StateLabel(subsystem=Subsystem.INTERNAL_CLOCK, symbol="N", phase=1.0).render() == "N(tff)"
        assert label(Subsystem.DETECTOR, "d1").render(ready=True) == "_d1"

    def test_observer_roles_share_a_slot(self):
        raw = StateLabel(subsystem=Subsystem.OBSERVER_RAW, symbol="X")
        assert raw.slot is Subsystem.OBSERVER_BRAIN


class TestMakeComponent:
    def test_exposed_first_component(self):
        component = exposed_system().components[0]
        assert component.kind is ComponentKind.REALIZED
        assert component.modulus == 1.0
        assert component.ready_symbols == []
        assert component.render() == "d0·M(t0)·i0"

    def test_exposed_second_component_is_ready_and_empty(self):
        component = exposed_system().components[1]
        assert component.kind is ComponentKind.READY
        assert component.modulus == 0.0
        assert component.ready_symbols == [Subsystem.DETECTOR]
        assert component.render() == "_d1·M(t0)·i0"

    def test_negative_modulus(self):
        with pytest.raises(DomainError):
            make_component([label(Subsystem.DETECTOR, "d0")], -0.1, ComponentKind.REALIZED)

    def test_duplicate_subsystem(self):
        with pytest.raises(SchemaError):
            make_component([label(Subsystem.DETECTOR, "d0"), label(Subsystem.DETECTOR, "d1")], 1.0, ComponentKind.REALIZED)

    def test_missing_subsystem(self):
        with pytest.raises(SchemaError):
            make_component([label(Subsystem.DETECTOR, "d0")], 1.0, ComponentKind.REALIZED, declared=DECLARED)

    def test_ready_needs_ready_states(self):
        with pytest.raises(SchemaError):
            make_component([label(Subsystem.DETECTOR, "d1")], 0.0, ComponentKind.READY)

    def test_realized_cannot_hold_ready_states(self):
        with pytest.raises(SchemaError):
            make_component([label(Subsystem.DETECTOR, "d1")], 0.0, ComponentKind.REALIZED, ready=[Subsystem.DETECTOR])

    def test_fresh_ids_are_unique(self):
        ids = {make_component([label(Subsystem.DETECTOR, "d0")], 1.0, ComponentKind.REALIZED).id for _ in range(50)}
        assert len(ids) == 50


class TestTotalModulus:
    @pytest.mark.parametrize("moduli, expected", [((1.0, 0.0), 1.0), ((0.5, 0.5), 1.0)])
    def test_sum(self, moduli, expected):
        assert total_modulus(exposed_system(moduli)) == pytest.approx(expected)

    def test_empty(self):
        assert total_modulus(make_superposition(DECLS)) == 0.0


class TestValidate:
    def test_exposed_ok(self):
        report = validate(exposed_system())
        assert report.ok
        assert report.violations == []

    def test_edge_leaving_ready_component(self):
        sup = exposed_system()
        sup.edges.append(
            CurrentEdge(source="c1", target="c0", rate_fn=RateFunction(rate=1.0, cutoff=1.0), active_until=1.0)
        )
        report = validate(sup)
        assert not report.ok
        assert [v.code for v in report.violations] == ["nrule-4"]
        assert report.violations[0].subject == "c1"

    def test_mass_accounting(self):
        sup = exposed_system()
        sup.total_s = 0.9
        report = validate(sup)
        assert [v.code for v in report.violations] == ["mass-accounting"]

    def test_symbol_outside_alphabet(self):
        sup = exposed_system()
        sup.components[0].labels[2] = StateLabel(subsystem=Subsystem.INDICATOR, symbol="I1")
        assert [v.code for v in validate(sup).violations] == ["alphabet"]

    def test_duplicate_ids_and_dangling_edge(self):
        sup = exposed_system()
        sup.components.append(sup.components[0].model_copy())
        sup.edges.append(
            CurrentEdge(source="c0", target="gone", rate_fn=RateFunction(rate=1.0, cutoff=1.0), active_until=1.0)
        )
        sup.total_s = total_modulus(sup)
        codes = {v.code for v in validate(sup).violations}
        assert codes == {"duplicate-id", "dangling-edge"}

    def test_components_are_pydantic_models(self):
        component = exposed_system().components[0]
        assert isinstance(component, Component)
        assert Component.model_validate(component.model_dump()) == component
