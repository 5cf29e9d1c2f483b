"""Solver oracles, generation contracts, and scenario behavior.

The two-bus network has a closed form: with sending voltage v1, series
impedance r + jx and receiving load p + jq (consumption positive), the
squared receiving magnitude y = |V2|^2 is the larger root of

    y^2 + y*(2*(r*p + x*q) - v1^2) + (r^2 + x^2)*(p^2 + q^2) = 0.

That root is computed here directly from the quadratic formula and frozen
as the oracle for the sweep solver.
"""

import copy
import math

import numpy as np
import pytest
from hypothesis import given, assume, settings
from hypothesis import strategies as st

from gridvolt import network as net
from gridvolt import simulation as sim


def closed_form_v2(r, x, p, q, v1=1.0):
    b = 2.0 * (r * p + x * q) - v1 * v1
    c = (r * r + x * x) * (p * p + q * q)
    disc = b * b - 4.0 * c
    if disc < 0:
        raise ValueError("no real solution for this loading")
    y = (-b + math.sqrt(disc)) / 2.0
    return math.sqrt(y)


def two_bus_spec(r=0.01, x=0.02, setpoint=1.0, load_peak=None):
    hub = sim.BusSpec(0, 7.2, "substation_hub", ("A",), net.HUB_FEEDER, 2.0)
    head = sim.BusSpec(1, 7.2, "feeder_head", ("A",), 5, 2.0)
    link = sim.DeviceSpec(0, 0, 1, "line", ("A",), r, x, 1.0, 2.0)
    loads = []
    if load_peak is not None:
        loads.append(sim.LoadSpec(1, "A", sim.ProfileSpec(
            kind="load", peak_pu=load_peak, peak_hour=18.0, pf=0.95,
            noise_seed=11)))
    feeder = sim.FeederSpec(5, 1, [head], [], loads, [], [])
    return sim.SubstationSpec(
        seed=0, size_class="tiny", hub_bus=hub, hub_kv=7.2,
        feeders=[feeder], hub_links=[link], ties=[], tie_devices=[],
        xfmr_rating_pu=2.0, feeder_rating_pu=2.0, aux_load=0j,
        ltc_setpoint=setpoint)


def solve_two_bus(r, x, p, q, setpoint=1.0):
    spec = two_bus_spec(r, x, setpoint)
    graph = sim.build_graph(spec)
    s = np.zeros(graph.n_nodes, dtype=complex)
    s[graph.node_of[(1, "A")]] = complex(p, q)
    state = sim.solve_powerflow(spec, graph, s, sim.Controls())
    return state, graph


def test_two_bus_no_load_is_exact():
    state, graph = solve_two_bus(0.01, 0.02, 0.0, 0.0)
    assert state.v_mag[graph.node_of[(1, "A")]] == 1.0


def test_two_bus_matches_closed_form():
    state, graph = solve_two_bus(0.01, 0.02, 0.5, 0.2)
    v = state.v_mag[graph.node_of[(1, "A")]]
    assert abs(v - closed_form_v2(0.01, 0.02, 0.5, 0.2)) < 1e-10
    assert state.sweep_iterations < 100


@settings(max_examples=60, deadline=None)
@given(
    r=st.floats(1e-4, 0.05),
    x=st.floats(1e-4, 0.08),
    p=st.floats(0.0, 0.8),
    q=st.floats(0.0, 0.4),
)
def test_two_bus_closed_form_property(r, x, p, q):
    b = 2.0 * (r * p + x * q) - 1.0
    disc = b * b - 4.0 * (r * r + x * x) * (p * p + q * q)
    assume(disc > 1e-3)
    expected = closed_form_v2(r, x, p, q)
    assume(expected > 0.7)
    state, graph = solve_two_bus(r, x, p, q)
    assert abs(state.v_mag[graph.node_of[(1, "A")]] - expected) < 1e-9


def test_two_bus_flows_and_head_power():
    state, graph = solve_two_bus(0.01, 0.02, 0.5, 0.2)
    edge = state.edges[0]
    loss = complex(0.01, 0.02) * edge.i_mag_pu ** 2
    s_recv = complex(edge.p_flow_pu, edge.q_flow_pu) - loss
    assert abs(s_recv - complex(0.5, 0.2)) < 1e-9
    assert abs(state.feeder_heads[5] - complex(edge.p_flow_pu, edge.q_flow_pu)) < 1e-12
    assert state.s_subxfmr == state.feeder_heads[5] + state.s_aux


def test_nonconvergence_raises_with_residual():
    with np.errstate(all="ignore"):
        with pytest.raises(sim.PowerFlowError) as exc_info:
            solve_two_bus(0.01, 0.0, 40.0, 0.0)
    assert "did not converge" in str(exc_info.value)


def test_timeseries_tags_failing_step():
    spec = two_bus_spec(0.01, 0.0, load_peak=300.0)
    with np.errstate(all="ignore"):
        with pytest.raises(sim.PowerFlowError, match="timestep 0"):
            sim.run_timeseries(spec, sim.ScenarioConfig(horizon_minutes=60))


# ---------------------------------------------------------------------------
# generated substations


@pytest.fixture(scope="module")
def tiny_spec():
    return sim.generate_substation(7, "tiny")


@pytest.fixture(scope="module")
def tiny_day(tiny_spec):
    return sim.run_timeseries(tiny_spec, sim.ScenarioConfig(
        horizon_minutes=1440, der_penetration=20))


def test_generation_is_deterministic(tiny_spec):
    again = sim.generate_substation(7, "tiny")
    assert sim.spec_to_dict(again) == sim.spec_to_dict(tiny_spec)
    other = sim.generate_substation(8, "tiny")
    assert sim.spec_to_dict(other) != sim.spec_to_dict(tiny_spec)


def test_generation_validation():
    with pytest.raises(ValueError, match="size_class"):
        sim.generate_substation(1, "huge")
    with pytest.raises(ValueError, match="n_feeders"):
        sim.generate_substation(1, "tiny", n_feeders=1)
    with pytest.raises(ValueError, match="n_feeders"):
        sim.generate_substation(1, "tiny", n_feeders=7)


@pytest.mark.parametrize("size_class,per_feeder", [
    ("tiny", 30), ("small", 80), ("medium", 200)])
def test_size_classes_hit_bus_phase_targets(size_class, per_feeder):
    spec = sim.generate_substation(3, size_class)
    graph = sim.build_graph(spec)
    for f in spec.feeders:
        count = sum(1 for bp in graph.bus_phases if bp.feeder_id == f.feeder_id)
        assert count == per_feeder
    assert graph.n_nodes == 3 + 3 * per_feeder


def test_feeders_are_radial_before_ties(tiny_spec):
    for f in tiny_spec.feeders:
        assert len(f.devices) == len(f.buses) - 1


def test_tie_endpoints_on_distinct_feeders(tiny_spec):
    feeder_of_bus = {b.bus_id: b.feeder_id
                     for f in tiny_spec.feeders for b in f.buses}
    for tie_dev in tiny_spec.tie_devices:
        assert not tie_dev.normally_closed
        assert feeder_of_bus[tie_dev.from_bus] != feeder_of_bus[tie_dev.to_bus]
    for tie in tiny_spec.ties:
        assert feeder_of_bus[tie.transfer_bus] == tie.to_feeder


def test_spec_roundtrip_through_disk(tiny_spec, tmp_path):
    path = tmp_path / "spec.json"
    sim.save_spec(tiny_spec, path)
    loaded = sim.load_spec(path)
    assert sim.spec_to_dict(loaded) == sim.spec_to_dict(tiny_spec)
    with pytest.raises(ValueError, match="format"):
        sim.spec_from_dict({"format": "other"})


# ---------------------------------------------------------------------------
# time-series physics


def test_horizon_snapshot_count(tiny_spec):
    states = sim.run_timeseries(tiny_spec, sim.ScenarioConfig(horizon_minutes=500))
    assert len(states) == 33


def test_scenario_validation():
    with pytest.raises(ValueError, match="der_penetration"):
        sim.ScenarioConfig(der_penetration=15)
    with pytest.raises(ValueError, match="horizon"):
        sim.ScenarioConfig(horizon_minutes=10)


def test_conservation_is_exact_over_a_day(tiny_day):
    for state in tiny_day:
        assert conservation_max(state) < 1e-10
        assert state.sweep_iterations < 100


def conservation_max(state):
    return float(sim.conservation_residuals(state).max())


def test_hub_balance_identity(tiny_day):
    for state in tiny_day[::7]:
        total = sum(state.feeder_heads.values()) + state.s_aux
        assert total == state.s_subxfmr
        injections = np.sum(state.p_injection_pu + 1j * state.q_injection_pu)
        losses = sum(complex(e.r_pu, e.x_pu) * e.i_mag_pu ** 2
                     for e in state.edges if e.status)
        expected = injections + losses + state.s_aux
        assert abs(state.s_subxfmr - expected) < 1e-9


def test_conservation_on_medium_substation():
    spec = sim.generate_substation(11, "medium")
    graph = sim.build_graph(spec)
    assert graph.n_nodes == 603
    states = sim.run_timeseries(spec, sim.ScenarioConfig(
        horizon_minutes=4 * sim.TIMESTEP_MINUTES, der_penetration=20))
    for state in states:
        assert conservation_max(state) < 1e-9


def test_squared_voltage_drop_identity(tiny_day):
    """On every active unity-ratio edge, the squared-magnitude drop minus
    2(R*P + X*Q) equals the quadratic loss term -(|z| |I|)^2 exactly."""
    for state in (tiny_day[20], tiny_day[50], tiny_day[90]):
        checked = 0
        for e in state.edges:
            if not e.status or e.device == "regulator":
                continue
            gap = (state.v_mag[e.from_id] ** 2 - state.v_mag[e.to_id] ** 2
                   - 2.0 * (e.r_pu * e.p_flow_pu + e.x_pu * e.q_flow_pu))
            quad = (e.r_pu ** 2 + e.x_pu ** 2) * e.i_mag_pu ** 2
            assert abs(gap + quad) < 1e-9
            checked += 1
        assert checked > 50


def test_physics_edge_set_membership(tiny_day):
    state = tiny_day[40]
    for e in state.edges:
        expected = bool(e.status) and e.device in ("line", "cable", "switch")
        assert e.in_physics_set == expected


def test_branch_flows_stay_light_on_tiny(tiny_day):
    worst = max(abs(complex(e.p_flow_pu, e.q_flow_pu))
                for state in tiny_day for e in state.edges)
    assert worst < 0.3


def test_voltage_band_and_variability(tiny_day):
    v = np.stack([state.v_mag for state in tiny_day])
    assert v.min() > 0.94
    assert v.max() < 1.06
    lv_nodes = [bp.id for bp in tiny_day[0].bus_phases if bp.bus_type == "lv_node"]
    per_node_std = v[:, lv_nodes].std(axis=0)
    assert np.median(per_node_std) > 5e-4
    assert per_node_std.max() < 0.03


def test_monotone_drop_without_der(tiny_spec):
    spec = copy.deepcopy(tiny_spec)
    for f in spec.feeders:
        for c in f.capacitors:
            c.on = False
    states = sim.run_timeseries(spec, sim.ScenarioConfig(
        horizon_minutes=1440, der_penetration=0))
    state = states[72]  # evening peak
    for e in state.edges:
        if not e.status or e.device == "regulator":
            continue
        upstream, downstream = e.from_id, e.to_id
        if e.p_flow_pu < 0:
            upstream, downstream = downstream, upstream
        assert state.v_mag[downstream] <= state.v_mag[upstream] + 1e-9


def test_der_raises_downstream_voltage(tiny_spec):
    base = sim.run_timeseries(tiny_spec, sim.ScenarioConfig(
        horizon_minutes=1440, der_penetration=0))
    high = sim.run_timeseries(tiny_spec, sim.ScenarioConfig(
        horizon_minutes=1440, der_penetration=40))
    noon = 50
    assert base[noon].p_injection_pu.min() >= 0.0
    assert high[noon].p_injection_pu.min() < 0.0
    lift = high[noon].v_mag - base[noon].v_mag
    assert lift.max() > 1e-4
    assert lift.min() > -1e-6


def test_run_is_deterministic(tiny_spec):
    cfg = sim.ScenarioConfig(horizon_minutes=6 * sim.TIMESTEP_MINUTES,
                             der_penetration=20)
    a = np.stack([s.v_mag for s in sim.run_timeseries(tiny_spec, cfg)])
    b = np.stack([s.v_mag for s in sim.run_timeseries(tiny_spec, cfg)])
    assert np.array_equal(a, b)


def test_solve_timestep_matches_full_run(tiny_spec):
    cfg = sim.ScenarioConfig(horizon_minutes=8 * sim.TIMESTEP_MINUTES,
                             der_penetration=20)
    full = sim.run_timeseries(tiny_spec, cfg)
    single = sim.solve_timestep(tiny_spec, 0, cfg)
    assert np.array_equal(single.v_mag, full[0].v_mag)
    with pytest.raises(ValueError, match="horizon"):
        sim.solve_timestep(tiny_spec, 9, cfg)


# ---------------------------------------------------------------------------
# controls: regulator, ties, switching faults


def reg_chain_spec():
    """hub -sw- head -line(heavy)- mid -reg- out, with load at out."""
    hub = sim.BusSpec(0, 7.2, "substation_hub", ("A",), net.HUB_FEEDER, 2.0)
    head = sim.BusSpec(1, 7.2, "feeder_head", ("A",), 9, 2.0)
    mid = sim.BusSpec(2, 7.2, "dt_high", ("A",), 9, 2.0)
    out = sim.BusSpec(3, 7.2, "dt_high", ("A",), 9, 2.0)
    link = sim.DeviceSpec(0, 0, 1, "switch", ("A",), 1e-4, 1e-4, 0.0, 2.0)
    line = sim.DeviceSpec(1, 1, 2, "line", ("A",), 0.04, 0.06, 2.0, 2.0)
    reg = sim.DeviceSpec(2, 2, 3, "regulator", ("A",), 1e-3, 2e-3, 0.0, 2.0)
    feeder = sim.FeederSpec(9, 1, [head, mid, out], [line, reg], [], [], [])
    return sim.SubstationSpec(
        seed=0, size_class="tiny", hub_bus=hub, hub_kv=7.2,
        feeders=[feeder], hub_links=[link], ties=[], tie_devices=[],
        xfmr_rating_pu=2.0, feeder_rating_pu=2.0, aux_load=0j,
        ltc_setpoint=1.0)


def test_regulator_steps_into_deadband():
    spec = reg_chain_spec()
    graph = sim.build_graph(spec)
    s = np.zeros(graph.n_nodes, dtype=complex)
    out_node = graph.node_of[(3, "A")]
    s[out_node] = complex(0.4, 0.1)
    controls = sim.Controls()
    controller = sim.RegulatorController(graph)
    taps, volts = [], []
    for _ in range(8):
        state = sim.solve_powerflow(spec, graph, s, controls)
        taps.append(controls.taps.get((2, "A"), 0))
        volts.append(state.v_mag[out_node])
        controller.update(controls, state)
    assert volts[0] < 0.99
    assert taps == sorted(taps)
    assert 1 <= max(controls.taps.values()) <= 5
    assert 0.99 <= volts[-1] <= 1.01
    assert state.tap[out_node] == pytest.approx(max(controls.taps.values()) / 16)


def test_tie_closure_reroots_transfer_subtree(tiny_spec):
    cfg = sim.ScenarioConfig(horizon_minutes=4 * sim.TIMESTEP_MINUTES,
                             der_penetration=0,
                             tie_closures=(0,), tie_close_step=2)
    states = sim.run_timeseries(tiny_spec, cfg)
    tie = tiny_spec.ties[0]
    graph = sim.build_graph(tiny_spec)

    def edge_status(state, uid):
        dev = graph.device_by_uid[uid]
        for e in state.edges:
            key = (e.from_id, e.to_id)
            a = graph.node_of.get((dev.from_bus, "A"))
            b = graph.node_of.get((dev.to_bus, "A"))
            if key == (a, b):
                return e.status
        raise AssertionError("edge not found")

    for state in states[:2]:
        assert edge_status(state, tie.device_uid) == 0
        assert edge_status(state, tie.sectionalizer_uid) == 1
    for state in states[2:]:
        assert edge_status(state, tie.device_uid) == 1
        assert edge_status(state, tie.sectionalizer_uid) == 0

    _, _, _, feeder = net.structural_annotations(states[3].bus_phases,
                                                 states[3].edges)
    for ph in net.PHASES:
        node = graph.node_of[(tie.transfer_bus, ph)]
        assert feeder[node] == tie.from_feeder
    _, _, _, feeder_before = net.structural_annotations(states[0].bus_phases,
                                                        states[0].edges)
    for ph in net.PHASES:
        node = graph.node_of[(tie.transfer_bus, ph)]
        assert feeder_before[node] == tie.to_feeder


def test_open_sectionalizer_islands_subtree(tiny_spec):
    graph = sim.build_graph(tiny_spec)
    controls = sim.Controls(
        closed_override={tiny_spec.ties[0].sectionalizer_uid: False})
    s = np.zeros(graph.n_nodes, dtype=complex)
    with pytest.raises(sim.PowerFlowError, match="islanded"):
        sim.solve_powerflow(tiny_spec, graph, s, controls)


def test_closing_tie_without_sectionalizer_is_a_loop(tiny_spec):
    graph = sim.build_graph(tiny_spec)
    controls = sim.Controls(
        closed_override={tiny_spec.ties[0].device_uid: True})
    s = np.zeros(graph.n_nodes, dtype=complex)
    with pytest.raises(sim.PowerFlowError, match="loop"):
        sim.solve_powerflow(tiny_spec, graph, s, controls)


# ---------------------------------------------------------------------------
# profiles


def test_load_profile_bounds():
    p = sim.ProfileSpec(kind="load", peak_pu=0.02, peak_hour=18.0, pf=0.95,
                        noise_seed=3)
    series = sim.materialize_profile(p, 96)
    assert series.shape == (96,)
    assert series.min() >= 0.08 * 0.02 - 1e-12
    assert series.max() <= 1.2 * 0.02 + 1e-12


def test_pv_profile_is_zero_at_night_and_positive_midday():
    p = sim.ProfileSpec(kind="pv", peak_pu=0.05, peak_hour=13.0,
                        noise_seed=3, noise_sigma=0.3)
    series = sim.materialize_profile(p, 96)
    assert np.all(series[:24] == 0.0)
    assert series[50] > 0.0
    assert series.max() <= 0.05 + 1e-12


def test_unknown_profile_kind():
    with pytest.raises(ValueError, match="kind"):
        sim.materialize_profile(
            sim.ProfileSpec(kind="wind", peak_pu=1.0, peak_hour=0.0), 4)
