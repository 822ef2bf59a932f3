import pytest
from hypothesis import given, settings, strategies as st

from chillerlab.config import check_action
from chillerlab.plant import SimParams, exogenous, initial_state, step
from chillerlab.soo import SooController, SooRules, soo_action, soo_policy, staged_count


def test_rules_from_reference_config(ref_config):
    assert SooRules.from_config(ref_config).chiller_breakpoints == (300.0, 600.0)


@pytest.mark.parametrize("kwargs", [
    {"chiller_breakpoints": (600.0, 300.0)},
    {"chiller_breakpoints": (300.0, 300.0)},
    {"hysteresis": 0.0},
    {"cond_clamp": (85.0, 65.0)},
])
def test_rules_invariants(kwargs):
    with pytest.raises(ValueError):
        SooRules(**kwargs)


def test_condenser_setpoint_clamp():
    assert soo_action(SooRules(), 75.0, 2, 1, False)["tower_temp"] == 82.0
    assert soo_action(SooRules(), 40.0, 1, 1, False)["tower_temp"] == 65.0
    assert soo_action(SooRules(), 85.0, 1, 1, False)["tower_temp"] == 85.0


def test_free_cooling_selected_when_cold():
    a = soo_policy(SooRules(), {"oat_wetbulb": 40.0, "building_load": 200.0})
    assert a["n_mech_chillers"] == 0 and a["n_fc_chillers"] >= 1


def test_no_chatter_inside_hysteresis_band():
    ctl = SooController(SooRules())
    counts = []
    for load in (295, 305, 315, 305, 295, 285, 300, 319):
        counts.append(ctl({"oat_wetbulb": 60.0, "building_load": float(load)})["n_mech_chillers"])
    assert set(counts) == {1.0}
    assert ctl({"oat_wetbulb": 60.0, "building_load": 321.0})["n_mech_chillers"] == 2.0
    assert ctl({"oat_wetbulb": 60.0, "building_load": 285.0})["n_mech_chillers"] == 2.0
    assert ctl({"oat_wetbulb": 60.0, "building_load": 279.0})["n_mech_chillers"] == 1.0


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1000), min_size=1, max_size=40), st.integers(1, 3))
def test_staging_changes_only_past_band(loads, start):
    bps, hyst = (300.0, 600.0), 20.0
    count = start
    for load in loads:
        new = staged_count(load, bps, count, hyst)
        if new > count:
            assert load > bps[new - 2] + hyst
        elif new < count:
            assert load < bps[new - 1] - hyst
        count = new


def _episode(ref_config, seed, days):
    params = SimParams()
    rules = SooRules.from_config(ref_config)
    ctl = SooController(rules)
    state = initial_state(params, seed, 0, soo_action(rules, params.wetbulb_mean, 1, 1, False))
    out = []
    for _ in range(days * 288):
        a = ctl(state.values)
        out.append((state.values, a))
        state, _ = step(state, a, params, seed)
    return out


@pytest.mark.parametrize("seed", [0, 1])
def test_full_episode_compliance_and_static_policy(ref_config, seed):
    steps = _episode(ref_config, seed, 28)
    for s, a in steps:
        rep = check_action(ref_config, s, a)
        assert rep.passed, rep.failed
    for d in ref_config.action_dims:
        if d.kind == "continuous":
            assert len({a[d.name] for _, a in steps}) <= 10, d.name


def test_cold_weather_compliance(ref_config):
    params = SimParams(wetbulb_mean=40.0)
    rules = SooRules.from_config(ref_config)
    ctl = SooController(rules)
    modes = set()
    for t in range(0, 3 * 1440, 5):
        wb, load = exogenous(2, t, params)
        s = {"oat_wetbulb": wb, "building_load": load}
        a = ctl(s)
        modes.add(a["n_mech_chillers"] == 0)
        assert check_action(ref_config, s, a).passed
    assert modes == {True, False}


def test_anti_short_cycle_timer_holds_staging():
    ctl = SooController(SooRules(min_toggle_minutes=120), n_chillers=1, last_toggle=0)
    assert ctl({"oat_wetbulb": 60.0, "building_load": 500.0}, 60)["n_mech_chillers"] == 1.0
    assert ctl.last_toggle == 0
    assert ctl({"oat_wetbulb": 60.0, "building_load": 500.0}, 120)["n_mech_chillers"] == 2.0
    assert ctl.last_toggle == 120


def test_timer_also_holds_mode_switch():
    ctl = SooController(SooRules(min_toggle_minutes=120), n_chillers=2, last_toggle=100)
    a = ctl({"oat_wetbulb": 30.0, "building_load": 500.0}, 150)
    assert a["n_mech_chillers"] == 2.0 and a["n_fc_chillers"] == 0.0 and not ctl.free_cooling


def test_timer_disabled_without_time():
    ctl = SooController(SooRules(min_toggle_minutes=120), n_chillers=1, last_toggle=0)
    assert ctl({"oat_wetbulb": 60.0, "building_load": 500.0})["n_mech_chillers"] == 2.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1200), min_size=5, max_size=200), st.lists(st.floats(25, 70), min_size=5, max_size=200))
def test_timer_spacing_property(loads, wetbulbs):
    ctl = SooController(SooRules(min_toggle_minutes=120))
    prev, toggles = ctl.running(), []
    for k, (load, wb) in enumerate(zip(loads, wetbulbs)):
        ctl({"oat_wetbulb": wb, "building_load": load}, 5 * k)
        if ctl.running() != prev:
            toggles.append(5 * k)
            prev = ctl.running()
    assert all(b - a >= 120 for a, b in zip(toggles, toggles[1:]))


def test_reference_rules_carry_timer(ref_config):
    assert SooRules.from_config(ref_config).min_toggle_minutes == 120
