import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chillerlab.config import (ConfigError, check_action, dump_config, evaluate_bound, mask_for_mode, parse_config)
from chillerlab.expr import ExpressionError

from conftest import toy_config

ONE_DIM = "  - {name: a1, kind: continuous, range: [40, 52], step: 0.5}\n"


def test_minimal_config_grid_size():
    cfg = toy_config(ONE_DIM)
    assert len(cfg.action_dim("a1").allowed_values) == 25


def test_reference_action_space(ref_config):
    expected = {
        "chiller_1_temp": (40, 52), "chiller_2_temp": (40, 52), "chiller_3_temp": (40, 52),
        "n_mech_chillers": {0, 1, 2, 3}, "n_towers": {1, 2, 3}, "tower_temp": (40, 100),
        "cw_flow": (700, 5400), "n_cw_pumps": {1, 2, 3}, "chw_dp": (12.5, 20), "n_chw_pumps": {1, 2, 3},
        "n_fc_chillers": {0, 1, 2, 3}, "fc_chw_temp": (42, 52),
    }
    assert ref_config.action_names == list(expected)
    for name, want in expected.items():
        d = ref_config.action_dim(name)
        if isinstance(want, set):
            assert d.kind == "discrete" and set(d.allowed_values) == want
        else:
            assert d.kind == "continuous" and d.range == want


def test_reference_horizons(ref_config):
    assert ref_config.objective_steps == 3 and ref_config.constraint_steps == 3


def test_bound_with_action_ref_rejected():
    with pytest.raises(ConfigError, match="bound contains no action refs"):
        toy_config(ONE_DIM, observation_constraints="  - {sensor: temp, direction: max_le, bound: 'a1 + 1'}\n")


@pytest.mark.parametrize("fragment,where", [
    ("  - {name: a1, kind: continuous, range: [52, 40], step: 0.5}\n", "actions[0].range"),
    ("  - {name: a1, kind: continuous, range: [40, 52], step: 20}\n", "actions[0].step"),
    ("  - {name: a1, kind: sometimes, range: [40, 52]}\n", "actions[0].kind"),
    ("  - {name: a1, kind: discrete, values: []}\n", "actions[0].values"),
    (ONE_DIM + ONE_DIM, "actions[1].name"),
])
def test_invalid_actions_name_the_field(fragment, where):
    with pytest.raises(ConfigError, match=where.replace("[", r"\[").replace("]", r"\]")):
        toy_config(fragment)


def test_unresolved_reference():
    with pytest.raises(ConfigError, match="unresolved"):
        toy_config(ONE_DIM, action_constraints="  - {expr: 'a1 <= nowhere'}\n")


def test_action_constraint_needs_an_action():
    with pytest.raises(ConfigError, match="at least one action"):
        toy_config(ONE_DIM, action_constraints="  - {expr: 'load <= 3'}\n")


def test_horizon_multiple_of_step():
    text = "horizons: {objective_minutes: 7, constraint_minutes: 15}\nsensors: []\nactions:\n" + ONE_DIM
    with pytest.raises(ConfigError, match="horizons.objective_minutes"):
        parse_config(text)


def test_syntax_error_has_position():
    with pytest.raises(ConfigError, match="line 2, column"):
        parse_config("horizons: {objective_minutes: 15\nsensors: [")


def test_check_action_margin_zero_at_bound():
    cfg = toy_config(ONE_DIM, action_constraints="  - {id: c, expr: 'a1 <= 42'}\n")
    rep = check_action(cfg, {}, {"a1": 42.0})
    assert rep.passed and rep.margins["c"] == 0.0


def test_check_action_off_grid():
    cfg = toy_config(ONE_DIM)
    rep = check_action(cfg, {}, {"a1": 42.3})
    assert not rep.passed and rep.off_grid == ["a1"]


def test_infeasible_pair_flagged():
    cfg = toy_config(ONE_DIM, action_constraints="  - {id: up, expr: 'a1 <= 44'}\n  - {id: lo, expr: 'a1 >= 46'}\n")
    for v in cfg.action_dim("a1").allowed_values:
        rep = check_action(cfg, {}, {"a1": float(v)})
        assert not rep.passed
        assert rep.infeasible_pairs == [("up", "lo")]


def test_missing_action_value():
    with pytest.raises(ConfigError):
        check_action(toy_config(ONE_DIM), {}, {})


def test_unbound_state_identifier():
    cfg = toy_config(ONE_DIM, action_constraints="  - {expr: 'a1 <= load'}\n")
    with pytest.raises(ExpressionError, match="unbound"):
        check_action(cfg, {}, {"a1": 42.0})


NESTED = "min(h3, 3 + max(h1, min(l1, l1 + (h1 - l1) / (h2 - l2) * (o1 - l2))))"
NESTED_SENSORS = "".join(f"  - {{name: {n}, unit: degF, range: [0, 100]}}\n" for n in
                         ("h1", "h2", "h3", "l1", "l2", "o1", "temp"))


def _nested_cfg(bound):
    return toy_config(ONE_DIM, sensors=NESTED_SENSORS,
                      observation_constraints=f"  - {{sensor: temp, direction: max_le, bound: '{bound}'}}\n")


def test_evaluate_bound_constant():
    cfg = _nested_cfg("45")
    assert evaluate_bound(cfg, {}, cfg.observation_constraints[0]) == 45.0


def test_evaluate_bound_nested():
    cfg = _nested_cfg(NESTED)
    state = dict(h1=50, h2=80, h3=48, l1=44, l2=60, o1=70)
    assert evaluate_bound(cfg, state, cfg.observation_constraints[0]) == 48.0


def test_evaluate_bound_degenerate_denominator():
    cfg = _nested_cfg(NESTED)
    state = dict(h1=50, h2=60, h3=48, l1=44, l2=60, o1=70)
    with pytest.raises(ExpressionError, match=r"division by zero in \(\(h1 - l1\) / \(h2 - l2\)\)"):
        evaluate_bound(cfg, state, cfg.observation_constraints[0])


def test_mechanical_mode_masks_free_cooling_temp(ref_config):
    prev = {n: 0.0 for n in ref_config.action_names} | {"fc_chw_temp": 46.0}
    proposed = dict(prev) | {"fc_chw_temp": 43.0, "n_fc_chillers": 2.0}
    out = mask_for_mode(ref_config, "mechanical", proposed, previous=prev)
    assert out["fc_chw_temp"] == 46.0
    assert out["n_fc_chillers"] == 0.0


def test_free_cooling_masks_mechanical_count(ref_config):
    action = {n: 1.0 for n in ref_config.action_names} | {"n_mech_chillers": 2.0}
    assert mask_for_mode(ref_config, "free_cooling", action, previous=action)["n_mech_chillers"] == 0.0


def test_all_active_mode_is_identity():
    cfg = toy_config(ONE_DIM, modes="  - {name: mechanical}\n")
    assert mask_for_mode(cfg, "mechanical", {"a1": 44.5}) == {"a1": 44.5}


def test_unknown_mode(ref_config):
    with pytest.raises(ConfigError):
        mask_for_mode(ref_config, "turbo", {})


def test_reference_dump_round_trip(ref_config):
    again = parse_config(dump_config(ref_config))
    assert again == ref_config
    assert dump_config(again) == dump_config(ref_config)


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_grid_closure(ref_config, data):
    action = {d.name: float(data.draw(st.sampled_from(list(d.allowed_values)))) for d in ref_config.action_dims}
    state = {"oat_wetbulb": data.draw(st.floats(30, 80))}
    if check_action(ref_config, state, action).passed:
        for d in ref_config.action_dims:
            assert float(d.quantize(action[d.name])) == action[d.name]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 24), st.integers(0, 24))
def test_infeasibility_detection(x_idx, gap):
    grid = np.arange(40, 52.001, 0.5)
    x = float(grid[x_idx])
    y = x + 0.5 * (gap + 1)  # strictly above x
    cfg = toy_config(ONE_DIM, action_constraints=f"  - {{expr: 'a1 <= {x}'}}\n  - {{expr: 'a1 >= {y}'}}\n")
    feasible = [v for v in cfg.action_dim("a1").allowed_values if x >= v >= y]
    assert feasible == []
    assert all(not check_action(cfg, {}, {"a1": float(v)}).passed for v in grid)


def test_two_dim_exhaustive_agreement():
    cfg = toy_config("  - {name: a, kind: discrete, values: [0, 1, 2, 3]}\n"
                     "  - {name: b, kind: continuous, range: [0, 2], step: 0.5}\n",
                     action_constraints="  - {expr: 'a + b <= 3'}\n  - {expr: 'b >= 0.5 * a'}\n")
    for a, b in itertools.product([0, 1, 2, 3], np.arange(0, 2.01, 0.5)):
        expected = a + b <= 3 and b >= 0.5 * a
        assert check_action(cfg, {}, {"a": float(a), "b": float(b)}).passed == expected
