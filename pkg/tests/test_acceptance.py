"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line in the summary.

The 28-day experiment runs once per session (about 15-20 minutes on one core)
and feeds criteria 1, 4 and 11.
"""

import numpy as np
import pytest

from chillerlab.config import check_action
from chillerlab.critic import CriticHParams, gradient_check, parameter_count, init_params, train
from chillerlab.dataset import FeatureMask, Normalizer, TrainingSet, build_targets, masks_from_config
from chillerlab.harness import (AbSchedule, bucketed_savings, chiller_toggles, compare_architectures,
                                constraint_report, run_ab)
from chillerlab.plant import SimParams, plant_physics
from chillerlab.policy import EXPLORE, PolicyHParams, act, generate_candidates, softmax
from chillerlab.soo import SooRules, soo_action
from conftest import exploit_oracle, search_toy_model, toy_config
from test_dataset import CFG as TARGET_CFG, frame, oracle_targets

pytestmark = pytest.mark.acceptance

AB_SEED = 7


@pytest.fixture(scope="module")
def ab_run(ref_config):
    return run_ab(AB_SEED, AbSchedule(days=28), ref_config, SimParams(), audit=True)


def test_criterion_01_ab_savings_and_constraints(ab_run, ref_config, criterion):
    savings = bucketed_savings(ab_run.rows).overall
    report = constraint_report(ab_run.rows, ref_config)
    gap = abs(report.loc["AI", "all"] - report.loc["SOO", "all"])
    minutes = ab_run.seconds / 60
    ok = savings >= 0.05 and gap <= 0.02 and minutes <= 30
    criterion(1, ok, f"savings {100 * savings:.2f}% (>= 5), constraint-rate gap {100 * gap:.2f} pp (<= 2), "
                     f"runtime {minutes:.1f} min (<= 30), kick-outs {len(ab_run.kick_outs)}")
    assert savings >= 0.05
    assert gap <= 0.02
    assert minutes <= 30


def test_criterion_02_exploit_matches_brute_force(criterion):
    cfg, model = search_toy_model()
    rng = np.random.default_rng(2024)
    hp = PolicyHParams(epsilon=0.0)
    mismatches = 0
    for k in range(100):
        state = {"load": float(rng.uniform(0, 1000)), "temp": float(rng.uniform(30, 90))}
        prev = {"a1": float(rng.choice(cfg.action_dim("a1").allowed_values)),
                "a2": float(rng.choice([1.0, 2.0, 3.0])), "a3": float(rng.choice([2.0, 5.0, 8.0]))}
        action, _ = act(state, prev, model, cfg, hp, None, None, np.random.default_rng([k, 1]), t=5 * k)
        mismatches += action != exploit_oracle(cfg, model, state)
    criterion(2, mismatches == 0, f"{mismatches} mismatches over 100 states")
    assert mismatches == 0


def test_criterion_03_target_builder_oracle(criterion):
    failures = 0
    for seed in range(50):
        rng = np.random.default_rng([seed, 3])
        n = 20
        ts = np.cumsum(np.where(rng.random(n) < 0.1, 10, 5)) - 5
        df = frame(list(np.round(rng.normal(45, 2, n), 2)), rewards=list(-rng.uniform(0, 30, n)),
                   ts=list(ts), gap=list(rng.random(n) < 0.1), loads=list(rng.uniform(0, 900, n)))
        got = build_targets(df, TARGET_CFG)
        want = oracle_targets(df)
        same = list(got.timestamps) == [t for t, _ in want] and np.array_equal(
            got.targets, np.array([r for _, r in want]).reshape(-1, 3))
        failures += not same
    criterion(3, failures == 0, f"{failures} of 50 trajectories differ")
    assert failures == 0


def test_criterion_04_constraint_safety(ab_run, ref_config, criterion):
    rows = ab_run.rows
    ai = rows[rows["controller"] == "AI"]
    bad = 0
    for _, r in ai.iterrows():
        action = {k: float(r[k]) for k in ref_config.action_names}
        bad += not check_action(ref_config, r.to_dict(), action).passed
    ok = bad == 0 and ab_run.filter_violations == 0
    criterion(4, ok, f"{len(ai)} AI actions, {bad} break an action constraint; "
                     f"{ab_run.filter_violations} surviving candidates break the filter on re-scan")
    assert bad == 0
    assert ab_run.filter_violations == 0


def test_criterion_05_hyperparameter_defaults(ref_config, criterion):
    c, p = CriticHParams(), PolicyHParams()
    checks = {
        "ensemble": c.ensemble_size == 10,
        "layers": (c.shared_hidden_layers, c.per_head_hidden_layers) == (1, 2),
        "units": c.units_per_layer == 128,
        "lr": c.learning_rate == 0.001,
        "horizon": ref_config.objective_horizon_minutes == 15 and ref_config.constraint_horizon_minutes == 15,
        "epsilon": p.epsilon == 0.05,
        "alpha": p.alpha == 1.0,
        "beta": p.beta == 0.01,
    }
    masks = masks_from_config(ref_config)
    counted = sum(v[0].size for v in init_params(masks, CriticHParams(ensemble_size=2)).values())
    checks["parameter count"] = counted == parameter_count(masks, c)
    failed = [k for k, v in checks.items() if not v]
    criterion(5, not failed, f"parameters per member {counted}; failed: {failed or 'none'}")
    assert not failed


def test_criterion_06_numerical_soundness(criterion):
    rng = np.random.default_rng(6)
    data = TrainingSet(rng.normal(size=(10, 3)), ("x1", "x2", "x3"), rng.normal(size=(10, 1)), ("y",), np.arange(10))
    mask = (FeatureMask("all", ("x1", "x2", "x3"), ("y",)),)
    worst_grad = 0.0
    for seed in range(3):
        hp = CriticHParams(ensemble_size=1, per_head_hidden_layers=0, units_per_layer=4, epochs=0, seed=seed)
        model = train(data, mask, hp)
        worst_grad = max(worst_grad, gradient_check(model, data.features, data.targets))
    worst_sum = 0.0
    for k in range(200):
        scores = rng.normal(0, 10 ** rng.uniform(0, 5), size=rng.integers(1, 500))
        worst_sum = max(worst_sum, abs(softmax(scores, 10 ** rng.uniform(-4, 1)).sum() - 1.0))
    x = rng.normal(50, 20, size=(1000, 6))
    norm = Normalizer.fit(x)
    worst_rt = float(np.abs(norm.invert(norm.apply(x)) - x).max())
    ok = worst_grad < 1e-4 and worst_sum <= 1e-12 and worst_rt <= 1e-9
    criterion(6, ok, f"gradient rel. error {worst_grad:.2e}, softmax sum error {worst_sum:.1e}, "
                     f"z-score round trip {worst_rt:.1e}")
    assert ok


def test_criterion_07_cap_and_sampling(ref_config, criterion):
    dims = "".join(f"  - {{name: d{i}, kind: discrete, values: {list(range(500))}}}\n" for i in range(2))
    wide = toy_config(dims)
    fractions = []
    for seed in range(20):
        c = generate_candidates(wide, {"d0": 0.0, "d1": 0.0}, {}, PolicyHParams(), np.random.default_rng(seed))
        assert c.uncapped == 250_000
        fractions.append(len(c) / c.uncapped)
    largest = 0
    rng = np.random.default_rng(7)
    state = {"oat_wetbulb": 60.0, "building_load": 500.0}
    base = soo_action(SooRules.from_config(ref_config), 60.0, 2, 1, False)
    for seed in range(5):
        prev = dict(base, tower_temp=float(rng.integers(66, 80)))
        c = generate_candidates(ref_config, prev, state, PolicyHParams(), np.random.default_rng(seed))
        largest = max(largest, len(c))
    ok = all(0.39 <= f <= 0.41 for f in fractions) and largest <= 100_000
    criterion(7, ok, f"kept fraction {min(fractions):.4f}..{max(fractions):.4f} (0.39..0.41), "
                     f"largest reference set {largest} (<= 100000)")
    assert ok


def test_criterion_08_simulator_shape(criterion):
    params = SimParams()
    rules = SooRules()
    base = soo_action(rules, 57.0, 2, 1, False)

    def physics(load, n, **over):
        return plant_physics(load, 57.0, {**base, "n_mech_chillers": float(n), **over}, params)

    def power(load, n):
        return physics(load, n)["total_power"]

    low = all(power(load, 1) < power(load, 2) for load in (100.0, 150.0, 200.0, 250.0))
    high = all(power(load, 2) < power(load, 1) for load in (700.0, 800.0, 900.0))
    cold, hot = physics(400.0, 2, tower_temp=70.0), physics(400.0, 2, tower_temp=80.0)
    trade = cold["tower_power"] > hot["tower_power"] and cold["chiller_power"] < hot["chiller_power"]
    low, high = bool(low), bool(high)
    criterion(8, low and high and trade, f"one chiller cheaper at low load: {low}; two cheaper at high load: {high}; "
                                         f"colder condenser -> more tower, less chiller power: {trade}")
    assert low and high and trade


def test_criterion_09_unit_tests_discriminate(ref_config, criterion):
    results = [compare_architectures(ref_config, SimParams(), seed) for seed in (0, 1, 2)]
    ok = all(r.masked < r.monolithic for r in results)
    detail = ", ".join(f"seed {r.seed}: masked {r.masked:.3f} vs monolithic {r.monolithic:.3f}" for r in results)
    criterion(9, ok, detail)
    assert ok


def test_criterion_10_explore_rate(criterion):
    cfg, model = search_toy_model()
    hp = PolicyHParams(candidate_cap=50)
    state, prev = {"load": 300.0, "temp": 50.0}, {"a1": 44.0, "a2": 1.0, "a3": 5.0}
    branches = [act(state, prev, model, cfg, hp, None, None, np.random.default_rng([10, k]), t=5 * k)[1].branch
                for k in range(10_000)]
    rate = branches.count(EXPLORE) / 10_000
    ok = abs(rate - 0.05) <= 0.01
    criterion(10, ok, f"explore rate {rate:.4f} over 10000 decisions (0.04..0.06)")
    assert ok


def test_criterion_11_chiller_cycling(ab_run, criterion):
    toggles = chiller_toggles(ab_run.rows)
    spacing = toggles["since_previous"].dropna()
    short = int((spacing < 120).sum())
    criterion(11, short == 0, f"{len(toggles)} toggles, {short} closer than 120 min, "
                              f"closest {int(spacing.min()) if len(spacing) else 'n/a'} min")
    assert short == 0
