import textwrap

import pytest

from chillerlab.config import load_reference_config, parse_config


@pytest.fixture(scope="session")
def ref_config():
    return load_reference_config()


def toy_config(actions: str, action_constraints: str = "", observation_constraints: str = "",
               sensors: str = "  - {name: load, unit: tons, range: [0, 1000]}\n  - {name: temp, unit: degF, range: [30, 90]}\n",
               modes: str = ""):
    """Parse a small config from YAML fragments (each already indented by two spaces)."""
    text = "horizons: {objective_minutes: 15, constraint_minutes: 15}\n"
    text += "sensors:\n" + sensors
    text += "actions:\n" + actions
    if action_constraints:
        text += "action_constraints:\n" + action_constraints
    if observation_constraints:
        text += "observation_constraints:\n" + observation_constraints
    if modes:
        text += "modes:\n" + modes
    return parse_config(textwrap.dedent(text))


SEARCH_ACTIONS = """\
  - {name: a1, kind: continuous, range: [40, 48], step: 0.5}
  - {name: a2, kind: discrete, values: [0, 1, 2, 3]}
  - {name: a3, kind: continuous, range: [0, 10], step: 1}
"""
SEARCH_ACTION_CONSTRAINTS = """\
  - {id: pair, expr: "a1 - a3 <= 44"}
  - {id: running, expr: "a2 + a3 >= 2"}
"""
SEARCH_OBSERVATION_CONSTRAINTS = """\
  - {id: temp_cap, sensor: temp, direction: max_le, bound: "60 - load / 100", tolerance: 0.5}
"""


def search_toy_config():
    """Three action dims whose full grid (748 actions before pruning) is enumerable."""
    return toy_config(SEARCH_ACTIONS, SEARCH_ACTION_CONSTRAINTS, SEARCH_OBSERVATION_CONSTRAINTS)


_SEARCH_MODEL = {}


def search_toy_model(seed=0):
    """Small ensemble fitted to a synthetic energy / temperature response on the toy config."""
    if seed in _SEARCH_MODEL:
        return _SEARCH_MODEL[seed]
    import numpy as np

    from chillerlab.critic import CriticHParams, train
    from chillerlab.dataset import TrainingSet, feature_names, masks_from_config, target_names

    cfg = search_toy_config()
    rng = np.random.default_rng(seed)
    n = 800
    load = rng.uniform(0, 1000, n)
    temp = rng.uniform(30, 90, n)
    a1 = rng.choice(cfg.action_dim("a1").allowed_values, n)
    a2 = rng.choice(cfg.action_dim("a2").allowed_values, n)
    a3 = rng.choice(cfg.action_dim("a3").allowed_values, n)
    energy = 0.1 * load + 2.0 * (a1 - 44) ** 2 + 5 * a2 + 0.3 * (a3 - 5) ** 2 + rng.normal(0, 1, n)
    head_temp = 0.5 * temp + 0.5 * a1 - a3 + rng.normal(0, 0.5, n)
    X = np.stack([load, temp, a1, a2, a3], axis=1)
    data = TrainingSet(X, feature_names(cfg), np.stack([energy, head_temp], axis=1), target_names(cfg),
                       np.arange(n) * 5)
    model = train(data, masks_from_config(cfg), CriticHParams(ensemble_size=4, units_per_layer=16, epochs=60,
                                                              batch_size=64, seed=seed))
    _SEARCH_MODEL[seed] = (cfg, model)
    return cfg, model


def exploit_oracle(cfg, model, state, alpha=1.0):
    """Brute force: every feasible grid action, re-scanned filter, lowest mu + alpha*sigma (first on ties)."""
    import itertools

    import numpy as np

    from chillerlab.config import check_action, evaluate_bound
    from chillerlab.critic import predict

    grids = [cfg.action_dim(a).allowed_values for a in cfg.action_names]
    feasible = [combo for combo in itertools.product(*grids)
                if check_action(cfg, state, dict(zip(cfg.action_names, map(float, combo)))).passed]
    if not feasible:
        return None
    actions = np.array(feasible, dtype=float)
    pred = predict(model, state, actions, cfg.action_names)
    keep = np.ones(len(actions), dtype=bool)
    for c in cfg.observation_constraints:
        mu, sd = pred.head(c.id)
        u = evaluate_bound(cfg, state, c)
        keep &= (mu + alpha * sd <= u) if c.direction == "max_le" else (mu - alpha * sd >= u)
    if not keep.any():
        return None
    mu_e, sd_e = pred.head("energy")
    score = np.where(keep, mu_e + alpha * sd_e, np.inf)
    return dict(zip(cfg.action_names, map(float, actions[int(np.argmin(score))])))


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Records one acceptance line: ``criterion(n, passed, detail)``."""

    def record(number, passed, detail=""):
        _CRITERIA.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
