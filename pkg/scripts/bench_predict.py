"""Time one ensemble forward pass over many candidate actions for a single state.

    python3 scripts/bench_predict.py [--candidates N] [--repeats R]
"""
import argparse
import time

import numpy as np

from chillerlab.config import load_reference_config
from chillerlab.critic import CriticHParams, predict, train
from chillerlab.dataset import build_targets, masks_from_config
from chillerlab.harness import soo_trajectory
from chillerlab.plant import SimParams


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--candidates", type=int, default=100_000)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    config = load_reference_config()
    examples = build_targets(soo_trajectory(config, SimParams(), 0, days=1), config)
    # untrained weights cost the same to evaluate
    model = train(examples, masks_from_config(config), CriticHParams(epochs=0))
    rng = np.random.default_rng(0)
    actions = np.stack([rng.choice(config.action_dim(a).allowed_values, size=args.candidates)
                        for a in config.action_names], axis=1)
    state = dict(zip(examples.feature_names, examples.features[0]))
    times = []
    for _ in range(args.repeats):
        start = time.perf_counter()
        predict(model, state, actions, config.action_names)
        times.append(time.perf_counter() - start)
    print(f"{args.candidates} candidates x {model.hparams.ensemble_size} members: "
          f"best {min(times):.2f}s, mean {np.mean(times):.2f}s over {args.repeats} runs")


if __name__ == "__main__":
    main()
