"""Regenerate the shipped model unit tests from simulator sweeps.

    python3 scripts/derive_unit_tests.py [--out PATH] [--seed N]
"""
import argparse

from chillerlab.config import load_reference_config
from chillerlab.harness import (FIXTURE_RELATIONSHIPS, derive_unit_tests, dump_unit_tests, reference_anchors,
                                reference_unit_tests_path)
from chillerlab.plant import SimParams


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(reference_unit_tests_path()))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    config = load_reference_config()
    params = SimParams()
    tests = derive_unit_tests(config, params, reference_anchors(config, params, args.seed), FIXTURE_RELATIONSHIPS)
    dump_unit_tests(tests, args.out)
    print(f"wrote {len(tests)} unit tests to {args.out}")


if __name__ == "__main__":
    main()
