"""Plant power with one vs two chillers across load, and the condenser-setpoint trade-off.

    python3 scripts/crossover_sweep.py [--wetbulb F] [--out CSV]
"""
import argparse

import numpy as np
import pandas as pd

from chillerlab.plant import SimParams, plant_physics
from chillerlab.soo import SooRules, soo_action


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wetbulb", type=float, default=57.0)
    ap.add_argument("--out")
    args = ap.parse_args()
    params = SimParams()
    base = soo_action(SooRules(), args.wetbulb, 2, 1, False)
    rows = []
    for load in np.arange(50.0, 1001.0, 50.0):
        row = {"load_tons": load}
        for n in (1, 2, 3):
            row[f"kw_{n}_chillers"] = plant_physics(load, args.wetbulb, {**base, "n_mech_chillers": float(n)},
                                                    params)["total_power"]
        rows.append(row)
    load_table = pd.DataFrame(rows)
    crossover = load_table[load_table["kw_2_chillers"] < load_table["kw_1_chillers"]]["load_tons"].min()
    print(load_table.to_string(index=False, float_format=lambda v: f"{v:.1f}"))
    print(f"two chillers cheaper from {crossover:.0f} tons")
    cond = []
    for tower in np.arange(66.0, 81.0, 2.0):
        p = plant_physics(400.0, args.wetbulb, {**base, "tower_temp": tower}, params)
        cond.append({"tower_setpoint": tower, "tower_kw": p["tower_power"], "chiller_kw": p["chiller_power"],
                     "total_kw": p["total_power"]})
    cond_table = pd.DataFrame(cond)
    print(cond_table.to_string(index=False, float_format=lambda v: f"{v:.1f}"))
    if args.out:
        load_table.to_csv(args.out, index=False)


if __name__ == "__main__":
    main()
