"""Solve the two-regime reference market, print the policy at t = 0 and check it by simulation.

Run: python demos/table2_policy.py [--paths N]
"""
import argparse

import numpy as np

from optliq import config, hjb, model
from optliq import simulator as sm


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=5000)
    args = ap.parse_args()

    cfg = config.load_recipe("table2")
    spec = cfg.spec
    vf = hjb.solve(spec, hjb.Grid(200, 300, 20))
    print(f"dt = {vf.dt:.3g} after the stability check, smallest stencil weight {vf.min_weight:.3g}")

    # rows: inventory, columns: belief in the good regime
    rows = np.linspace(0, vf.w.size - 1, 7).astype(int)
    cols = np.linspace(0, vf.pi.size - 1, 6).astype(int)
    print("w \\ pi " + "".join(f"{vf.pi[k]:>8.2f}" for k in cols))
    for i in rows:
        print(f"{vf.w[i]:>7.0f}" + "".join(f"{vf.nu_star[0, i, k]:>8.0f}" for k in cols))

    pde = spec.s0 * vf.value(spec.w0, 0.5)
    mean, se = sm.mc_evaluate(spec, sm.Policy.from_field(vf), args.paths, seed=2024)
    print(f"V(0, w0, 0.5) = {pde:.2f}; simulated {mean:.2f} +- {se:.2f}; "
          f"upper bound {model.value_upper_bound(spec):.2f}")


if __name__ == "__main__":
    main()
