"""Paired comparison of the filtering policy with the averaged-model policy.

Run: python demos/gain_from_filtering.py [--paths N] [--T days]
"""
import argparse

from optliq import hjb, model
from optliq import simulator as sm


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=5000)
    ap.add_argument("--T", type=float, default=2.0)
    args = ap.parse_args()

    spec = model.table2_spec(T=args.T)
    grid = hjb.Grid(400, 600, 20)
    filt = hjb.solve(spec, grid)
    mix = model.stationary_mixture(spec)
    det = hjb.solve_deterministic(mix, hjb.Grid(grid.nt, grid.nw, 1))
    cmp = sm.compare_policies(spec, sm.Policy.from_field(filt), sm.Policy.from_field(det), args.paths, seed=7)
    print(f"T = {args.T:g}: filtering {cmp.mean_a:.2f}, averaged model {cmp.mean_b:.2f}, "
          f"gain {cmp.gain:.2f} +- {cmp.ci:.2f} (95%, {args.paths} paths)")


if __name__ == "__main__":
    main()
