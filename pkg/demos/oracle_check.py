"""Solve the single-regime benchmark and compare with its closed form.

Run: python demos/oracle_check.py
"""
import numpy as np

from optliq import hjb, model


def main():
    spec = model.counterexample_spec()
    for grid in (hjb.Grid(100, 75, 1), hjb.Grid(200, 150, 1), hjb.Grid(400, 300, 1)):
        vf = hjb.solve(spec, grid)
        print(f"{grid.nt}x{grid.nw}: dt={vf.dt:.3g}, sup relative error {hjb.oracle_error(vf, spec):.3e}")

    # the optimal policy sells at the cap everywhere with inventory left
    print("selling at the cap on every w > 0 at t = 0:", bool(np.all(vf.nu_star[0, 1:, 0] == spec.nu_max)))
    exact = hjb.closed_form_oracle(0.001, 900.0, 1000.0, 7e-6, spec.nu_max, spec.T, 0.0, spec.w0)
    print(f"V(0, w0): scheme {vf.value(spec.w0):.3f}, closed form {exact:.3f}")


if __name__ == "__main__":
    main()
