"""Fit the two-regime model to the bundled simulated tick logs.

Run: python demos/calibrate_bundled.py
"""
import textwrap

import numpy as np

from optliq import calibrate as cal
from optliq import config
from optliq.filter import read_event_log


def main():
    for name in ("calib_set1", "calib_set2"):
        cfg = config.load_recipe(name)
        log = read_event_log(config.recipe_path(name).with_suffix(".csv"))
        horizon = cfg.get("experiment", "horizon")
        fix = cfg.get("experiment", "fix_generator", "false", str).lower() == "true"
        res = cal.em_fit(log, horizon, cal.EmConfig(fix_generator=fix))
        print(f"{name}: {len(log)} events over {horizon:g} days, {res.n_iter} iterations")
        print("  up / down rates by state:")
        print(textwrap.indent(np.array2string(res.base_intensity, precision=1), "    "))
        print("  generator:")
        print(textwrap.indent(np.array2string(res.Q, precision=2), "    "))
        _, y = cal.y_hat_path(res, log)
        print(f"  mean regime estimate {y.mean():.3f}")


if __name__ == "__main__":
    main()
