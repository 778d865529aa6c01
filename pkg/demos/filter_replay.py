"""Simulate one liquidation path and replay its jumps through both filters.

Run: python demos/filter_replay.py
"""
import numpy as np

from optliq import filter as fl
from optliq import model
from optliq import simulator as sm


def main():
    spec = model.table2_spec()
    rate = 4000.0
    rec = sm.simulate_path(spec, sm.Policy.constant(rate), seed=11)
    log = rec.jump_log()
    nu = lambda t: rate if t < rec.tau else 0.0   # noqa: E731

    ks = fl.filter_event_log(spec, log, nu)
    zk = fl.zakai_event_log(spec, log, nu)
    print(f"{len(log)} jumps, sold out at t = {rec.tau:.3f}, proceeds {rec.total:.2f}")
    print(f"largest gap between the normalized and unnormalized filters: "
          f"{np.abs(ks.pi_post - zk.pi_post).max():.2e}")

    # belief in the good regime, sampled along the path
    for n in np.linspace(0, len(log) - 1, 8).astype(int):
        print(f"t = {log.times[n]:.3f}  pi1 = {ks.pi_post[n, 0]:.3f}")
    up, down = log.counts(2)
    print(f"up-ticks {up}, down-ticks {down}; initial regime {rec.initial_state + 1}")


if __name__ == "__main__":
    main()
