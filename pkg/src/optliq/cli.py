"""Command-line entry point.

Every command reads a configuration (a file path or a bundled recipe name),
writes CSV outputs plus ``manifest.json`` into ``--out``, and exits nonzero
on bad input or a detected invariant violation.  Outputs are assembled in a
scratch directory and moved into place only on success, so a failed run
leaves nothing behind.

Policies for ``simulate``, ``evaluate`` and ``compare`` are given as:

    solve           solve the filtering HJB for the config and use its rates
    deterministic   solve the averaged single-regime problem and use its rates
    constant:RATE   sell at a fixed rate
    bang_bang:P     sell at the cap while the belief in regime 1 is at most P
    PATH.npz        a value field saved by ``optliq solve``
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import EmConfig, em_fit, y_hat_path
from .config import RunConfig, load_config, spec_to_text
from .errors import ConfigError, DomainError, EstimationError, ModelSpecError, StabilityError, ThinningBoundError
from .filter import read_event_log
from .hjb import Grid, ValueField, closed_form_oracle, oracle_error, solve, solve_deterministic, stable_dt
from .model import stationary_mixture, value_upper_bound
from .simulator import DEFAULT_DT, Policy, simulate_batch, simulate_path

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _Run:
    """Scratch output directory committed to ``out`` on success."""

    def __init__(self, out: str, command: str, cfg: RunConfig):
        self.out = Path(out)
        if self.out.exists() and any(self.out.iterdir()):
            raise ConfigError(f"output directory {self.out} is not empty")
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".optliq-", dir=self.out.parent))
        self.files = []
        self.manifest = {
            "command": command,
            "config_path": cfg.path,
            "config_sha256": cfg.sha256,
            "version": __version__,
        }

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.tmp / name

    def commit(self):
        self.manifest["outputs"] = sorted(self.files)
        with open(self.tmp / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if self.out.exists():
            self.out.rmdir()
        self.tmp.rename(self.out)

    def discard(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _grid(cfg: RunConfig, args) -> Grid:
    def pick(flag, key, default):
        v = getattr(args, flag, None)
        return int(v) if v is not None else cfg.get("grid", key, default, int)

    npi = pick("npi", "npi", 20)
    if cfg.spec.K == 1:
        npi = 1
    return Grid(nt=pick("nt", "nt", 400), nw=pick("nw", "nw", 600), npi=npi)


def _mc(cfg: RunConfig, args):
    paths = args.paths if args.paths is not None else cfg.get("mc", "paths", 10000, int)
    seed = args.seed if args.seed is not None else cfg.get("mc", "seed", 0, int)
    dt = cfg.get("mc", "dt_target", DEFAULT_DT)
    workers = args.workers if args.workers is not None else cfg.get("mc", "workers", 1, int)
    return int(paths), int(seed), float(dt), int(workers)


def _solve_field(cfg: RunConfig, grid: Grid, deterministic: bool, dt_max=None) -> ValueField:
    cfl = cfg.get("grid", "cfl", "sharp", str)
    if dt_max is None:
        dt_max = cfg.get("grid", "dt_max", None)
    spec = cfg.spec
    if deterministic:
        spec = stationary_mixture(spec) if spec.K > 1 else spec
        return solve_deterministic(spec, Grid(grid.nt, grid.nw, 1), cfl=cfl, dt_max=dt_max)
    return solve(spec, grid, cfl=cfl, dt_max=dt_max)


def _policy(text: str, cfg: RunConfig, grid: Grid, info: dict) -> Policy:
    if text in ("solve", "deterministic"):
        vf = _solve_field(cfg, grid, text == "deterministic")
        info[text] = {"dt": vf.dt, "n_steps": vf.n_steps, "value": vf.value(cfg.spec.w0) * cfg.spec.s0}
        return Policy.from_field(vf)
    kind, _, arg = text.partition(":")
    try:
        if kind == "constant":
            return Policy.constant(float(arg))
        if kind == "bang_bang":
            return Policy.bang_bang(float(arg))
    except ValueError:
        raise ConfigError(f"bad policy argument {text!r}") from None
    p = Path(text)
    if p.suffix == ".npz" and p.exists():
        return Policy.from_field(ValueField.load(p))
    raise ConfigError(f"unknown policy {text!r}")


def _is_oracle_case(cfg: RunConfig) -> bool:
    s = cfg.spec
    z = s.jumps.support
    return (s.K == 1 and z.size == 2 and s.impact.c_f == 0 and s.rho == 0 and s.terminal.form == "zero"
            and z[0] == -z[1] and s.jumps.base_intensity[0, 0] < s.jumps.base_intensity[0, 1]
            and s.impact.general_f is None and s.jumps.time_multiplier is None)


# ---------------------------------------------------------------------------
# commands


def cmd_solve(cfg: RunConfig, args, run: _Run):
    grid = _grid(cfg, args)
    spec = cfg.spec
    run.manifest["grid"] = {"nt": grid.nt, "nw": grid.nw, "npi": grid.npi,
                            "cfl": cfg.get("grid", "cfl", "sharp", str), "dt_max": cfg.get("grid", "dt_max", None)}
    factors = cfg.experiment.get("nu_max_factors")
    if factors is not None:
        factors = json.loads(factors)
        base = spec.w0 / spec.T
        # one time step for all caps, set by the largest (least stable) one
        dt_max = min(stable_dt(spec.replace(nu_max=f * base), grid) for f in factors)
        rows = []
        for f in factors:
            vf = solve(spec.replace(nu_max=f * base), grid, dt_max=dt_max)
            rows.append((f, f * base, spec.s0 * vf.value(spec.w0, 0.5), vf.dt, vf.min_weight))
            print(f"nu_max = {f * base:g}: V(0, w0, 0.5) = {rows[-1][2]:.4f}")
        _write_rows(run.path("sweep.csv"), ["factor", "nu_max", "value", "dt", "min_weight"], rows)
        run.manifest["effective_dt"] = rows[0][3]
        return
    vf = _solve_field(cfg, grid, args.deterministic)
    vf.to_csv(run.path("value.csv"))
    vf.save(run.path("policy.npz"))
    run.manifest.update(effective_dt=vf.dt, n_steps=vf.n_steps, min_weight=vf.min_weight,
                        value=spec.s0 * vf.value(spec.w0), upper_bound=value_upper_bound(spec))
    print(f"dt = {vf.dt:.6g} ({vf.n_steps} steps), min stencil weight {vf.min_weight:.3g}")
    print(f"V(0, w0{'' if not vf.has_pi else ', 0.5'}) = {spec.s0 * vf.value(spec.w0):.6f}")
    if spec.s0 * vf.V.max() > value_upper_bound(spec) * (1 + 1e-9):
        raise StabilityError("solved value exceeds the upper bound")
    if _is_oracle_case(cfg):
        err = oracle_error(vf, spec)
        run.manifest["oracle_error"] = err
        print(f"oracle sup-norm relative error = {err:.3e}")


def cmd_oracle_check(cfg: RunConfig, args, run: _Run):
    if not _is_oracle_case(cfg):
        raise ConfigError("oracle-check needs a single-regime config with c_up < c_down, c_f = 0, rho = 0, zero terminal")
    grid = _grid(cfg, args)
    vf = _solve_field(cfg, grid, False)
    spec = cfg.spec
    lam = spec.jumps.base_intensity[0]
    theta = float(spec.jumps.support[0])
    rows = []
    for n, t in enumerate(vf.t):
        exact = closed_form_oracle(theta, lam[0], lam[1], float(spec.jumps.impact_coefficient[1]),
                                   spec.nu_max, spec.T, min(t, spec.T), vf.w)
        for i, w in enumerate(vf.w):
            rows.append((t, w, vf.V[n, i, 0], exact[i], vf.V[n, i, 0] - exact[i]))
    _write_rows(run.path("oracle.csv"), ["t", "w", "V", "oracle", "error"], rows)
    err = oracle_error(vf, spec)
    run.manifest.update(grid={"nt": grid.nt, "nw": grid.nw}, effective_dt=vf.dt, oracle_error=err)
    print(f"oracle sup-norm relative error = {err:.3e}")


def cmd_simulate(cfg: RunConfig, args, run: _Run):
    paths, seed, dt, workers = _mc(cfg, args)
    info = {}
    policy = _policy(args.policy, cfg, _grid(cfg, args), info)
    batch = simulate_batch(cfg.spec, policy, paths, seed, dt, workers)
    _write_rows(run.path("paths.csv"),
                ["path", "seed", "revenue", "terminal_payment", "total", "tau", "final_inventory",
                 "final_price", "n_events"],
                [(i, int(batch.seeds[i]), batch.revenue[i], batch.terminal_payment[i], batch.total[i],
                  batch.tau[i], batch.final_inventory[i], batch.final_price[i], int(batch.n_events[i]))
                 for i in range(paths)])
    rec = simulate_path(cfg.spec, policy, int(batch.seeds[0]), dt)
    _write_rows(run.path("events_path0.csv"),
                ["t", "kind", "label", "price_pre", "price_post", "pi1_pre", "pi1_post", "inventory"],
                [(e.t, e.kind, e.label, e.price_pre, e.price_post, e.pi_pre[0], e.pi_post[0], e.inventory)
                 for e in rec.events])
    run.manifest.update(policy=args.policy, paths=paths, seed=seed, dt_target=dt, workers=workers, solver=info)


def cmd_evaluate(cfg: RunConfig, args, run: _Run):
    paths, seed, dt, workers = _mc(cfg, args)
    info = {}
    policy = _policy(args.policy, cfg, _grid(cfg, args), info)
    mean, se = simulate_batch(cfg.spec, policy, paths, seed, dt, workers).mean_and_error()
    bound = value_upper_bound(cfg.spec)
    _write_rows(run.path("summary.csv"), ["mean", "std_error", "paths", "upper_bound"],
                [(mean, se, paths, bound)])
    run.manifest.update(policy=args.policy, paths=paths, seed=seed, dt_target=dt, workers=workers,
                        solver=info, mean=mean, std_error=se)
    print(f"mean = {mean:.4f} +/- {se:.4f} (standard error, {paths} paths)")
    if mean > bound:
        raise StabilityError(f"Monte Carlo mean {mean} exceeds the upper bound {bound}")


def cmd_compare(cfg: RunConfig, args, run: _Run):
    paths, seed, dt, workers = _mc(cfg, args)
    grid = _grid(cfg, args)
    info = {}
    pa = _policy(args.policy_a, cfg, grid, info)
    pb = _policy(args.policy_b, cfg, grid, info)
    ra = simulate_batch(cfg.spec, pa, paths, seed, dt, workers)
    rb = simulate_batch(cfg.spec, pb, paths, seed, dt, workers)
    gain = ra.total - rb.total
    _write_rows(run.path("paths.csv"), ["path", "seed", "total_a", "total_b", "gain"],
                [(i, int(ra.seeds[i]), ra.total[i], rb.total[i], gain[i]) for i in range(paths)])
    se = float(gain.std(ddof=1) / np.sqrt(paths)) if paths > 1 else 0.0
    _write_rows(run.path("summary.csv"), ["gain", "ci95", "std_error", "mean_a", "mean_b", "paths"],
                [(float(gain.mean()), 1.96 * se, se, float(ra.total.mean()), float(rb.total.mean()), paths)])
    run.manifest.update(policy_a=args.policy_a, policy_b=args.policy_b, paths=paths, seed=seed,
                        dt_target=dt, workers=workers, solver=info, gain=float(gain.mean()), ci95=1.96 * se)
    print(f"gain = {gain.mean():.4f} +/- {1.96 * se:.4f} (95%, {paths} paths)")


def cmd_calibrate(cfg: RunConfig, args, run: _Run):
    events = args.events or cfg.experiment.get("events")
    if events is None:
        raise ConfigError("[experiment] missing field 'events' (or pass --events)")
    p = Path(events)
    if not p.is_absolute() and not p.exists() and cfg.path is not None:
        p = Path(cfg.path).parent / p
    support = cfg.spec.jumps.support
    try:
        log = read_event_log(p, support)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read events: {exc}") from None
    horizon = args.horizon if args.horizon is not None else cfg.get("experiment", "horizon", None)
    if horizon is None:
        horizon = float(log.times[-1]) if len(log) else 0.0
    em = EmConfig(n_states=cfg.get("experiment", "n_states", 2, int),
                  max_iters=cfg.get("experiment", "max_iters", 500, int),
                  tol=cfg.get("experiment", "tol", 1e-9),
                  fix_generator=cfg.get("experiment", "fix_generator", "false", str).lower() == "true")
    res = em_fit(log, float(horizon), em, support=support)
    if cfg.spec.K != res.base_intensity.shape[0]:
        raise ConfigError("template config must have as many regimes as the fit")
    text = spec_to_text(res.to_spec(cfg.spec))
    with open(run.path("params.cfg"), "w") as fh:
        fh.write(text)
    t, y = y_hat_path(res, log)
    _write_rows(run.path("y_hat.csv"), ["t", "y_hat"], zip(t, y))
    _write_rows(run.path("loglik.csv"), ["iteration", "loglik"], enumerate(res.loglik_trace))
    run.manifest.update(events=str(p), horizon=float(horizon), n_events=len(log), n_iter=res.n_iter,
                        em={"n_states": em.n_states, "max_iters": em.max_iters, "tol": em.tol,
                            "fix_generator": em.fix_generator, "init": "moment"},
                        converged=res.converged, base_intensity=res.base_intensity.tolist(),
                        generator=res.Q.tolist())
    print("rates per regime (one row per regime, one column per mark):")
    for row in res.base_intensity:
        print("  " + "  ".join(f"{x:10.3f}" for x in row))


COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "calibrate": cmd_calibrate,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="optliq", description="Optimal liquidation with a hidden market regime.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, mc=False):
        p.add_argument("--config", required=True, help="config file or bundled recipe name")
        p.add_argument("--out", required=True, help="output directory (created; must be empty)")
        p.add_argument("--nt", type=int)
        p.add_argument("--nw", type=int)
        p.add_argument("--npi", type=int)
        if mc:
            p.add_argument("--paths", type=int)
            p.add_argument("--seed", type=int)
            p.add_argument("--workers", type=int)

    p = sub.add_parser("solve", help="solve the HJB equation and write the value/policy table")
    common(p)
    p.add_argument("--deterministic", action="store_true", help="solve the averaged single-regime problem")
    p = sub.add_parser("oracle-check", help="compare the solver with the closed form")
    common(p)
    for name in ("simulate", "evaluate"):
        p = sub.add_parser(name, help=f"{name} a policy by Monte Carlo")
        common(p, mc=True)
        p.add_argument("--policy", default="solve")
    p = sub.add_parser("compare", help="paired Monte Carlo comparison of two policies")
    common(p, mc=True)
    p.add_argument("--policy-a", default="solve")
    p.add_argument("--policy-b", default="deterministic")
    p = sub.add_parser("calibrate", help="fit regime intensities to an event log by EM")
    common(p)
    p.add_argument("--events", help="event CSV (defaults to [experiment] events)")
    p.add_argument("--horizon", type=float, help="observation horizon in days")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run = None
    try:
        cfg = load_config(args.config)
        run = _Run(args.out, args.command, cfg)
        start = time.perf_counter()
        COMMANDS[args.command](cfg, args, run)
        run.manifest["argv"] = list(sys.argv[1:] if argv is None else argv)
        print(f"wrote {args.out} in {time.perf_counter() - start:.1f} s")
        run.commit()
        return 0
    except (ConfigError, ModelSpecError) as exc:
        print(f"optliq: configuration error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except (DomainError, StabilityError, EstimationError, ThinningBoundError) as exc:
        print(f"optliq: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    if run is not None:
        run.discard()
    return code


if __name__ == "__main__":
    sys.exit(main())
