"""Monte Carlo simulation of the controlled price, inventory and belief.

Each path draws a hidden regime path and a stream of candidate event times
from a homogeneous Poisson process at the global intensity bound.  A
candidate is accepted as a price jump with probability (current intensity in
the true regime) / bound, and the jump mark is chosen with the same uniform.
Because both streams are drawn up front, two policies run on the same seed
see the same randomness (common random numbers).

The selling rate is re-evaluated at accepted price jumps and on a fixed knot
grid, and held constant in between; proceeds over each piece are integrated
in closed form.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Tuple

import numba
import numpy as np

from .errors import ThinningBoundError
from .filter import ks_rk4_inplace
from .hjb import ValueField, _f_eval, _impact_args
from .model import ModelSpec, lambda_max

DEFAULT_DT = 1e-3
JUMP, SWITCH = 0, 1
_POLICY_KINDS = {"constant": 0, "deterministic": 1, "feedback": 2, "bang_bang": 3}


@dataclass(frozen=True)
class Policy:
    """Selling-rate rule.

    Kinds:
        constant: always ``rate``.
        deterministic: table over ``(t, w)``.
        feedback: table over ``(t, w, pi)`` where ``pi`` is the belief in regime 1.
        bang_bang: ``nu_max`` while the belief in regime 1 is at most
            ``threshold``, otherwise 0.

    Tables are interpolated multilinearly, clamped to the grid, and the
    result is clipped to ``[0, nu_max]``.
    """

    kind: str
    rate: float = 0.0
    threshold: float = 0.5
    t_grid: np.ndarray = field(default_factory=lambda: np.zeros(1))
    w_grid: np.ndarray = field(default_factory=lambda: np.zeros(1))
    pi_grid: np.ndarray = field(default_factory=lambda: np.zeros(1))
    table: np.ndarray = field(default_factory=lambda: np.zeros((1, 1, 1)))

    def __post_init__(self):
        if self.kind not in _POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        tab = np.ascontiguousarray(self.table, dtype=float)
        if tab.ndim == 2:
            tab = tab[:, :, None]
        grids = [np.ascontiguousarray(g, dtype=float).reshape(-1)
                 for g in (self.t_grid, self.w_grid, self.pi_grid)]
        if tab.shape != tuple(g.size for g in grids):
            raise ValueError(f"table shape {tab.shape} does not match grids {[g.size for g in grids]}")
        for g in grids:
            if g.size > 1 and np.any(np.diff(g) <= 0):
                raise ValueError("policy grids must be strictly increasing")
        if np.any(tab < 0) or self.rate < 0:
            raise ValueError("selling rates must be nonnegative")
        object.__setattr__(self, "table", tab)
        object.__setattr__(self, "t_grid", grids[0])
        object.__setattr__(self, "w_grid", grids[1])
        object.__setattr__(self, "pi_grid", grids[2])

    @classmethod
    def constant(cls, rate: float) -> "Policy":
        return cls("constant", rate=float(rate))

    @classmethod
    def deterministic(cls, t_grid, w_grid, table) -> "Policy":
        return cls("deterministic", t_grid=t_grid, w_grid=w_grid, table=np.asarray(table)[:, :, None])

    @classmethod
    def feedback(cls, t_grid, w_grid, pi_grid, table) -> "Policy":
        return cls("feedback", t_grid=t_grid, w_grid=w_grid, pi_grid=pi_grid, table=table)

    @classmethod
    def bang_bang(cls, threshold: float) -> "Policy":
        return cls("bang_bang", threshold=float(threshold))

    @classmethod
    def from_field(cls, vf: ValueField) -> "Policy":
        """Optimal-rate policy of a solved value field."""
        if vf.has_pi:
            return cls.feedback(vf.t, vf.w, vf.pi, vf.nu_star)
        return cls.deterministic(vf.t, vf.w, vf.nu_star)

    def _args(self):
        return (_POLICY_KINDS[self.kind], self.rate, self.threshold,
                self.t_grid, self.w_grid, self.pi_grid, self.table)

    def __call__(self, t: float, w: float, pi1: float, nu_max: float) -> float:
        return float(_policy_rate(*self._args(), t, w, pi1, nu_max))


class Event(NamedTuple):
    t: float
    kind: str
    label: int
    price_pre: float
    price_post: float
    pi_pre: np.ndarray
    pi_post: np.ndarray
    inventory: float


@dataclass
class PathRecord:
    """One simulated trajectory.

    Event arrays are aligned; ``kinds`` holds ``JUMP`` (label = mark index)
    or ``SWITCH`` (label = new regime index).  ``revenue`` is the discounted
    proceeds from selling; ``terminal_payment`` the discounted value of the
    inventory left at ``tau``.
    """

    seed: int
    times: np.ndarray
    kinds: np.ndarray
    labels: np.ndarray
    price_pre: np.ndarray
    price_post: np.ndarray
    pi_pre: np.ndarray
    pi_post: np.ndarray
    inventory: np.ndarray
    revenue: float
    tau: float
    terminal_payment: float
    final_inventory: float
    final_price: float
    final_pi: np.ndarray
    initial_state: int
    n_jumps: int
    n_candidates: int

    @property
    def total(self) -> float:
        return self.revenue + self.terminal_payment

    @property
    def events(self) -> List[Event]:
        names = {JUMP: "jump", SWITCH: "switch"}
        return [Event(float(t), names[int(k)], int(l), float(a), float(b), pa, pb, float(w))
                for t, k, l, a, b, pa, pb, w in zip(self.times, self.kinds, self.labels, self.price_pre,
                                                   self.price_post, self.pi_pre, self.pi_post,
                                                   self.inventory)]

    def jump_log(self):
        """Observed price jumps as an event log."""
        from .filter import EventLog
        sel = self.kinds == JUMP
        return EventLog(self.times[sel], self.labels[sel])


# ---------------------------------------------------------------------------
# compiled kernel


@numba.njit(cache=True, error_model="numpy", inline="always")
def _locate(grid, x):
    n = grid.size
    if n == 1 or x <= grid[0]:
        return 0, 0.0
    if x >= grid[n - 1]:
        return n - 2, 1.0
    i = np.searchsorted(grid, x, side="right") - 1
    return i, (x - grid[i]) / (grid[i + 1] - grid[i])


@numba.njit(cache=True, error_model="numpy", inline="always")
def _policy_rate(kind, rate, threshold, tg, wg, pg, table, t, w, pi1, nu_max):
    if kind == 0:
        nu = rate
    elif kind == 3:
        nu = nu_max if pi1 <= threshold else 0.0
    else:
        it, rt = _locate(tg, t)
        iw, rw = _locate(wg, w)
        ip, rp = _locate(pg, pi1 if kind == 2 else 0.0)
        nt, nw, np_ = table.shape
        nu = 0.0
        for a in range(2):
            ca = rt if a == 1 else 1.0 - rt
            if ca == 0.0 or it + a >= nt:
                continue
            for b in range(2):
                cb = rw if b == 1 else 1.0 - rw
                if cb == 0.0 or iw + b >= nw:
                    continue
                for c in range(2):
                    cc = rp if c == 1 else 1.0 - rp
                    if cc == 0.0 or ip + c >= np_:
                        continue
                    nu += ca * cb * cc * table[it + a, iw + b, ip + c]
    if nu < 0.0:
        nu = 0.0
    if nu > nu_max:
        nu = nu_max
    return nu


@numba.njit(cache=True, error_model="numpy", inline="always")
def _mult(mtab, dtk, t):
    x = t / dtk
    i = int(x)
    if i >= mtab.size - 1:
        return mtab[mtab.size - 1]
    r = x - i
    return mtab[i] * (1.0 - r) + mtab[i + 1] * r


@numba.njit(cache=True, error_model="numpy")
def _path_kernel(rng, Q, pi0, lam, a, z, rho, nu_max, w0, s0, T, lam_bar, mtab, dtk,
                 fkind, c_f, sig, f_tab, pkind, prate, pthr, tg, wg, pg, table, record):
    K, J = lam.shape

    # hidden regime path
    u = rng.random()
    y = 0
    acc = pi0[0]
    while u > acc and y < K - 1:
        y += 1
        acc += pi0[y]
    y0 = y
    sw_t = np.empty(16)
    sw_s = np.empty(16, dtype=np.int64)
    n_sw = 0
    s = 0.0
    yy = y
    while True:
        out = -Q[yy, yy]
        if out <= 0.0:
            break
        s += rng.exponential(1.0 / out)
        if s >= T:
            break
        v = rng.random() * out
        nxt = 0
        c = 0.0
        for l in range(K):
            if l == yy:
                continue
            c += Q[yy, l]
            nxt = l
            if v < c:
                break
        if n_sw == sw_t.size:
            sw_t = np.concatenate((sw_t, np.empty(sw_t.size)))
            sw_s = np.concatenate((sw_s, np.empty(sw_s.size, dtype=np.int64)))
        sw_t[n_sw] = s
        sw_s[n_sw] = nxt
        n_sw += 1
        yy = nxt

    # candidate events at the bound
    cap = int(lam_bar * T + 10.0 * math.sqrt(lam_bar * T + 1.0)) + 16
    cand = np.empty(cap)
    cu = np.empty(cap)
    n_c = 0
    s = 0.0
    while lam_bar > 0.0:
        s += rng.standard_exponential() / lam_bar
        if s >= T:
            break
        if n_c == cap:
            cap *= 2
            cand = np.concatenate((cand, np.empty(cand.size)))
            cu = np.concatenate((cu, np.empty(cu.size)))
        cand[n_c] = s
        cu[n_c] = rng.random()
        n_c += 1

    n_rec = n_c + n_sw if record else 0
    ev_t = np.empty(n_rec)
    ev_k = np.empty(n_rec, dtype=np.int64)
    ev_l = np.empty(n_rec, dtype=np.int64)
    ev_s0 = np.empty(n_rec)
    ev_s1 = np.empty(n_rec)
    ev_p0 = np.empty((n_rec, K))
    ev_p1 = np.empty((n_rec, K))
    ev_w = np.empty(n_rec)
    n_ev = 0

    t = 0.0
    W = w0
    S = s0
    pi = pi0.copy()
    rev = 0.0
    tau = T
    bad = False
    n_jumps = 0
    ci = 0
    si = 0
    kn = 1
    eps_w = 1e-12 * w0

    nu = _policy_rate(pkind, prate, pthr, tg, wg, pg, table, t, W, pi[0], nu_max)
    fval = _f_eval(nu, fkind, c_f, sig, f_tab, nu_max)
    lam_nu = np.empty((K, J))
    tot_nu = np.zeros(K)
    for k in range(K):
        for j in range(J):
            lam_nu[k, j] = lam[k, j] * (1.0 + a[j] * nu)
            tot_nu[k] += lam_nu[k, j]
    work = np.empty(5 * K)
    pi_pre = np.empty(K)

    while True:
        t_c = cand[ci] if ci < n_c else np.inf
        t_s = sw_t[si] if si < n_sw else np.inf
        t_k = kn * dtk
        t_next = min(t_c, t_s, t_k, T)
        span = t_next - t
        liquidate = False
        if nu > 0.0 and W <= nu * span + eps_w:
            span = W / nu
            t_next = t + span
            liquidate = True

        if span > 0.0:
            if rho > 0.0:
                disc = math.exp(-rho * t) * (-math.expm1(-rho * span)) / rho
            else:
                disc = span
            rev += nu * S * (1.0 - fval) * disc
            W = 0.0 if liquidate else max(W - nu * span, 0.0)
            if not liquidate:
                nsub = max(1, int(math.ceil(span / dtk - 1e-9)))
                h = span / nsub
                for q in range(nsub):
                    ts = t + q * h
                    ks_rk4_inplace(pi, Q, tot_nu, _mult(mtab, dtk, ts), _mult(mtab, dtk, ts + 0.5 * h),
                                   _mult(mtab, dtk, ts + h), h, work)
        t = t_next
        if liquidate:
            tau = t
            break
        if t >= T:
            tau = T
            break

        reeval = False
        if t == t_s:
            if record:
                ev_t[n_ev] = t
                ev_k[n_ev] = 1
                ev_l[n_ev] = sw_s[si]
                ev_s0[n_ev] = S
                ev_s1[n_ev] = S
                ev_p0[n_ev] = pi
                ev_p1[n_ev] = pi
                ev_w[n_ev] = W
                n_ev += 1
            y = sw_s[si]
            si += 1
        if t == t_c:
            m = _mult(mtab, dtk, t)
            tot = 0.0
            for j in range(J):
                tot += m * lam_nu[y, j]
            if tot > lam_bar * (1.0 + 1e-12):
                bad = True
                break
            x = cu[ci] * lam_bar
            ci += 1
            if x < tot:
                c = 0.0
                mark = J - 1
                for j in range(J):
                    c += m * lam_nu[y, j]
                    if x < c:
                        mark = j
                        break
                S_pre = S
                S = S * (1.0 + z[mark])
                norm = 0.0
                for k in range(K):
                    pi_pre[k] = pi[k]
                    pi[k] = pi[k] * lam_nu[k, mark]
                    norm += pi[k]
                if not norm > 0.0:
                    bad = True
                    break
                for k in range(K):
                    pi[k] /= norm
                n_jumps += 1
                if record:
                    ev_t[n_ev] = t
                    ev_k[n_ev] = 0
                    ev_l[n_ev] = mark
                    ev_s0[n_ev] = S_pre
                    ev_s1[n_ev] = S
                    ev_p0[n_ev] = pi_pre
                    ev_p1[n_ev] = pi
                    ev_w[n_ev] = W
                    n_ev += 1
                reeval = True
        if t >= t_k:
            kn += 1
            reeval = True
        if reeval:
            nu_new = _policy_rate(pkind, prate, pthr, tg, wg, pg, table, t, W, pi[0], nu_max)
            if nu_new == nu:
                continue
            nu = nu_new
            fval = _f_eval(nu, fkind, c_f, sig, f_tab, nu_max)
            for k in range(K):
                tot_nu[k] = 0.0
                for j in range(J):
                    lam_nu[k, j] = lam[k, j] * (1.0 + a[j] * nu)
                    tot_nu[k] += lam_nu[k, j]

    return (rev, tau, W, S, pi, n_jumps, n_c, bad, y0,
            ev_t[:n_ev], ev_k[:n_ev], ev_l[:n_ev], ev_s0[:n_ev], ev_s1[:n_ev],
            ev_p0[:n_ev], ev_p1[:n_ev], ev_w[:n_ev])


# ---------------------------------------------------------------------------
# Python drivers


def path_seed(master_seed: int, index: int) -> int:
    """64-bit seed of path ``index`` derived from a master seed."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class _Prepared:
    """Arrays handed to the compiled kernel for one (spec, policy, dt) triple."""

    def __init__(self, spec: ModelSpec, policy: Policy, dt_target: float):
        js = spec.jumps
        self.spec = spec
        self.policy = policy
        self.Q = np.ascontiguousarray(spec.chain.Q)
        self.pi0 = np.ascontiguousarray(spec.chain.pi0)
        self.lam = np.ascontiguousarray(js.base_intensity)
        self.a = np.ascontiguousarray(js.impact_coefficient)
        self.z = np.ascontiguousarray(js.support)
        self.lam_bar = lambda_max(spec)
        n_knots = int(math.ceil(spec.T / dt_target - 1e-9))
        self.dtk = spec.T / n_knots
        knots = np.arange(n_knots + 2) * self.dtk
        self.mtab = np.array([js.multiplier(min(t, spec.T)) for t in knots]) \
            if js.time_multiplier is not None else np.ones(n_knots + 2)
        self.impact = _impact_args(spec)
        self.pargs = policy._args()

    def run(self, seed: int, record: bool):
        rng = np.random.Generator(np.random.PCG64(seed))
        sp = self.spec
        out = _path_kernel(rng, self.Q, self.pi0, self.lam, self.a, self.z, sp.rho, sp.nu_max, sp.w0,
                           sp.s0, sp.T, self.lam_bar, self.mtab, self.dtk, *self.impact, *self.pargs,
                           record)
        if out[7]:
            raise ThinningBoundError(f"intensity exceeded the thinning bound {self.lam_bar} (seed {seed})")
        return out

    def terminal(self, tau, W, S):
        sp = self.spec
        return np.exp(-sp.rho * tau) * S * np.asarray(sp.terminal(W), dtype=float)


def simulate_path(spec: ModelSpec, policy: Policy, seed: int, dt_target: float = DEFAULT_DT) -> PathRecord:
    """Simulate one trajectory and record every price jump and regime switch."""
    prep = _Prepared(spec, policy, dt_target)
    (rev, tau, W, S, pi, n_jumps, n_c, _, y0, et, ek, el, es0, es1, ep0, ep1, ew) = prep.run(seed, True)
    return PathRecord(
        seed=seed, times=et, kinds=ek, labels=el, price_pre=es0, price_post=es1, pi_pre=ep0, pi_post=ep1,
        inventory=ew, revenue=float(rev), tau=float(tau),
        terminal_payment=float(prep.terminal(tau, W, S)), final_inventory=float(W), final_price=float(S),
        final_pi=pi, initial_state=int(y0), n_jumps=int(n_jumps), n_candidates=int(n_c),
    )


@dataclass
class BatchResult:
    """Per-path summaries of a Monte Carlo run, in path order."""

    seeds: np.ndarray
    revenue: np.ndarray
    tau: np.ndarray
    n_events: np.ndarray
    terminal_payment: np.ndarray
    final_price: np.ndarray
    final_inventory: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.revenue + self.terminal_payment

    def mean_and_error(self) -> Tuple[float, float]:
        x = self.total
        if x.size < 2:
            return float(x.mean()), 0.0
        return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def _run_chunk(args):
    spec, policy, dt_target, seeds = args
    prep = _Prepared(spec, policy, dt_target)
    n = len(seeds)
    rev, tau, W, S, nev = (np.empty(n) for _ in range(5))
    for i, sd in enumerate(seeds):
        out = prep.run(int(sd), False)
        rev[i], tau[i], W[i], S[i], nev[i] = out[0], out[1], out[2], out[3], out[5]
    return rev, tau, W, S, nev


def simulate_batch(spec: ModelSpec, policy: Policy, n_paths: int, seed: int,
                   dt_target: float = DEFAULT_DT, workers: int = 1) -> BatchResult:
    """Simulate ``n_paths`` paths with seeds derived from ``seed``.

    Results depend only on ``(spec, policy, n_paths, seed, dt_target)``, not
    on the number of workers.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    seeds = np.array([path_seed(seed, i) for i in range(n_paths)], dtype=np.uint64)
    workers = max(1, int(workers))
    if workers == 1:
        parts = [_run_chunk((spec, policy, dt_target, seeds))]
    else:
        chunks = np.array_split(seeds, workers * 4)
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, [(spec, policy, dt_target, c) for c in chunks if c.size]))
    rev, tau, W, S, nev = (np.concatenate([p[i] for p in parts]) for i in range(5))
    prep = _Prepared(spec, policy, dt_target)
    return BatchResult(seeds=seeds, revenue=rev, tau=tau, n_events=nev.astype(np.int64),
                       terminal_payment=prep.terminal(tau, W, S), final_price=S, final_inventory=W)


def mc_evaluate(spec: ModelSpec, policy: Policy, n_paths: int, seed: int,
                dt_target: float = DEFAULT_DT, workers: int = 1) -> Tuple[float, float]:
    """Sample mean and standard error of discounted proceeds plus terminal payment."""
    return simulate_batch(spec, policy, n_paths, seed, dt_target, workers).mean_and_error()


@dataclass
class Comparison:
    """Paired estimate of ``mean(a) - mean(b)``; ``ci`` is the 95% half-width."""

    gain: float
    ci: float
    std_error: float
    mean_a: float
    mean_b: float
    n_paths: int

    def __iter__(self):
        return iter((self.gain, self.ci))


def compare_policies(spec: ModelSpec, a: Policy, b: Policy, n_paths: int, seed: int,
                     dt_target: float = DEFAULT_DT, workers: int = 1) -> Comparison:
    """Paired comparison of two policies on common random numbers (same path seeds)."""
    ra = simulate_batch(spec, a, n_paths, seed, dt_target, workers)
    rb = simulate_batch(spec, b, n_paths, seed, dt_target, workers)
    d = ra.total - rb.total
    se = float(d.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return Comparison(gain=float(d.mean()), ci=1.96 * se, std_error=se,
                      mean_a=float(ra.total.mean()), mean_b=float(rb.total.mean()), n_paths=n_paths)
