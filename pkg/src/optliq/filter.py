"""Regime filter driven by observed price jumps.

Between jumps the belief ``pi`` follows a deterministic ODE; at a jump with
mark ``j`` it is updated by Bayes' rule.  An unnormalized (Zakai) version of
the same recursion is provided for cross-checking and for the likelihood
computations used in calibration.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numba
import numpy as np

from .errors import DomainError, ImpossibleObservationError
from .model import ModelSpec

SIMPLEX_TOL = 1e-10
DEFAULT_DT = 1e-3

RatePath = Union[float, Callable[[float], float]]


@dataclass(frozen=True)
class FilterState:
    """Belief over regimes at time ``t``."""

    pi: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        pi = np.array(self.pi, dtype=float)
        if pi.ndim != 1 or np.any(pi < -SIMPLEX_TOL) or abs(pi.sum() - 1.0) > SIMPLEX_TOL:
            raise DomainError(f"belief {pi} is not on the simplex")
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)


@dataclass(frozen=True)
class UnnormalizedState:
    """Unnormalized conditional masses ``p`` with a running log scale.

    The represented measure is ``p * exp(log_scale)``; the scale absorbs
    rescalings that keep ``p`` away from under- and overflow.
    """

    p: np.ndarray
    t: float = 0.0
    log_scale: float = 0.0

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        if p.ndim != 1 or np.any(p < 0) or not p.sum() > 0:
            raise DomainError("unnormalized state needs nonnegative entries with positive mass")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @property
    def mass(self) -> float:
        return float(self.p.sum())

    @property
    def log_mass(self) -> float:
        """Log of the total represented mass, ``log(sum p) + log_scale``."""
        return math.log(self.mass) + self.log_scale


@dataclass(frozen=True)
class EventLog:
    """Observed price jumps: strictly increasing times (days) and mark indices."""

    times: np.ndarray
    marks: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        marks = np.array(self.marks, dtype=np.int64).reshape(-1)
        if times.size != marks.size:
            raise ValueError("times and marks differ in length")
        if times.size and (np.any(np.diff(times) <= 0) or times[0] < 0):
            raise ValueError("event times must be nonnegative and strictly increasing")
        if np.any(marks < 0):
            raise ValueError("mark indices must be nonnegative")
        times.setflags(write=False)
        marks.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", marks)

    def __len__(self):
        return self.times.size

    def counts(self, n_marks: int) -> np.ndarray:
        return np.bincount(self.marks, minlength=n_marks)


def read_event_log(path, support: Optional[Sequence[float]] = None) -> EventLog:
    """Read an event CSV with columns ``t`` and ``mark`` (index) or ``ticks`` (signed).

    A signed tick count is mapped to the unique positive or negative mark of
    ``support``; zero ticks are rejected.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "t" not in cols or not ({"mark", "ticks"} & set(cols)):
            raise ValueError(f"{path}: need a 't' column and a 'mark' or 'ticks' column, got {cols}")
        times, marks = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                times.append(float(row["t"]))
                if "mark" in cols:
                    marks.append(int(row["mark"]))
                else:
                    marks.append(_tick_to_mark(int(row["ticks"]), support))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return EventLog(np.array(times), np.array(marks, dtype=np.int64))


def _tick_to_mark(ticks: int, support) -> int:
    if support is None:
        raise ValueError("signed ticks need the jump support to map onto marks")
    z = np.asarray(support)
    pos, neg = np.flatnonzero(z > 0), np.flatnonzero(z < 0)
    if ticks > 0 and pos.size == 1:
        return int(pos[0])
    if ticks < 0 and neg.size == 1:
        return int(neg[0])
    raise ValueError(f"cannot map tick count {ticks} onto support {list(z)}")


def write_event_log(path, log: EventLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mark"])
        for t, m in zip(log.times, log.marks):
            w.writerow([repr(float(t)), int(m)])


# ---------------------------------------------------------------------------
# compiled kernels (shared with the simulator)


@numba.njit(cache=True, error_model="numpy", inline="always")
def _ks_rhs(x, xo, Q, tot, m, out, oo):
    # belief velocity at x[xo:xo+K] written to out[oo:oo+K]; tot is the total
    # intensity per state at the current rate, before the time multiplier
    K = tot.size
    lbar = 0.0
    for k in range(K):
        lbar += x[xo + k] * tot[k]
    for k in range(K):
        g = 0.0
        for l in range(K):
            g += Q[l, k] * x[xo + l]
        out[oo + k] = g + m * x[xo + k] * (lbar - tot[k])


@numba.njit(cache=True, error_model="numpy", inline="always")
def ks_rk4_inplace(pi, Q, tot, m0, mh, m1, h, work):
    """RK4 step of the belief ODE written into ``pi``; ``work`` is a buffer of length ``5 K``.

    The result is renormalized onto the simplex (negative entries clipped).
    """
    K = pi.size
    _ks_rhs(pi, 0, Q, tot, m0, work, 0)
    for i in range(K):
        work[4 * K + i] = pi[i] + 0.5 * h * work[i]
    _ks_rhs(work, 4 * K, Q, tot, mh, work, K)
    for i in range(K):
        work[4 * K + i] = pi[i] + 0.5 * h * work[K + i]
    _ks_rhs(work, 4 * K, Q, tot, mh, work, 2 * K)
    for i in range(K):
        work[4 * K + i] = pi[i] + h * work[2 * K + i]
    _ks_rhs(work, 4 * K, Q, tot, m1, work, 3 * K)
    s = 0.0
    for i in range(K):
        v = pi[i] + h / 6.0 * (work[i] + 2.0 * work[K + i] + 2.0 * work[2 * K + i] + work[3 * K + i])
        if v < 0.0:
            v = 0.0
        pi[i] = v
        s += v
    for i in range(K):
        pi[i] /= s


@numba.njit(cache=True, error_model="numpy")
def ks_rk4_step(pi, Q, lam_nu, m0, mh, m1, h):
    """One RK4 step of the belief ODE; ``lam_nu`` holds the ``K x J`` intensities at the current rate."""
    out = pi.copy()
    tot = lam_nu.sum(axis=1)
    ks_rk4_inplace(out, Q, tot, m0, mh, m1, h, np.empty(5 * pi.size))
    return out


@numba.njit(cache=True, error_model="numpy")
def bayes_update(pi, lam_col):
    """Posterior after a jump whose per-state intensities are ``lam_col``; empty array if impossible."""
    K = pi.size
    out = np.empty(K)
    s = 0.0
    for k in range(K):
        out[k] = pi[k] * lam_col[k]
        s += out[k]
    if not s > 0.0:
        return np.empty(0)
    for k in range(K):
        out[k] /= s
    return out


@numba.njit(cache=True, error_model="numpy")
def _zakai_rhs(p, Q, lam_nu, m, ref_total, out):
    K = p.size
    for k in range(K):
        s = 0.0
        for j in range(lam_nu.shape[1]):
            s += lam_nu[k, j]
        g = 0.0
        for l in range(K):
            g += Q[l, k] * p[l]
        out[k] = g - p[k] * (m * s - ref_total)


@numba.njit(cache=True, error_model="numpy")
def zakai_rk4_step(p, Q, lam_nu, m0, mh, m1, r0, rh, r1, h):
    """RK4 step of the linear unnormalized filter ODE (``r*`` are total reference intensities)."""
    K = p.size
    k1 = np.empty(K)
    k2 = np.empty(K)
    k3 = np.empty(K)
    k4 = np.empty(K)
    tmp = np.empty(K)
    _zakai_rhs(p, Q, lam_nu, m0, r0, k1)
    for i in range(K):
        tmp[i] = p[i] + 0.5 * h * k1[i]
    _zakai_rhs(tmp, Q, lam_nu, mh, rh, k2)
    for i in range(K):
        tmp[i] = p[i] + 0.5 * h * k2[i]
    _zakai_rhs(tmp, Q, lam_nu, mh, rh, k3)
    for i in range(K):
        tmp[i] = p[i] + h * k3[i]
    _zakai_rhs(tmp, Q, lam_nu, m1, r1, k4)
    out = np.empty(K)
    for i in range(K):
        v = p[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        out[i] = v if v > 0.0 else 0.0
    return out


@numba.njit(cache=True, error_model="numpy")
def scaled_forward(E, lam, marks, alpha0):
    """Scaled forward recursion of the unnormalized filter with exact inter-event flows.

    ``E[n]`` is the ``K x K`` flow ``exp(G * dt_n)`` of the generator
    ``G = Q - diag(total intensity)`` over the gap before event ``n``; the
    last entry (index ``len(marks)``) covers the gap to the horizon.
    Returns the normalized filters just after each event, the scale
    factors ``c_n`` (whose logs sum to the log-likelihood) and the final
    normalized filter at the horizon.
    """
    N = marks.size
    K = alpha0.size
    alphas = np.empty((N + 1, K))
    c = np.empty(N + 1)
    a = alpha0.copy()
    for n in range(N + 1):
        b = np.zeros(K)
        for l in range(K):
            for k in range(K):
                b[k] += a[l] * E[n, l, k]
        if n < N:
            for k in range(K):
                b[k] *= lam[k, marks[n]]
        s = 0.0
        for k in range(K):
            s += b[k]
        c[n] = s
        if s > 0.0:
            for k in range(K):
                b[k] /= s
        a = b
        for k in range(K):
            alphas[n, k] = a[k]
    return alphas, c


# ---------------------------------------------------------------------------
# public operations


def _rate(nu_path: RatePath, t: float) -> float:
    return float(nu_path(t)) if callable(nu_path) else float(nu_path)


def _check_pi(spec: ModelSpec, pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (spec.K,):
        raise DomainError(f"belief has shape {pi.shape}, expected ({spec.K},)")
    if np.any(pi < -SIMPLEX_TOL) or abs(pi.sum() - 1.0) > SIMPLEX_TOL:
        raise DomainError(f"belief {pi} is not on the simplex")
    return pi


def _check_nu(spec: ModelSpec, nu: float):
    if not 0.0 <= nu <= spec.nu_max * (1 + 1e-12):
        raise DomainError(f"rate {nu} outside [0, {spec.nu_max}]")


def _lam_nu(spec: ModelSpec, nu: float) -> np.ndarray:
    js = spec.jumps
    return js.base_intensity * (1.0 + js.impact_coefficient * nu)


def drift(spec: ModelSpec, t: float, pi, nu: float) -> np.ndarray:
    """Velocity of the belief between jumps.

    Computed both from the per-observation innovation sum and from the
    compact ``Q^T pi + pi * (lambda_bar - lambda)`` form; the two must agree.
    """
    pi = _check_pi(spec, pi)
    _check_nu(spec, nu)
    Q = spec.chain.Q
    lam = spec.jumps.multiplier(t) * _lam_nu(spec, nu)   # K x J
    gen = Q.T @ pi

    # innovation form: u^k(z_m) = lam_{k,m} / sum_l pi_l lam_{l,m} - 1
    lam_bar_m = pi @ lam
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(lam_bar_m > 0, lam / lam_bar_m - 1.0, 0.0)   # K x M
    innov = np.einsum("j,jm,km->k", pi, lam, u)
    v_sum = gen - pi * innov

    tot = lam.sum(axis=1)
    v_compact = gen + pi * (pi @ tot - tot)

    scale = 1.0 + np.abs(Q).max() + tot.max()
    if np.max(np.abs(v_sum - v_compact)) > 1e-12 * scale:
        raise ArithmeticError(f"drift forms disagree: {v_sum} vs {v_compact}")
    return v_compact


def jump_update(spec: ModelSpec, t: float, pi, nu: float, mark_index: int) -> np.ndarray:
    """Bayes posterior after observing a jump with mark ``mark_index``."""
    pi = _check_pi(spec, pi)
    _check_nu(spec, nu)
    if not 0 <= mark_index < spec.jumps.J:
        raise DomainError(f"mark index {mark_index} out of range")
    # the factor m(t) * (1 + a_j nu) is common to all states and cancels
    col = spec.jumps.base_intensity[:, mark_index]
    post = bayes_update(pi, np.ascontiguousarray(col))
    if post.size == 0:
        raise ImpossibleObservationError(
            f"mark {mark_index} has zero intensity in every state with positive belief at t={t}"
        )
    return post


def _substeps(horizon: float, dt_target: float) -> int:
    return max(1, int(math.ceil(horizon / dt_target - 1e-9)))


def _propagate_array(spec: ModelSpec, pi: np.ndarray, t0: float, nu_path: RatePath,
                     dt_target: float, horizon: float) -> np.ndarray:
    if horizon <= 0:
        return pi
    n = _substeps(horizon, dt_target)
    h = horizon / n
    Q = np.ascontiguousarray(spec.chain.Q)
    mult = spec.jumps.multiplier
    const_nu = not callable(nu_path)
    lam_nu = np.ascontiguousarray(_lam_nu(spec, _rate(nu_path, t0)))
    for i in range(n):
        t = t0 + i * h
        if not const_nu:
            lam_nu = np.ascontiguousarray(_lam_nu(spec, _rate(nu_path, t)))
        pi = ks_rk4_step(pi, Q, lam_nu, mult(t), mult(t + 0.5 * h), mult(t + h), h)
    return pi


def propagate(spec: ModelSpec, state: FilterState, nu_path: RatePath = 0.0,
              dt_target: float = DEFAULT_DT, horizon: float = 0.0) -> FilterState:
    """Integrate the belief ODE over ``horizon`` with no observed jumps.

    ``nu_path`` is a constant rate or a function of time; it is sampled at the
    start of each RK4 step and held over that step.
    """
    if horizon < 0:
        raise DomainError("horizon must be >= 0")
    pi = _check_pi(spec, state.pi).copy()
    pi = _propagate_array(spec, pi, state.t, nu_path, dt_target, horizon)
    return FilterState(pi, state.t + horizon)


def _reference_total(spec: ModelSpec, t: float, nu: float) -> float:
    lam = spec.jumps.multiplier(t) * _lam_nu(spec, nu)
    return float(lam.max(axis=0).sum())


def zakai_step(spec: ModelSpec, state: UnnormalizedState, nu_path: RatePath = 0.0,
               horizon: float = 0.0, mark_index: Optional[int] = None,
               dt_target: float = DEFAULT_DT) -> UnnormalizedState:
    """Advance the unnormalized filter over ``horizon``, then apply an optional jump.

    The reference measure puts on each mark the largest intensity over the
    states, so jump density ratios lie in ``(0, 1]``.
    """
    p = np.array(state.p, dtype=float)
    log_scale = state.log_scale
    t0 = state.t
    Q = np.ascontiguousarray(spec.chain.Q)
    mult = spec.jumps.multiplier
    if horizon > 0:
        n = _substeps(horizon, dt_target)
        h = horizon / n
        for i in range(n):
            t = t0 + i * h
            nu = _rate(nu_path, t)
            lam_nu = np.ascontiguousarray(_lam_nu(spec, nu))
            # the state-independent part of the decay (mean total minus reference)
            # is a scalar factor, moved into log_scale; RK4 only sees the centered rates
            centre = lam_nu.sum(axis=1).mean()
            ms = [mult(s) for s in (t, t + 0.5 * h, t + h)]
            p = zakai_rk4_step(p, Q, lam_nu, ms[0], ms[1], ms[2],
                               ms[0] * centre, ms[1] * centre, ms[2] * centre, h)
            gap = [ms[q] * centre - _reference_total(spec, s, nu)
                   for q, s in enumerate((t, t + 0.5 * h, t + h))]
            log_scale -= h / 6.0 * (gap[0] + 4.0 * gap[1] + gap[2])
            p, log_scale = _rescale(p, log_scale)
    t1 = t0 + horizon
    if mark_index is not None:
        nu = _rate(nu_path, np.nextafter(t1, -np.inf)) if callable(nu_path) else float(nu_path)
        lam = mult(t1) * _lam_nu(spec, nu)[:, mark_index]
        ref = lam.max()
        if not ref > 0 or not (p * lam).sum() > 0:
            raise ImpossibleObservationError(f"mark {mark_index} has zero intensity at t={t1}")
        p = p * (lam / ref)
        p, log_scale = _rescale(p, log_scale)
    return UnnormalizedState(p, t1, log_scale)


def _rescale(p: np.ndarray, log_scale: float):
    s = p.sum()
    if s < 1e-100 or s > 1e100:
        return p / s, log_scale + math.log(s)
    return p, log_scale


def normalize(state: UnnormalizedState) -> np.ndarray:
    """Normalized belief ``p / sum(p)``."""
    return state.p / state.p.sum()


@dataclass
class FilterTrace:
    """Belief path along an event log.

    ``pi_pre[n]``/``pi_post[n]`` are the beliefs just before and after event
    ``n``; ``final`` is the belief at the end of the replay window.
    """

    times: np.ndarray
    pi_pre: np.ndarray
    pi_post: np.ndarray
    initial: FilterState
    final: FilterState

    @property
    def states(self) -> List[FilterState]:
        out = [self.initial]
        for t, a, b in zip(self.times, self.pi_pre, self.pi_post):
            out.append(FilterState(a, t))
            out.append(FilterState(b, t))
        out.append(self.final)
        return out


def filter_event_log(spec: ModelSpec, log: EventLog, nu_path: RatePath = 0.0,
                     dt_target: float = DEFAULT_DT, horizon: Optional[float] = None,
                     pi0=None) -> FilterTrace:
    """Replay an event log through the belief recursion.

    The rate used at an event is the left limit of ``nu_path``.
    """
    horizon = spec.T if horizon is None else horizon
    if len(log) and (log.times[-1] > horizon or np.any(log.marks >= spec.jumps.J)):
        raise ValueError("event log extends past the horizon or uses unknown marks")
    pi = _check_pi(spec, spec.chain.pi0 if pi0 is None else pi0).copy()
    initial = FilterState(pi, 0.0)
    N = len(log)
    pre = np.empty((N, spec.K))
    post = np.empty((N, spec.K))
    t = 0.0
    for n in range(N):
        tn = float(log.times[n])
        pi = _propagate_array(spec, pi, t, nu_path, dt_target, tn - t)
        pre[n] = pi
        nu_left = _rate(nu_path, np.nextafter(tn, -np.inf)) if callable(nu_path) else float(nu_path)
        pi = jump_update(spec, tn, pi, nu_left, int(log.marks[n]))
        post[n] = pi
        t = tn
    pi = _propagate_array(spec, pi, t, nu_path, dt_target, horizon - t)
    return FilterTrace(log.times.copy(), pre, post, initial, FilterState(pi, horizon))


def zakai_event_log(spec: ModelSpec, log: EventLog, nu_path: RatePath = 0.0,
                    dt_target: float = DEFAULT_DT, horizon: Optional[float] = None,
                    pi0=None) -> FilterTrace:
    """Same replay as :func:`filter_event_log` through the unnormalized recursion."""
    horizon = spec.T if horizon is None else horizon
    p0 = np.asarray(spec.chain.pi0 if pi0 is None else pi0, dtype=float)
    state = UnnormalizedState(p0, 0.0)
    N = len(log)
    pre = np.empty((N, spec.K))
    post = np.empty((N, spec.K))
    for n in range(N):
        tn = float(log.times[n])
        state = zakai_step(spec, state, nu_path, tn - state.t, None, dt_target)
        pre[n] = normalize(state)
        state = zakai_step(spec, state, nu_path, 0.0, int(log.marks[n]), dt_target)
        post[n] = normalize(state)
    state = zakai_step(spec, state, nu_path, horizon - state.t, None, dt_target)
    return FilterTrace(log.times.copy(), pre, post, FilterState(p0 / p0.sum(), 0.0),
                       FilterState(normalize(state), horizon))
