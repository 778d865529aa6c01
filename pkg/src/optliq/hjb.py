"""Explicit upwind finite-difference solver for the liquidation value function.

The value per unit price ``V(t, w, pi)`` (``pi`` = belief in regime 1) solves,
backward from ``V(T, w, pi) = h(w)``,

    V_t - rho V + sup_nu { nu (1 - f(nu)) - nu V_w + b(pi, nu) V_pi
                           + sum_j lam_j(pi, nu) [(1 + z_j) V(t, w, pi_j^+) - V] } = 0,

where ``b`` is the belief drift, ``lam_j`` the filtered intensity of mark
``j`` and ``pi_j^+`` the Bayes posterior after a jump of that mark.  The scheme
is explicit in time, uses a backward ``w`` difference (selling transports
inventory downward) and sign-upwinded ``pi`` differences, and maximizes the
discrete Hamiltonian over ``nu`` exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from .config import spec_hash
from .errors import DomainError, ModelSpecError, StabilityError
from .model import ModelSpec

F_TABLE_SIZE = 20001
_GOLDEN = 0.5 * (math.sqrt(5.0) - 1.0)


@dataclass(frozen=True)
class Grid:
    """Uniform grid with ``nt``, ``nw``, ``npi`` intervals in ``t``, ``w`` and ``pi``."""

    nt: int = 400
    nw: int = 600
    npi: int = 20

    def __post_init__(self):
        if min(self.nt, self.nw, self.npi) < 1:
            raise ValueError("grid sizes must be positive")

    def w_nodes(self, spec: ModelSpec) -> np.ndarray:
        return np.linspace(0.0, spec.w0, self.nw + 1)

    def pi_nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.npi + 1)


@dataclass
class ValueField:
    """Solved value function and optimal rates on stored time layers.

    ``V``, ``nu_star`` and ``C`` have shape ``(len(t), len(w), len(pi))``
    (or ``(len(t), len(w))`` for the deterministic solver, where ``pi`` is
    None).  ``V`` is the value per unit price.
    """

    t: np.ndarray
    w: np.ndarray
    pi: Optional[np.ndarray]
    V: np.ndarray
    nu_star: np.ndarray
    C: np.ndarray
    dt: float = 0.0
    n_steps: int = 0
    min_weight: float = 1.0
    key: str = ""
    info: dict = field(default_factory=dict)

    @property
    def has_pi(self) -> bool:
        return self.pi is not None

    def value(self, w: float, pi: float = 0.5, t_index: int = 0) -> float:
        """Value per unit price at a stored layer, linearly interpolated in ``w`` and ``pi``."""
        layer = self.V[t_index]
        if not self.has_pi:
            return float(np.interp(w, self.w, layer))
        col = np.array([np.interp(w, self.w, layer[:, k]) for k in range(self.pi.size)])
        return float(np.interp(pi, self.pi, col))

    def to_csv(self, path) -> None:
        """Long-format CSV with columns ``t, w, pi, V, nu_star, C``."""
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["t", "w", "pi", "V", "nu_star", "C"])
            pis = self.pi if self.has_pi else [float("nan")]
            for n, t in enumerate(self.t):
                for i, w in enumerate(self.w):
                    for k, p in enumerate(pis):
                        idx = (n, i, k) if self.has_pi else (n, i)
                        out.writerow([f"{t:.12g}", f"{w:.12g}", "" if not self.has_pi else f"{p:.12g}",
                                      repr(float(self.V[idx])), repr(float(self.nu_star[idx])),
                                      repr(float(self.C[idx]))])

    def save(self, path) -> None:
        np.savez_compressed(
            path, t=self.t, w=self.w, pi=np.array([]) if self.pi is None else self.pi,
            has_pi=self.has_pi, V=self.V, nu_star=self.nu_star, C=self.C,
            scalars=np.array([self.dt, self.n_steps, self.min_weight]), key=self.key,
        )

    @classmethod
    def load(cls, path) -> "ValueField":
        with np.load(path, allow_pickle=False) as d:
            dt, n_steps, min_weight = d["scalars"]
            return cls(t=d["t"], w=d["w"], pi=d["pi"] if bool(d["has_pi"]) else None,
                       V=d["V"], nu_star=d["nu_star"], C=d["C"], dt=float(dt),
                       n_steps=int(n_steps), min_weight=float(min_weight), key=str(d["key"]))


# ---------------------------------------------------------------------------
# rate optimization


@numba.njit(cache=True, error_model="numpy", inline="always")
def _f_eval(nu, kind, c_f, sig, f_tab, nu_max):
    if kind == 0:
        return c_f * nu ** sig if nu > 0.0 else 0.0
    x = nu / nu_max * (f_tab.size - 1)
    i = int(x)
    if i >= f_tab.size - 1:
        return f_tab[f_tab.size - 1]
    r = x - i
    return f_tab[i] * (1.0 - r) + f_tab[i + 1] * r


@numba.njit(cache=True, error_model="numpy")
def _golden(C, lo, hi, c_f, sig, f_tab, nu_max):
    # maximize nu (1 - f(nu)) - nu C over [lo, hi]; endpoints are compared too
    a, b = lo, hi
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    g1 = x1 * (1.0 - _f_eval(x1, 1, c_f, sig, f_tab, nu_max)) - x1 * C
    g2 = x2 * (1.0 - _f_eval(x2, 1, c_f, sig, f_tab, nu_max)) - x2 * C
    for _ in range(100):
        if b - a <= 1e-10 * (1.0 + nu_max):
            break
        if g1 >= g2:
            b, x2, g2 = x2, x1, g1
            x1 = b - _GOLDEN * (b - a)
            g1 = x1 * (1.0 - _f_eval(x1, 1, c_f, sig, f_tab, nu_max)) - x1 * C
        else:
            a, x1, g1 = x1, x2, g2
            x2 = a + _GOLDEN * (b - a)
            g2 = x2 * (1.0 - _f_eval(x2, 1, c_f, sig, f_tab, nu_max)) - x2 * C
    best = 0.5 * (a + b)
    gbest = best * (1.0 - _f_eval(best, 1, c_f, sig, f_tab, nu_max)) - best * C
    for cand in (lo, hi):
        g = cand * (1.0 - _f_eval(cand, 1, c_f, sig, f_tab, nu_max)) - cand * C
        if g > gbest or (g == gbest and cand < best):
            best, gbest = cand, g
    return best


@numba.njit(cache=True, error_model="numpy")
def _rate_on(C, lo, hi, kind, c_f, sig, f_tab, nu_max):
    """Maximizer of ``nu (1 - f(nu)) - nu C`` over ``[lo, hi]``."""
    if kind == 1:
        return _golden(C, lo, hi, c_f, sig, f_tab, nu_max)
    if C >= 1.0:
        nu = 0.0
    elif c_f == 0.0:
        nu = nu_max
    else:
        nu = ((1.0 - C) / (c_f * (sig + 1.0))) ** (1.0 / sig)
        if nu > nu_max:
            nu = nu_max
    if nu < lo:
        nu = lo
    if nu > hi:
        nu = hi
    return nu


def _impact_args(spec: ModelSpec):
    imp = spec.impact
    if imp.is_power:
        return 0, float(imp.c_f), float(imp.sigma_exp), np.zeros(1)
    grid = np.linspace(0.0, spec.nu_max, F_TABLE_SIZE)
    tab = np.array([imp.general_f(x) for x in grid], dtype=float)
    return 1, 0.0, 1.0, tab


def optimal_rate(spec: ModelSpec, C: float) -> float:
    """Rate maximizing ``nu (1 - f(nu)) - nu C`` on ``[0, nu_max]``.

    For the power impact this is zero when ``C >= 1``, ``nu_max`` when there
    is no temporary impact and otherwise the root of
    ``1 - (sigma + 1) c_f nu^sigma = C`` capped at ``nu_max``.  A general
    impact function is maximized by golden-section search.
    """
    kind, c_f, sig, tab = _impact_args(spec)
    return float(_rate_on(float(C), 0.0, spec.nu_max, kind, c_f, sig, tab, spec.nu_max))


# ---------------------------------------------------------------------------
# the scheme


@dataclass
class _Operator:
    """Time-independent pieces of the discrete operator for a two-regime spec."""

    spec: ModelSpec
    grid: Grid
    w: np.ndarray
    P: np.ndarray
    dw: float
    dpi: float
    q11: float
    q21: float
    lam1: np.ndarray
    lam2: np.ndarray
    a: np.ndarray
    z: np.ndarray
    post_idx: np.ndarray
    post_wt: np.ndarray
    f_kind: int
    c_f: float
    sig: float
    f_tab: np.ndarray

    def multiplier(self, t: float) -> float:
        return self.spec.jumps.multiplier(min(max(t, 0.0), self.spec.T))


def _two_regime_rates(spec: ModelSpec):
    js = spec.jumps
    if spec.K == 1:
        lam = js.base_intensity[0]
        return 0.0, 0.0, lam.copy(), lam.copy()
    if spec.K != 2:
        raise ModelSpecError("the finite-difference solver handles one or two regimes only")
    Q = spec.chain.Q
    return float(Q[0, 0]), float(Q[1, 0]), js.base_intensity[0].copy(), js.base_intensity[1].copy()


def _build_operator(spec: ModelSpec, grid: Grid) -> _Operator:
    q11, q21, lam1, lam2 = _two_regime_rates(spec)
    P = grid.pi_nodes()
    dpi = 1.0 / grid.npi
    J = lam1.size
    post_idx = np.zeros((J, P.size), dtype=np.int64)
    post_wt = np.zeros((J, P.size))
    for j in range(J):
        den = P * lam1[j] + (1.0 - P) * lam2[j]
        with np.errstate(invalid="ignore", divide="ignore"):
            post = np.where(den > 0, P * lam1[j] / den, P)
        post = np.clip(post, 0.0, 1.0)
        x = post / dpi
        idx = np.minimum(np.floor(x).astype(np.int64), grid.npi - 1)
        post_idx[j] = idx
        post_wt[j] = np.clip(x - idx, 0.0, 1.0)
    kind, c_f, sig, tab = _impact_args(spec)
    return _Operator(
        spec=spec, grid=grid, w=grid.w_nodes(spec), P=P, dw=spec.w0 / grid.nw, dpi=dpi,
        q11=q11, q21=q21, lam1=lam1, lam2=lam2,
        a=spec.jumps.impact_coefficient.copy(), z=spec.jumps.support.copy(),
        post_idx=post_idx, post_wt=post_wt, f_kind=kind, c_f=c_f, sig=sig, f_tab=tab,
    )


@numba.njit(cache=True, error_model="numpy")
def _node(V, i, k, m, dw, dpi, P, nu_max, rho, q11, q21, lam1, lam2, a, z,
          post_idx, post_wt, kind, c_f, sig, f_tab):
    """Discrete Hamiltonian maximization at one node.

    Returns (H, nu, C, self_rate) where ``self_rate`` is the total explicit
    rate on ``V[i, k]`` at the chosen ``nu`` (stability needs dt * self_rate <= 1).
    """
    npi = P.size - 1
    v = V[i, k]
    Dw = (v - V[i - 1, k]) / dw
    Dpf = (V[i, k + 1] - v) / dpi if k < npi else 0.0
    Dpb = (v - V[i, k - 1]) / dpi if k > 0 else 0.0
    p = P[k]
    pq = p * (1.0 - p) * m
    b0 = q11 * p + q21 * (1.0 - p)
    b1 = 0.0
    J0 = 0.0
    J1 = 0.0
    for j in range(z.size):
        b0 += pq * (lam2[j] - lam1[j])
        b1 += pq * a[j] * (lam2[j] - lam1[j])
        lb = m * (p * lam1[j] + (1.0 - p) * lam2[j])
        if lb == 0.0:
            continue
        ix = post_idx[j, k]
        wt = post_wt[j, k]
        vp = V[i, ix] * (1.0 - wt) + V[i, ix + 1] * wt
        d = (1.0 + z[j]) * vp - v
        J0 += lb * d
        J1 += lb * a[j] * d

    # pieces of [0, nu_max] on which the belief drift keeps its sign
    lo0, hi0, lo1, hi1 = 0.0, nu_max, 0.0, -1.0
    if b1 != 0.0:
        ns = -b0 / b1
        if 0.0 < ns < nu_max:
            hi0, lo1, hi1 = ns, ns, nu_max

    best_H = -np.inf
    best_nu = 0.0
    best_C = 0.0
    for piece in range(2):
        lo = lo0 if piece == 0 else lo1
        hi = hi0 if piece == 0 else hi1
        if hi < lo:
            continue
        bmid = b0 + b1 * 0.5 * (lo + hi)
        D = Dpf if bmid >= 0.0 else Dpb
        C = Dw - b1 * D - J1
        nu = _rate_on(C, lo, hi, kind, c_f, sig, f_tab, nu_max)
        b = b0 + b1 * nu
        drift_term = b * Dpf if b >= 0.0 else b * Dpb
        fval = _f_eval(nu, kind, c_f, sig, f_tab, nu_max)
        H = -rho * v + nu * (1.0 - fval) - nu * Dw + drift_term + J0 + nu * J1
        if piece == 0 or H > best_H + 1e-13 * abs(best_H):
            best_H, best_nu, best_C = H, nu, C

    b = b0 + b1 * best_nu
    self_rate = rho + best_nu / dw + abs(b) / dpi
    for j in range(z.size):
        lb = m * (p * lam1[j] + (1.0 - p) * lam2[j]) * (1.0 + a[j] * best_nu)
        if lb == 0.0:
            continue
        ix = post_idx[j, k]
        wt = post_wt[j, k]
        wself = 0.0
        if ix == k:
            wself += 1.0 - wt
        if ix + 1 == k:
            wself += wt
        self_rate += lb * (1.0 - (1.0 + z[j]) * wself)
    return best_H, best_nu, best_C, self_rate


@numba.njit(cache=True, error_model="numpy")
def _layer(V, m, dt, dw, dpi, P, nu_max, rho, q11, q21, lam1, lam2, a, z,
           post_idx, post_wt, kind, c_f, sig, f_tab, V_out, nu_out, C_out, do_step):
    """Evaluate the Hamiltonian at every node; optionally write the next layer.

    Returns the smallest explicit self weight ``1 - dt * self_rate`` and its node.
    """
    nw1, np1 = V.shape
    min_w = np.inf
    min_i = -1
    min_k = -1
    for k in range(np1):
        V_out[0, k] = V[0, k]
        nu_out[0, k] = 0.0
        C_out[0, k] = 0.0
    for i in range(1, nw1):
        for k in range(np1):
            H, nu, C, sr = _node(V, i, k, m, dw, dpi, P, nu_max, rho, q11, q21, lam1, lam2,
                                 a, z, post_idx, post_wt, kind, c_f, sig, f_tab)
            nu_out[i, k] = nu
            C_out[i, k] = C
            if do_step:
                V_out[i, k] = V[i, k] + dt * H
                wself = 1.0 - dt * sr
                if wself < min_w:
                    min_w, min_i, min_k = wself, i, k
    return min_w, min_i, min_k


def _run_layer(op: _Operator, V: np.ndarray, t: float, dt: float, do_step: bool = True):
    V = np.ascontiguousarray(V, dtype=float)
    V_out = np.empty_like(V)
    nu_out = np.empty_like(V)
    C_out = np.empty_like(V)
    res = _layer(V, op.multiplier(t), dt, op.dw, op.dpi, op.P, op.spec.nu_max, op.spec.rho,
                 op.q11, op.q21, op.lam1, op.lam2, op.a, op.z, op.post_idx, op.post_wt,
                 op.f_kind, op.c_f, op.sig, op.f_tab, V_out, nu_out, C_out, do_step)
    return V_out, nu_out, C_out, res


def _multiplier_range(spec: ModelSpec):
    if spec.jumps.time_multiplier is None:
        return (1.0,)
    ts = np.linspace(0.0, spec.T, 2001)
    ms = [spec.jumps.multiplier(t) for t in ts]
    return (min(ms), spec.multiplier_bound())


def stable_dt(spec: ModelSpec, grid: Grid, cfl: str = "sharp") -> float:
    """Largest time step keeping every explicit stencil weight nonnegative.

    ``sharp`` bounds the actual self coefficient of each node (the rate out of
    the node minus the part of the jump term that lands back on it) at
    ``nu = 0`` and ``nu = nu_max``; the coefficient is concave in ``nu`` so the
    endpoints suffice.  ``conservative`` uses the cruder sum
    ``rho + nu_max/dw + max|b|/dpi + max total intensity``.
    """
    op = _build_operator(spec, grid)
    P = op.P
    worst = 0.0
    for m in _multiplier_range(spec):
        b0 = op.q11 * P + op.q21 * (1 - P) + P * (1 - P) * m * (op.lam2 - op.lam1).sum()
        b1 = P * (1 - P) * m * (op.a * (op.lam2 - op.lam1)).sum()
        for nu in (0.0, spec.nu_max):
            b = np.abs(b0 + b1 * nu)
            lam = m * (np.outer(P, op.lam1) + np.outer(1 - P, op.lam2)) * (1 + op.a * nu)   # nodes x J
            if cfl == "conservative":
                bmax = (np.abs(b0) + np.abs(b1) * spec.nu_max).max()
                lam_max = (m * (np.outer(P, op.lam1) + np.outer(1 - P, op.lam2))
                           * (1 + op.a * spec.nu_max)).sum(axis=1).max()
                worst = max(worst, spec.rho + spec.nu_max / op.dw + bmax / op.dpi + lam_max)
                continue
            ks = np.arange(P.size)
            wself = np.where(op.post_idx == ks, 1 - op.post_wt, 0.0) + np.where(op.post_idx + 1 == ks,
                                                                                  op.post_wt, 0.0)   # J x nodes
            jump = (lam * (1 - (1 + op.z) * wself.T)).sum(axis=1)
            rate = spec.rho + nu / op.dw + b / op.dpi + jump
            worst = max(worst, float(rate.max()))
    return 1.0 / worst if worst > 0 else np.inf


def _terminal_layer(spec: ModelSpec, w: np.ndarray, n_pi: int) -> np.ndarray:
    h = np.asarray(spec.terminal(w), dtype=float)
    h = np.where(w == 0.0, 0.0, h)
    return np.repeat(h[:, None], n_pi, axis=1)


def step(spec: ModelSpec, grid: Grid, V_layer, t_index: int, dt: Optional[float] = None):
    """One explicit step from the layer at ``t = t_index * dt`` to ``t - dt``.

    Returns ``(V_next_layer, nu_layer)``.  Raises :class:`StabilityError` if
    any node's explicit self weight would be negative.
    """
    dt = spec.T / grid.nt if dt is None else dt
    op = _build_operator(spec, grid)
    V_out, nu_out, _, (min_w, i, k) = _run_layer(op, V_layer, t_index * dt, dt)
    if min_w < -1e-12:
        raise StabilityError(
            f"negative stencil weight {min_w:.3g} at w={op.w[i]:g}, pi={op.P[k]:g}; reduce dt below "
            f"{stable_dt(spec, grid):.4g}"
        )
    return V_out, nu_out


def marginal_cost(spec: ModelSpec, grid: Grid, V_layer, t_index: int, w_index: int, pi_index: int,
                  dt: Optional[float] = None) -> float:
    """Marginal cost of selling faster at one node of a layer.

    This is the threshold compared with 1 in the rate choice: the backward
    ``w`` difference, the belief-drift sensitivity to ``nu`` times the
    upwinded ``pi`` difference, and the impact-induced change in expected
    jump losses.  The upwind direction is the one active at the chosen rate.
    """
    dt = spec.T / grid.nt if dt is None else dt
    if w_index == 0:
        return 0.0
    op = _build_operator(spec, grid)
    V = np.ascontiguousarray(V_layer, dtype=float)
    _, _, C, _ = _node(V, w_index, pi_index, op.multiplier(t_index * dt), op.dw, op.dpi, op.P,
                       spec.nu_max, spec.rho, op.q11, op.q21, op.lam1, op.lam2, op.a, op.z,
                       op.post_idx, op.post_wt, op.f_kind, op.c_f, op.sig, op.f_tab)
    return float(C)


def _stored_indices(n_eff: int, nt: int) -> np.ndarray:
    return np.unique(np.round(np.linspace(0, n_eff, nt + 1)).astype(np.int64))


def _n_steps(spec: ModelSpec, grid: Grid, cfl: str, dt_max: Optional[float]) -> int:
    n = grid.nt
    dts = stable_dt(spec, grid, cfl)
    if np.isfinite(dts):
        n = max(n, int(math.ceil(spec.T / dts * (1 + 1e-12))))
    if dt_max is not None:
        n = max(n, int(math.ceil(spec.T / dt_max * (1 - 1e-12))))
    return n


def solve(spec: ModelSpec, grid: Optional[Grid] = None, *, cfl: str = "sharp",
          dt_max: Optional[float] = None) -> ValueField:
    """Sweep backward from the terminal layer to ``t = 0``.

    The number of time steps is raised above ``grid.nt`` when needed for
    stability (and to honor ``dt_max``); about ``grid.nt + 1`` evenly spaced
    layers are kept.  Single-regime specs are solved as two identical regimes
    with a frozen belief.
    """
    grid = grid or Grid()
    op = _build_operator(spec, grid)
    n_eff = _n_steps(spec, grid, cfl, dt_max)
    dt = spec.T / n_eff
    keep = _stored_indices(n_eff, grid.nt)
    slot = {int(n): s for s, n in enumerate(keep)}
    shape = (keep.size, op.w.size, op.P.size)
    V_all = np.empty(shape)
    nu_all = np.empty(shape)
    C_all = np.empty(shape)

    V = _terminal_layer(spec, op.w, op.P.size)
    min_weight = np.inf
    for n in range(n_eff, 0, -1):
        t = n * dt
        V_next, nu, C, (mw, i, k) = _run_layer(op, V, t, dt)
        if mw < min_weight:
            min_weight = mw
        if mw < -1e-12:
            raise StabilityError(
                f"negative stencil weight {mw:.3g} at t={t:g}, w={op.w[i]:g}, pi={op.P[k]:g}"
            )
        if n in slot:
            s = slot[n]
            V_all[s], nu_all[s], C_all[s] = V, nu, C
        V = V_next
    _, nu, C, _ = _run_layer(op, V, 0.0, dt, do_step=False)
    V_all[0], nu_all[0], C_all[0] = V, nu, C

    if not np.all(np.isfinite(V_all)):
        raise StabilityError("value function is not finite")
    return ValueField(
        t=keep * dt, w=op.w, pi=op.P, V=V_all, nu_star=nu_all, C=C_all, dt=dt, n_steps=n_eff,
        min_weight=float(min_weight), key=spec_hash(spec, grid, cfl, dt_max),
    )


def solve_deterministic(spec: ModelSpec, grid: Optional[Grid] = None, *, cfl: str = "sharp",
                        dt_max: Optional[float] = None) -> ValueField:
    """Solve the single-regime problem, where the price drift is deterministic.

    Same explicit scheme as :func:`solve` with the belief dimension removed:
    the jump term reduces to ``sum_j lam_j(nu) z_j V``.
    """
    if spec.K != 1:
        raise ModelSpecError("solve_deterministic needs a single-regime spec")
    grid = grid or Grid()
    js = spec.jumps
    lam = js.base_intensity[0]
    a, z = js.impact_coefficient, js.support
    w = grid.w_nodes(spec)
    dw = spec.w0 / grid.nw
    kind, c_f, sig, tab = _impact_args(spec)

    worst = 0.0
    for m in _multiplier_range(spec):
        for nu in (0.0, spec.nu_max):
            jump = (m * lam * (1 + a * nu) * (1 - (1 + z))).sum()
            if cfl == "conservative":
                jump = (m * lam * (1 + a * spec.nu_max)).sum()
                nu = spec.nu_max
            worst = max(worst, spec.rho + nu / dw + jump)
    n_eff = grid.nt if worst <= 0 else max(grid.nt, int(math.ceil(spec.T * worst * (1 + 1e-12))))
    if dt_max is not None:
        n_eff = max(n_eff, int(math.ceil(spec.T / dt_max * (1 - 1e-12))))
    dt = spec.T / n_eff
    keep = _stored_indices(n_eff, grid.nt)
    slot = {int(n): s for s, n in enumerate(keep)}
    V_all = np.empty((keep.size, w.size))
    nu_all = np.empty_like(V_all)
    C_all = np.empty_like(V_all)

    V = _terminal_layer(spec, w, 1)[:, 0]
    min_weight = np.inf
    for n in range(n_eff, -1, -1):
        m = spec.jumps.multiplier(n * dt)
        V_next, nu, C, mw = _deterministic_layer(V, m, dt, dw, spec.nu_max, spec.rho, lam, a, z,
                                                 kind, c_f, sig, tab)
        if n > 0:
            min_weight = min(min_weight, mw)
            if mw < -1e-12:
                raise StabilityError(f"negative stencil weight {mw:.3g} at t={n * dt:g}")
        if n in slot:
            s = slot[n]
            V_all[s], nu_all[s], C_all[s] = V, nu, C
        if n > 0:
            V = V_next
    return ValueField(
        t=keep * dt, w=w, pi=None, V=V_all, nu_star=nu_all, C=C_all, dt=dt, n_steps=n_eff,
        min_weight=float(min_weight), key=spec_hash(spec, grid, cfl, dt_max, "deterministic"),
    )


@numba.njit(cache=True, error_model="numpy")
def _deterministic_layer(V, m, dt, dw, nu_max, rho, lam, a, z, kind, c_f, sig, f_tab):
    n = V.size
    V_out = np.empty(n)
    nu_out = np.zeros(n)
    C_out = np.zeros(n)
    V_out[0] = V[0]
    min_w = np.inf
    for i in range(1, n):
        v = V[i]
        Dw = (v - V[i - 1]) / dw
        J0 = 0.0
        J1 = 0.0
        for j in range(z.size):
            lb = m * lam[j]
            if lb == 0.0:
                continue
            d = (1.0 + z[j]) * v - v
            J0 += lb * d
            J1 += lb * a[j] * d
        C = Dw - 0.0 * 0.0 - J1
        nu = _rate_on(C, 0.0, nu_max, kind, c_f, sig, f_tab, nu_max)
        fval = _f_eval(nu, kind, c_f, sig, f_tab, nu_max)
        H = -rho * v + nu * (1.0 - fval) - nu * Dw + 0.0 + J0 + nu * J1
        V_out[i] = v + dt * H
        nu_out[i] = nu
        C_out[i] = C
        sr = rho + nu / dw
        for j in range(z.size):
            lb = m * lam[j] * (1.0 + a[j] * nu)
            if lb == 0.0:
                continue
            sr += lb * (1.0 - (1.0 + z[j]))
        wself = 1.0 - dt * sr
        if wself < min_w:
            min_w = wself
    return V_out, nu_out, C_out, min_w


def closed_form_oracle(theta: float, c_up: float, c_down: float, a: float, nu_max: float,
                       T: float, t, w):
    """Value of selling at full speed in the single-regime up/down tick model.

    With ``c_up < c_down``, no discounting, no temporary impact and zero
    terminal value, selling at ``nu_max`` until the inventory is gone (or
    the horizon is reached) is optimal and earns
    ``nu_max / eta * (exp(eta * min(w / nu_max, T - t)) - 1)`` per unit price,
    where ``eta = theta * (c_up - c_down * (1 + a * nu_max)) < 0``.
    """
    if not c_up < c_down:
        raise DomainError("closed form needs c_up < c_down")
    if nu_max <= 0 or theta <= 0 or a < 0 or T <= 0:
        raise DomainError("need positive theta, nu_max, T and a >= 0")
    t = np.asarray(t, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(t < 0) or np.any(t > T) or np.any(w < 0):
        raise DomainError("need 0 <= t <= T and w >= 0")
    eta = theta * (c_up - c_down * (1.0 + a * nu_max))
    tau = np.minimum(w / nu_max, T - t)
    out = nu_max / eta * np.expm1(eta * tau)
    return float(out) if out.ndim == 0 else out


def oracle_error(field_: ValueField, spec: ModelSpec) -> float:
    """Sup-norm error of a solved counterexample field relative to the sup of the oracle."""
    js = spec.jumps
    up = int(np.argmax(js.support))
    down = int(np.argmin(js.support))
    theta = float(js.support[up])
    lam = js.base_intensity[0]
    tt, ww = np.meshgrid(field_.t, field_.w, indexing="ij")
    exact = closed_form_oracle(theta, lam[up], lam[down], float(js.impact_coefficient[down]),
                               spec.nu_max, spec.T, np.clip(tt, 0, spec.T), ww)
    V = field_.V if not field_.has_pi else field_.V[..., 0]
    return float(np.abs(V - exact).max() / np.abs(exact).max())


def cached_solve(spec: ModelSpec, grid: Grid, cache_dir, deterministic: bool = False, **kw) -> ValueField:
    """Solve, reusing a binary cache keyed by a hash of the spec and grid."""
    key = spec_hash(spec, grid, kw.get("cfl", "sharp"), kw.get("dt_max"),
                    *(("deterministic",) if deterministic else ()))
    path = Path(cache_dir) / f"value_{key[:16]}.npz"
    if path.exists():
        vf = ValueField.load(path)
        if vf.key == key:
            return vf
    vf = (solve_deterministic if deterministic else solve)(spec, grid, **kw)
    path.parent.mkdir(parents=True, exist_ok=True)
    vf.save(path)
    return vf
