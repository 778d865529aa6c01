"""Maximum-likelihood calibration of regime intensities from event data.

Without trading the observed jumps form a Markov-modulated marked Poisson
process.  The EM iteration below runs a continuous-time forward-backward
pass: between events the unnormalized filter evolves by the flow of
``G = Q - diag(total intensity)``, at events it is multiplied by the mark
intensities.  Expected occupation times and transition counts over each gap
are integrals of products of forward and backward flows, evaluated in closed
form through an eigendecomposition of ``G``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numba
import numpy as np
from scipy.linalg import expm

from .errors import EstimationError
from .filter import EventLog, scaled_forward
from .model import ChainSpec, JumpSpec, ModelSpec


@dataclass(frozen=True)
class EmInit:
    """Explicit starting point: generator, initial law and ``K x J`` intensities."""

    Q: np.ndarray
    pi0: np.ndarray
    base_intensity: np.ndarray


@dataclass
class EmConfig:
    """EM settings.

    Attributes:
        n_states: number of regimes ``K`` (used by the moment start).
        max_iters: iteration cap.
        tol: stop when the relative log-likelihood gain falls below this.
        init: ``"moment"`` or an :class:`EmInit`.
        fix_generator: keep ``Q`` at its starting value.
        spread: relative split of the pooled rates used by the moment start.
        switch_rate: total leaving rate of each regime in the moment start (per day).
    """

    n_states: int = 2
    max_iters: int = 500
    tol: float = 1e-9
    init: Union[str, EmInit] = "moment"
    fix_generator: bool = False
    spread: float = 0.1
    switch_rate: float = 4.0

    def __post_init__(self):
        if self.max_iters < 1 or not self.tol > 0 or self.n_states < 1:
            raise ValueError("need max_iters >= 1, tol > 0 and at least one state")


@dataclass
class EmResult:
    """Fitted parameters with diagnostics.

    ``smoothed[n]`` and ``filtered[n]`` are the regime probabilities at the
    ``n``-th event given all data and given data up to that event.
    """

    Q: np.ndarray
    pi0: np.ndarray
    base_intensity: np.ndarray
    support: np.ndarray
    loglik_trace: np.ndarray
    smoothed: np.ndarray
    filtered: np.ndarray
    n_iter: int
    converged: bool
    horizon: float
    held_states: Tuple[int, ...] = ()
    y_hat: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def chain(self) -> ChainSpec:
        return ChainSpec(Q=self.Q, pi0=self.pi0)

    def jump_spec(self, impact_coefficient=None) -> JumpSpec:
        a = np.zeros(self.support.size) if impact_coefficient is None else impact_coefficient
        return JumpSpec(support=self.support, base_intensity=self.base_intensity, impact_coefficient=a)

    def to_spec(self, template: ModelSpec) -> ModelSpec:
        """Template spec with the fitted chain and intensities (impact coefficients kept)."""
        return template.replace(chain=self.chain,
                                jumps=self.jump_spec(template.jumps.impact_coefficient))


def moment_init(log: EventLog, horizon: float, support, config: EmConfig) -> EmInit:
    """Pooled rates split around their mean, with a symmetric generator.

    Regime ``k`` scales the rate of upward marks by a factor falling
    linearly from ``1 + spread`` to ``1 - spread`` across regimes and the rate
    of downward marks the opposite way, so regime 1 starts as the good one.
    """
    z = np.asarray(support, dtype=float)
    K = config.n_states
    pooled = log.counts(z.size) / horizon
    if K == 1:
        return EmInit(np.zeros((1, 1)), np.ones(1), pooled[None, :].astype(float))
    tilt = np.linspace(config.spread, -config.spread, K)
    lam = pooled[None, :] * (1.0 + np.outer(tilt, np.sign(z)))
    off = config.switch_rate / (K - 1)
    Q = np.full((K, K), off)
    np.fill_diagonal(Q, -config.switch_rate)
    return EmInit(Q, np.full(K, 1.0 / K), lam)


@numba.njit(cache=True, error_model="numpy")
def _scaled_backward(E, lam, marks, c):
    # b[n] is the scaled backward vector just after event n; b[N] = 1 at the horizon
    N = marks.size
    K = lam.shape[0]
    b = np.empty((N + 1, K))
    for k in range(K):
        b[N, k] = 1.0
    for n in range(N, 0, -1):
        # gap n ends at event n (or at the horizon when n == N)
        for k in range(K):
            s = 0.0
            for l in range(K):
                v = b[n, l]
                if n < N:
                    v *= lam[l, marks[n]]
                s += E[n, k, l] * v
            b[n - 1, k] = s / c[n]
    return b


def _flows(G: np.ndarray, gaps: np.ndarray):
    """Flows ``exp(G * gap)`` and the eigen data used for gap integrals (None if ill-conditioned)."""
    d, U = np.linalg.eig(G)
    Uinv = None
    if np.linalg.cond(U) < 1e8:
        Uinv = np.linalg.inv(U)
        E = np.einsum("ak,nk,kb->nab", U, np.exp(np.outer(gaps, d)), Uinv).real
        return np.ascontiguousarray(E), (d, U, Uinv)
    E = np.stack([expm(G * g) for g in gaps])
    return np.ascontiguousarray(E), None


def _gap_integrals(eig, G, gaps, start, end) -> np.ndarray:
    """``I[k, l] = sum_n int_0^gap_n (start_n e^{Gs})_k (e^{G(gap_n - s)} end_n)_l ds``."""
    K = G.shape[0]
    if eig is not None:
        d, U, Uinv = eig
        x = start @ U                       # N x K
        y = end @ Uinv.T                    # N x K
        da = d[:, None]
        db = d[None, :]
        diff = da - db                      # K x K
        g = gaps[:, None, None]
        same = np.abs(diff) * gaps.max(initial=0.0) < 1e-12
        safe = np.where(same, 1.0, diff)
        # write each term so the exponent inside expm1 has nonpositive real part
        pos = diff.real > 0
        lead = np.where(pos, da, db)
        tail = np.where(pos, -diff, diff)
        with np.errstate(over="ignore", invalid="ignore"):
            phi = np.exp(lead * g) * np.expm1(tail * g) / np.where(pos, -safe, safe)
            phi = np.where(same, g * np.exp(da * g), phi)
        W = np.einsum("na,nb,nab->ab", x, y, phi)
        return (Uinv.T @ W @ U.T).real
    # fallback: block-triangular matrix exponential per gap and entry
    out = np.zeros((K, K))
    A = np.zeros((2 * K, 2 * K))
    A[:K, :K] = G
    A[K:, K:] = G
    for k in range(K):
        for l in range(K):
            A[:K, K:] = 0.0
            A[k, K + l] = 1.0
            for s_vec, e_vec, gap in zip(start, end, gaps):
                out[k, l] += s_vec @ expm(A * gap)[:K, K:] @ e_vec
    return out


def _e_step(Q, pi0, lam, times, marks, horizon):
    K = lam.shape[0]
    gaps = np.diff(np.concatenate(([0.0], times, [horizon])))
    G = Q - np.diag(lam.sum(axis=1))
    E, eig = _flows(G, gaps)
    alphas, c = scaled_forward(E, lam, marks, pi0.astype(float))
    if np.any(c <= 0) or not np.all(np.isfinite(c)):
        raise EstimationError("likelihood vanished; the starting point is incompatible with the data")
    loglik = float(np.log(c).sum())
    b = _scaled_backward(E, lam, marks, c)
    N = marks.size
    smoothed = alphas[:N] * b[:N]
    # forward vector at the start of each gap and backward vector at its end
    start = np.vstack([pi0[None, :], alphas[:N]])
    end = np.empty((N + 1, K))
    end[:N] = lam[:, marks].T * b[:N] / c[:N, None]
    end[N] = b[N] / c[N]
    I = _gap_integrals(eig, G, gaps, start, end)
    return loglik, smoothed, alphas[:N], I


def em_fit(log: EventLog, horizon: float, config: Optional[EmConfig] = None,
           support=(0.001, -0.001)) -> EmResult:
    """Fit chain generator and per-regime mark intensities by EM.

    Regimes are reported in decreasing order of the intensity of the largest
    upward mark.  A regime whose expected occupation time vanishes keeps its
    starting rates (with a warning).
    """
    config = config or EmConfig()
    z = np.asarray(support, dtype=float)
    if len(log) == 0:
        raise EstimationError("event log is empty")
    if horizon <= 0 or log.times[-1] > horizon:
        raise EstimationError("events must lie within (0, horizon]")
    if np.any(log.marks >= z.size):
        raise EstimationError("event log uses marks outside the support")

    if isinstance(config.init, str):
        if config.init != "moment":
            raise ValueError(f"unknown init {config.init!r}")
        init = moment_init(log, horizon, z, config)
    else:
        init = config.init
    Q = np.array(init.Q, dtype=float)
    pi0 = np.array(init.pi0, dtype=float)
    lam = np.array(init.base_intensity, dtype=float)
    K = lam.shape[0]
    times = np.ascontiguousarray(log.times, dtype=float)
    marks = np.ascontiguousarray(log.marks, dtype=np.int64)

    trace = []
    held = set()
    converged = False
    n_iter = 0
    for it in range(config.max_iters):
        loglik, smoothed, filtered, I = _e_step(Q, pi0, lam, times, marks, horizon)
        trace.append(loglik)
        if it > 0 and abs(trace[-1] - trace[-2]) <= config.tol * abs(trace[-2]):
            converged = True
            break
        n_iter = it + 1
        occ = np.diag(I).copy()
        counts = np.zeros_like(lam)
        for j in range(z.size):
            counts[:, j] = smoothed[marks == j].sum(axis=0)
        new_lam = lam.copy()
        new_Q = Q.copy()
        for k in range(K):
            if occ[k] <= 1e-10 * horizon:
                if k not in held:
                    warnings.warn(f"regime {k + 1} has no expected occupation; holding its rates", stacklevel=2)
                held.add(k)
                continue
            new_lam[k] = counts[k] / occ[k]
            if not config.fix_generator and K > 1:
                row = Q[k] * I[k] / occ[k]
                row[k] = 0.0
                row[k] = -row.sum()
                new_Q[k] = row
        lam, Q = new_lam, new_Q

    loglik, smoothed, filtered, _ = _e_step(Q, pi0, lam, times, marks, horizon)
    if not converged:
        trace.append(loglik)

    order = np.argsort(-lam[:, int(np.argmax(z))], kind="stable")
    lam, Q, pi0 = lam[order], Q[np.ix_(order, order)], pi0[order]
    smoothed, filtered = smoothed[:, order], filtered[:, order]
    held_sorted = tuple(int(np.flatnonzero(order == k)[0]) for k in sorted(held))
    res = EmResult(Q=Q, pi0=pi0, base_intensity=lam, support=z, loglik_trace=np.array(trace),
                   smoothed=smoothed, filtered=filtered, n_iter=n_iter, converged=converged,
                   horizon=float(horizon), held_states=held_sorted)
    res.y_hat = filtered @ np.arange(1, K + 1)
    return res


def y_hat_path(result: EmResult, log: EventLog) -> Tuple[np.ndarray, np.ndarray]:
    """Filtered regime estimate ``sum_k k * pi_k`` just after each event, using fitted parameters."""
    K = result.base_intensity.shape[0]
    if len(log) == 0:
        return np.zeros(0), np.zeros(0)
    horizon = max(result.horizon, float(log.times[-1]))
    times = np.ascontiguousarray(log.times, dtype=float)
    marks = np.ascontiguousarray(log.marks, dtype=np.int64)
    gaps = np.diff(np.concatenate(([0.0], times, [horizon])))
    G = result.Q - np.diag(result.base_intensity.sum(axis=1))
    E, _ = _flows(G, gaps)
    alphas, _ = scaled_forward(E, result.base_intensity, marks, result.pi0.astype(float))
    return times.copy(), alphas[:len(log)] @ np.arange(1, K + 1)


def simulate_event_log(spec: ModelSpec, horizon: float, seed: int):
    """Simulate jumps without trading; returns the log and the hidden regime path.

    The regime path is given as ``(switch_times, states)`` with ``states[0]``
    the initial regime (0-based) and ``states[i]`` the regime after
    ``switch_times[i - 1]``.
    """
    from .simulator import JUMP, Policy, simulate_path

    s = spec.replace(T=float(horizon), w0=min(spec.w0, spec.nu_max * horizon))
    rec = simulate_path(s, Policy.constant(0.0), seed)
    sw = rec.kinds != JUMP
    states = np.concatenate(([rec.initial_state], rec.labels[sw]))
    return rec.jump_log(), (rec.times[sw], states)
