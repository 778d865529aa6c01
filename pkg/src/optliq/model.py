"""Market model primitives.

A hidden continuous-time Markov chain modulates the intensities of a
finite-mark pure-jump bid price; selling at rate ``nu`` scales the intensity
of mark ``j`` by ``(1 + a_j * nu)`` (permanent impact) and costs a fraction
``f(nu)`` of the proceeds (temporary impact).  Time is measured in days.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, ModelSpecError

_TOL = 1e-12


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        raise ModelSpecError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ChainSpec:
    """Hidden regime chain: generator ``Q`` (per day) and initial law ``pi0``."""

    Q: np.ndarray
    pi0: np.ndarray

    def __post_init__(self):
        Q = _frozen_array(self.Q, 2, "Q")
        pi0 = _frozen_array(self.pi0, 1, "pi0")
        K = pi0.size
        if K < 1 or Q.shape != (K, K):
            raise ModelSpecError(f"generator shape {Q.shape} does not match pi0 of length {K}")
        off = Q[~np.eye(K, dtype=bool)]
        if np.any(off < 0):
            raise ModelSpecError("off-diagonal generator entries must be >= 0")
        if np.any(np.abs(Q.sum(axis=1)) > _TOL * max(1.0, np.abs(Q).max())):
            raise ModelSpecError("generator rows must sum to 0")
        if np.any(pi0 < 0) or abs(pi0.sum() - 1.0) > _TOL:
            raise ModelSpecError("pi0 must be a probability vector")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "pi0", pi0)

    @property
    def K(self) -> int:
        return self.pi0.size

    def stationary(self) -> np.ndarray:
        """Stationary distribution (least-squares solution of ``p Q = 0, sum p = 1``)."""
        K = self.K
        A = np.vstack([self.Q.T, np.ones(K)])
        b = np.zeros(K + 1)
        b[-1] = 1.0
        p, *_ = np.linalg.lstsq(A, b, rcond=None)
        p = np.clip(p, 0.0, None)
        return p / p.sum()


@dataclass(frozen=True)
class JumpSpec:
    """Finite-mark jump measure.

    Attributes:
        support: jump sizes ``z_j`` of the return process, each > -1.
        base_intensity: ``K x J`` rates ``lambda_{k,j}`` (events per day).
        impact_coefficient: per-mark ``a_j >= 0``; intensity is scaled by ``1 + a_j nu``.
        time_multiplier: optional positive seasonality factor ``m(t)``.
        multiplier_bound: upper bound of ``m`` on ``[0, T]``; estimated on a
            grid when omitted.
    """

    support: np.ndarray
    base_intensity: np.ndarray
    impact_coefficient: np.ndarray
    time_multiplier: Optional[Callable[[float], float]] = None
    multiplier_bound: Optional[float] = None

    def __post_init__(self):
        z = _frozen_array(self.support, 1, "support")
        lam = _frozen_array(self.base_intensity, 2, "base_intensity")
        a = _frozen_array(self.impact_coefficient, 1, "impact_coefficient")
        J = z.size
        if lam.shape[1] != J or a.size != J:
            raise ModelSpecError("base_intensity columns and impact_coefficient must match the support")
        if np.unique(z).size != J:
            raise ModelSpecError("jump sizes must be distinct")
        if np.any(z <= -1.0):
            raise ModelSpecError("every jump size must exceed -1 to keep the price positive")
        if np.any(lam < 0) or np.any(a < 0):
            raise ModelSpecError("intensities and impact coefficients must be nonnegative")
        pos = lam > 0
        if np.any(pos.any(axis=0) & ~pos.all(axis=0)):
            raise ModelSpecError(
                "for each mark the intensity must be positive in all states or zero in all states"
            )
        if self.multiplier_bound is not None and self.multiplier_bound <= 0:
            raise ModelSpecError("multiplier_bound must be positive")
        object.__setattr__(self, "support", z)
        object.__setattr__(self, "base_intensity", lam)
        object.__setattr__(self, "impact_coefficient", a)

    @property
    def K(self) -> int:
        return self.base_intensity.shape[0]

    @property
    def J(self) -> int:
        return self.support.size

    def multiplier(self, t: float) -> float:
        if self.time_multiplier is None:
            return 1.0
        m = float(self.time_multiplier(t))
        if m <= 0:
            raise ModelSpecError(f"time multiplier must be positive, got {m} at t={t}")
        return m


@dataclass(frozen=True)
class ImpactSpec:
    """Temporary impact ``f(nu) = c_f * nu**sigma_exp`` unless ``general_f`` overrides it."""

    c_f: float = 0.0
    sigma_exp: float = 0.6
    general_f: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if self.c_f < 0:
            raise ModelSpecError("c_f must be >= 0")
        if self.sigma_exp <= 0:
            raise ModelSpecError("sigma_exp must be > 0")
        if self.general_f is not None and abs(self.general_f(0.0)) > _TOL:
            raise ModelSpecError("temporary impact must vanish at zero rate")

    @property
    def is_power(self) -> bool:
        return self.general_f is None

    def __call__(self, nu):
        if self.general_f is not None:
            return np.vectorize(self.general_f, otypes=[float])(nu) if np.ndim(nu) else float(self.general_f(nu))
        return self.c_f * np.power(nu, self.sigma_exp)


@dataclass(frozen=True)
class TerminalSpec:
    """Liquidation value ``h`` of unsold inventory at the horizon (per unit price)."""

    form: str = "zero"
    vartheta: float = 0.0
    custom: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if self.form not in ("zero", "saturating", "custom"):
            raise ModelSpecError(f"unknown terminal form {self.form!r}")
        if self.form == "saturating" and self.vartheta <= 0:
            raise ModelSpecError("saturating terminal value needs vartheta > 0")
        if self.form == "custom" and self.custom is None:
            raise ModelSpecError("custom terminal value needs a callable")

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        if self.form == "zero":
            out = np.zeros_like(w)
        elif self.form == "saturating":
            out = w / (1.0 + self.vartheta * w)
        else:
            out = np.vectorize(self.custom, otypes=[float])(w)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class ModelSpec:
    """Complete liquidation problem: market model, costs, horizon and bounds."""

    chain: ChainSpec
    jumps: JumpSpec
    impact: ImpactSpec = field(default_factory=ImpactSpec)
    terminal: TerminalSpec = field(default_factory=TerminalSpec)
    rho: float = 0.0
    T: float = 1.0
    w0: float = 1.0
    s0: float = 1.0
    nu_max: float = 2.0

    def __post_init__(self):
        if self.chain.K != self.jumps.K:
            raise ModelSpecError("chain and jump specification disagree on the number of states")
        if self.rho < 0 or self.T <= 0 or self.w0 <= 0 or self.s0 <= 0:
            raise ModelSpecError("need rho >= 0 and positive T, w0, s0")
        feasible = self.w0 / self.T
        if self.nu_max < feasible * (1 - 1e-12):
            raise ModelSpecError(f"nu_max={self.nu_max} cannot liquidate w0 within T (needs >= {feasible})")
        if self.nu_max <= feasible * (1 + 1e-12):
            warnings.warn("nu_max equals w0/T: full liquidation only by selling at the cap throughout",
                          stacklevel=2)
        if self.impact.general_f is None and self.impact.c_f * self.nu_max ** self.impact.sigma_exp >= 1:
            warnings.warn("temporary impact reaches 1 below nu_max: proceeds can be negative", stacklevel=2)

    @property
    def K(self) -> int:
        return self.chain.K

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    def multiplier_bound(self) -> float:
        js = self.jumps
        if js.time_multiplier is None:
            return 1.0
        if js.multiplier_bound is not None:
            return js.multiplier_bound
        grid = np.linspace(0.0, self.T, 4001)
        return 1.01 * max(js.multiplier(t) for t in grid)


def _check(spec: ModelSpec, t: float, nu: float):
    if not (-_TOL <= t <= spec.T * (1 + _TOL)):
        raise DomainError(f"t={t} outside [0, {spec.T}]")
    if not (0.0 <= nu <= spec.nu_max * (1 + _TOL)):
        raise DomainError(f"nu={nu} outside [0, {spec.nu_max}]")


def intensity(spec: ModelSpec, t: float, state_index: int, nu: float, mark_index: int) -> float:
    """Intensity of mark ``mark_index`` in state ``state_index`` while selling at ``nu``."""
    _check(spec, t, nu)
    js = spec.jumps
    if not (0 <= state_index < js.K and 0 <= mark_index < js.J):
        raise DomainError(f"index out of range: state {state_index}, mark {mark_index}")
    lam = js.base_intensity[state_index, mark_index]
    return js.multiplier(t) * lam * (1.0 + js.impact_coefficient[mark_index] * nu)


def intensity_matrix(spec: ModelSpec, t: float, nu: float) -> np.ndarray:
    """All intensities at ``(t, nu)`` as a ``K x J`` array."""
    _check(spec, t, nu)
    js = spec.jumps
    return js.multiplier(t) * js.base_intensity * (1.0 + js.impact_coefficient * nu)


def total_intensity(spec: ModelSpec, t: float, nu: float) -> np.ndarray:
    """Total jump intensity per state, length ``K``."""
    return intensity_matrix(spec, t, nu).sum(axis=1)


def mean_return_rate(spec: ModelSpec, t: float, state_index: int, nu: float) -> float:
    """Mean instantaneous return ``sum_j z_j * intensity_j`` in one state."""
    if not 0 <= state_index < spec.K:
        raise DomainError(f"state index {state_index} out of range")
    lam = intensity_matrix(spec, t, nu)[state_index]
    return float(spec.jumps.support @ lam)


def lambda_max(spec: ModelSpec) -> float:
    """Bound on the total intensity over all ``(t, state, nu)`` with ``nu <= nu_max``."""
    js = spec.jumps
    per_state = (js.base_intensity * (1.0 + js.impact_coefficient * spec.nu_max)).sum(axis=1)
    return float(spec.multiplier_bound() * per_state.max())


def value_upper_bound(spec: ModelSpec) -> float:
    """Frictionless bound ``w0 * s0 * exp(eta_bar * T)`` on the expected discounted proceeds."""
    js = spec.jumps
    drift0 = js.base_intensity @ js.support
    if js.time_multiplier is None:
        sup_drift = drift0.max()
    else:
        grid = np.linspace(0.0, spec.T, 4001)
        m = np.array([js.multiplier(t) for t in grid])
        sup_drift = max(m.max() * drift0.max(), m.min() * drift0.max())
    eta_bar = max(0.0, sup_drift - spec.rho)
    return spec.w0 * spec.s0 * float(np.exp(eta_bar * spec.T))


def two_tick_spec(
    c_up: Sequence[float],
    c_down: Sequence[float],
    *,
    theta: float = 0.001,
    a: float = 7e-6,
    Q=None,
    pi0=None,
    c_f: float = 0.0,
    sigma_exp: float = 0.6,
    terminal: Optional[TerminalSpec] = None,
    rho: float = 0.0,
    T: float = 2.0,
    w0: float = 6000.0,
    s0: float = 1.0,
    nu_max: float = 9000.0,
) -> ModelSpec:
    """Build an up/down tick model; marks are ordered ``(+theta, -theta)``.

    The impact coefficient ``a`` applies to the down mark only.
    """
    c_up = np.atleast_1d(np.asarray(c_up, dtype=float))
    c_down = np.atleast_1d(np.asarray(c_down, dtype=float))
    K = c_up.size
    if Q is None:
        Q = np.zeros((K, K))
    if pi0 is None:
        pi0 = np.full(K, 1.0 / K)
    jumps = JumpSpec(
        support=[theta, -theta],
        base_intensity=np.column_stack([c_up, c_down]),
        impact_coefficient=[0.0, a],
    )
    return ModelSpec(
        chain=ChainSpec(Q=Q, pi0=pi0),
        jumps=jumps,
        impact=ImpactSpec(c_f=c_f, sigma_exp=sigma_exp),
        terminal=terminal or TerminalSpec("zero"),
        rho=rho,
        T=T,
        w0=w0,
        s0=s0,
        nu_max=nu_max,
    )


def table2_spec(**overrides) -> ModelSpec:
    """Two-regime reference parameters (good state e1, bad state e2)."""
    params = dict(
        theta=0.001,
        a=7e-6,
        Q=[[-4.0, 4.0], [4.0, -4.0]],
        pi0=[0.5, 0.5],
        c_f=5e-11,
        sigma_exp=0.6,
        rho=0.00005,
        T=2.0,
        w0=6000.0,
        s0=1.0,
        nu_max=9000.0,
    )
    params.update(overrides)
    return two_tick_spec([1000.0, 900.0], [900.0, 1000.0], **params)


def counterexample_spec(**overrides) -> ModelSpec:
    """Single-regime model with a closed-form value (``c_up < c_down``, no friction, ``h = 0``)."""
    params = dict(theta=0.001, a=7e-6, c_f=0.0, rho=0.0, T=2.0, w0=6000.0, s0=1.0, nu_max=9000.0)
    params.update(overrides)
    return two_tick_spec([900.0], [1000.0], **params)


def stationary_mixture(spec: ModelSpec) -> ModelSpec:
    """Single-regime model whose intensities average the regimes under the stationary law."""
    p = spec.chain.stationary()
    js = spec.jumps
    lam = (p @ js.base_intensity)[None, :]
    jumps = JumpSpec(
        support=js.support,
        base_intensity=lam,
        impact_coefficient=js.impact_coefficient,
        time_multiplier=js.time_multiplier,
        multiplier_bound=js.multiplier_bound,
    )
    return spec.replace(chain=ChainSpec(Q=[[0.0]], pi0=[1.0]), jumps=jumps)
