"""Mollification commutators, their pairings with test functions, and ladder fits.

All quantities are formed as fields with spectral derivatives and paired with
test functions by grid quadrature.  Signs follow the mollified equations:

* transport: ``R_eps = Div(rho u)_eps - u . grad(rho_eps)``
* Constantin-E-Titi form: ``S_eps = Div(rho u)_eps - Div(rho_eps u_eps)``
* Euler: ``R_eps = Div(u_eps (x) u_eps - (u (x) u)_eps)``
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DegenerateLadderError, DomainError, FieldError
from .grid import (ScalarField, VectorField, _check_same_grid, divergence, gradient,
                   lp_norm)
from .mollify import MollifierKernel, mollify, mollify_array

Battery = Iterable[tuple[str, ScalarField]]


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class CommutatorResult:
    epsilon: float
    field_value: ScalarField
    l1_norm: float
    l2_norm: float
    tested_values: tuple[tuple[str, float], ...] = ()

    @classmethod
    def from_field(cls, epsilon: float, f: ScalarField, battery: Battery | None = None):
        tested = tuple((name, pair(phi, f)) for name, phi in (battery or ()))
        return cls(float(epsilon), f, lp_norm(f, 1), lp_norm(f, 2), tested)

    def pairing(self, phi: ScalarField) -> float:
        return pair(phi, self.field_value)


def pair(phi: ScalarField, f: ScalarField) -> float:
    """Quadrature of phi * f over the torus."""
    _check_same_grid(phi, f)
    return float(np.sum(phi.data * f.data) * f.grid.cell_volume)


# ---------------------------------------------------------------------------
# entropies


@dataclass(frozen=True)
class EntropyFunction:
    """A scalar nonlinearity with its first two derivatives.

    ``smoothness`` is ``"W2inf"`` when eta'' is bounded on ``domain`` and
    ``"C1"`` otherwise.
    """

    eta: Callable[[np.ndarray], np.ndarray]
    eta_prime: Callable[[np.ndarray], np.ndarray]
    eta_second: Callable[[np.ndarray], np.ndarray]
    smoothness: str = "W2inf"
    name: str = "eta"
    domain: tuple[float, float] = (-math.inf, math.inf)

    def __post_init__(self) -> None:
        if self.smoothness not in ("C1", "W2inf"):
            raise ValueError(f"unknown smoothness class {self.smoothness!r}")

    @classmethod
    def linear(cls) -> "EntropyFunction":
        return cls(lambda s: np.asarray(s, float) * 1.0, lambda s: np.ones_like(s, float),
                   lambda s: np.zeros_like(s, float), name="s")

    @classmethod
    def quadratic(cls) -> "EntropyFunction":
        return cls(lambda s: 0.5 * np.asarray(s, float) ** 2, lambda s: np.asarray(s, float) * 1.0,
                   lambda s: np.ones_like(s, float), name="s^2/2")

    @classmethod
    def power(cls, p: float) -> "EntropyFunction":
        """|s|^p; below p = 2 the second derivative blows up at 0."""
        if p < 1:
            raise ValueError("power entropies need p >= 1")

        def second(s):
            s = np.abs(np.asarray(s, float))
            with np.errstate(divide="ignore"):
                return p * (p - 1) * s ** (p - 2) if p != 1 else np.zeros_like(s)

        return cls(lambda s: np.abs(s) ** p, lambda s: p * np.sign(s) * np.abs(s) ** (p - 1),
                   second, smoothness="W2inf" if p >= 2 or p == 1 else "C1", name=f"|s|^{p:g}")

    def second_bound(self, lo: float, hi: float, samples: int = 4097) -> float:
        """sup |eta''| over [lo, hi]; ``inf`` if unbounded or outside the domain."""
        if lo < self.domain[0] or hi > self.domain[1]:
            return math.inf
        pts = np.linspace(lo, hi, samples)
        if lo < 0 < hi:
            pts = np.append(pts, 0.0)
        with np.errstate(all="ignore"):
            vals = np.abs(self.eta_second(pts))
        if not np.all(np.isfinite(vals)):
            return math.inf
        return float(vals.max())

    def derivative_error(self, points: np.ndarray, h: float = 1e-4) -> float:
        """max |eta' - central difference of eta| over ``points``."""
        pts = np.asarray(points, float)
        fd = (self.eta(pts + h) - self.eta(pts - h)) / (2 * h)
        return float(np.max(np.abs(fd - self.eta_prime(pts))))


# ---------------------------------------------------------------------------
# transport commutators


def _prep(rho: ScalarField, u: VectorField, kernel: MollifierKernel):
    _check_same_grid(rho, u)
    if kernel.grid != rho.grid:
        raise FieldError("kernel grid does not match the fields")
    return rho.grid


def _flux(rho: ScalarField, u: VectorField) -> VectorField:
    return VectorField(u.grid, rho.data[None] * u.data)


def dl_commutator(rho: ScalarField, u: VectorField, kernel: MollifierKernel,
                  battery: Battery | None = None) -> CommutatorResult:
    """R_eps = Div(rho u)_eps - u . grad(rho_eps).

    Converges to ``rho div u`` for smooth inputs, so it vanishes in the limit
    exactly when u is solenoidal.
    """
    _prep(rho, u, kernel)
    a = divergence(mollify(_flux(rho, u), kernel)).data
    b = np.sum(u.data * gradient(mollify(rho, kernel)).data, axis=0)
    return CommutatorResult.from_field(kernel.epsilon, ScalarField(rho.grid, a - b), battery)


def cet_commutator(rho: ScalarField, u: VectorField, kernel: MollifierKernel,
                   battery: Battery | None = None) -> CommutatorResult:
    """S_eps = Div(rho u)_eps - Div(rho_eps u_eps)."""
    _prep(rho, u, kernel)
    rho_e = mollify(rho, kernel)
    u_e = mollify(u, kernel)
    diff = mollify(_flux(rho, u), kernel).data - rho_e.data[None] * u_e.data
    s = divergence(VectorField(rho.grid, diff))
    return CommutatorResult.from_field(kernel.epsilon, s, battery)


def cet_decomposition(rho: ScalarField, u: VectorField | ScalarField, kernel: MollifierKernel):
    """Split (rho u)_eps - rho_eps u_eps into its two quadratic pieces.

    ``part_a = -(rho_eps - rho)(u_eps - u)`` and
    ``part_b = int chi_eps(y) (rho(.-y) - rho)(u(.-y) - u) dy``.
    Fields of the same kind as ``u`` are returned.
    """
    _check_same_grid(rho, u)
    r = rho.data
    ud = u.data
    lead = ud.ndim - rho.grid.dim
    rb = r[(None,) * lead]
    r_e = mollify_array(r, kernel)[(None,) * lead]
    u_e = mollify_array(ud, kernel)
    part_a = -(r_e - rb) * (u_e - ud)
    part_b = mollify_array(rb * ud, kernel) - r_e * ud - rb * u_e + rb * ud
    return type(u)(u.grid, part_a), type(u)(u.grid, part_b)


def _range(*arrays: np.ndarray) -> tuple[float, float]:
    return (float(min(a.min() for a in arrays)), float(max(a.max() for a in arrays)))


def renormalisation_defect(rho: ScalarField, u: VectorField, eta: EntropyFunction,
                           kernel: MollifierKernel, phi: ScalarField) -> float:
    """-int phi eta'(rho_eps) S_eps."""
    _prep(rho, u, kernel)
    _check_same_grid(rho, phi)
    rho_e = mollify(rho, kernel)
    lo, hi = _range(rho.data, rho_e.data)
    bound = eta.second_bound(lo, hi)
    if not math.isfinite(bound):
        raise DomainError(f"eta'' of {eta.name} is unbounded on the range [{lo:.6g}, {hi:.6g}] of rho")
    s = cet_commutator(rho, u, kernel).field_value
    return -float(np.sum(phi.data * eta.eta_prime(rho_e.data) * s.data) * rho.grid.cell_volume)


# ---------------------------------------------------------------------------
# Euler


def _check_solenoidal(u: VectorField, tol: float) -> None:
    div = lp_norm(divergence(u), 2)
    scale = 1.0 + sum(lp_norm(ScalarField(u.grid, gradient(u.component(i)).data[i]), 2)
                      for i in range(u.grid.dim))
    if div > tol * scale:
        err = FieldError(f"velocity is not solenoidal: ||div u||_2 = {div:.3e}")
        err.div_norm = div
        raise err


def euler_defect_terms(u: VectorField, kernel: MollifierKernel, phi: ScalarField,
                       tol: float = 1e-8) -> np.ndarray:
    """Per-component pieces <phi, u_eps,i R_eps,i> of the Euler defect."""
    _check_same_grid(u, phi)
    _check_solenoidal(u, tol)
    g = u.grid
    u_e = mollify(u, kernel).data
    uu = u.data[:, None] * u.data[None]
    tensor = u_e[:, None] * u_e[None] - mollify_array(uu, kernel)
    out = np.empty(g.dim)
    for i in range(g.dim):
        r_i = divergence(VectorField(g, tensor[i])).data
        out[i] = np.sum(phi.data * u_e[i] * r_i) * g.cell_volume
    return out


def euler_defect(u: VectorField, p: ScalarField | None, kernel: MollifierKernel,
                 phi: ScalarField, tol: float = 1e-8) -> float:
    """<phi, u_eps . Div(u_eps (x) u_eps - (u (x) u)_eps)>.

    The pressure does not enter the commutator; it is accepted so that
    callers can pass a full Euler state and is only checked for grid
    consistency.
    """
    if p is not None:
        _check_same_grid(u, p)
    return float(euler_defect_terms(u, kernel, phi, tol).sum())


# ---------------------------------------------------------------------------
# pressure laws


def taylor_gap(p_fn: Callable[[np.ndarray], np.ndarray], rho: ScalarField,
               kernel: MollifierKernel) -> ScalarField:
    """p(rho_eps) - p(rho)_eps; nonpositive for convex p."""
    rho_e = mollify(rho, kernel).data
    with np.errstate(all="ignore"):
        a = np.asarray(p_fn(rho_e), float)
        b = np.asarray(p_fn(rho.data), float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        lo, hi = _range(rho.data, rho_e)
        raise DomainError(f"pressure law is not finite on the range [{lo:.6g}, {hi:.6g}] of rho")
    return ScalarField(rho.grid, a - mollify_array(b, kernel))


def local_variance(rho: ScalarField, kernel: MollifierKernel) -> ScalarField:
    """int chi_eps(y) (rho(x-y) - rho(x))^2 dy."""
    r = rho.data
    v = mollify_array(r * r, kernel) - 2 * r * mollify_array(r, kernel) + r * r
    return ScalarField(rho.grid, np.maximum(v, 0.0))


def sup_on_range(fn: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                 samples: int = 4097) -> float:
    pts = np.linspace(lo, hi, samples)
    with np.errstate(all="ignore"):
        vals = np.abs(np.asarray(fn(pts), float))
    return float(vals.max()) if np.all(np.isfinite(vals)) else math.inf


def taylor_gap_bound(p_second: Callable[[np.ndarray], np.ndarray], rho: ScalarField,
                     kernel: MollifierKernel) -> ScalarField:
    """sup|p''| [(rho_eps - rho)^2 + int chi_eps(y)(rho(.-y) - rho)^2 dy]."""
    rho_e = mollify(rho, kernel).data
    lo, hi = _range(rho.data, rho_e)
    m = sup_on_range(p_second, lo, hi)
    if not math.isfinite(m):
        raise DomainError(f"p'' is unbounded on the range [{lo:.6g}, {hi:.6g}] of rho")
    return ScalarField(rho.grid, m * ((rho_e - rho.data) ** 2 + local_variance(rho, kernel).data))


class PressureCommutators(NamedTuple):
    R1: float
    R2: float
    B_fraction: float


def pressure_commutators(rho: ScalarField, u: VectorField, gamma: float,
                         kernel: MollifierKernel, alpha_cut: float) -> PressureCommutators:
    """Pressure commutators for p(rho) = rho^gamma with vacuum allowed.

    ``R1 = int div u_eps (p(rho_eps) - p(rho)_eps)`` and
    ``R2 = int div(rho_eps u_eps - (rho u)_eps) P'(rho_eps)`` where
    ``P(rho) = (rho^gamma - rho)/(gamma - 1)``.  ``B_fraction`` is the
    volume fraction of ``{0 < rho_eps < eps^alpha_cut}``.
    """
    _prep(rho, u, kernel)
    if not 1 < gamma < 2:
        raise DomainError(f"gamma must lie in (1, 2), got {gamma}")
    if rho.data.min() < 0:
        raise DomainError(f"density is negative (min {rho.data.min():.3e})")
    g = rho.grid
    rho_e = np.maximum(mollify(rho, kernel).data, 0.0)
    u_e = mollify(u, kernel)
    p_gap = rho_e**gamma - mollify_array(rho.data**gamma, kernel)
    r1 = np.sum(divergence(u_e).data * p_gap) * g.cell_volume
    flux = rho_e[None] * u_e.data - mollify(_flux(rho, u), kernel).data
    dp = (gamma * rho_e ** (gamma - 1) - 1.0) / (gamma - 1)
    r2 = np.sum(divergence(VectorField(g, flux)).data * dp) * g.cell_volume
    cut = kernel.epsilon**alpha_cut
    b = float(np.mean((rho_e > 0) & (rho_e < cut)))
    return PressureCommutators(float(r1), float(r2), b)


# ---------------------------------------------------------------------------
# ladders and fits


@dataclass(frozen=True)
class ScalingReport:
    ladder: tuple[tuple[float, float], ...]
    fitted_exponent: float
    fit_quality: float
    intercept: float
    predicted_exponent: float | None = None
    prediction_note: str = ""
    dropped: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def floor(self) -> float:
        return min(e for e, _ in self.ladder)

    def predict(self, epsilon: float) -> float:
        """Magnitude of the fitted law; refuses to extrapolate below the ladder."""
        if epsilon < self.floor * (1 - 1e-12):
            raise ValueError(f"epsilon={epsilon:g} is below the ladder floor {self.floor:g}")
        return math.exp(self.intercept) * epsilon**self.fitted_exponent

    def is_decreasing(self, slack: float = 0.0, skip_first: bool = False) -> bool:
        """Magnitudes decrease as epsilon shrinks (each within ``slack`` of its predecessor)."""
        mags = [abs(v) for _, v in sorted(self.ladder, reverse=True)]
        if skip_first:
            mags = mags[1:]
        return all(b < a * (1 + slack) if slack else b < a for a, b in zip(mags, mags[1:]))

    def to_csv(self, target=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "value", "fitted_exponent", "fit_quality", "predicted_exponent"])
        pred = "" if self.predicted_exponent is None else repr(self.predicted_exponent)
        for e, v in self.ladder:
            w.writerow([repr(e), repr(v), repr(self.fitted_exponent), repr(self.fit_quality), pred])
        text = buf.getvalue()
        if target is not None:
            with open(target, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def fit_scaling(ladder: Sequence[tuple[float, float]], predicted: float | None = None,
                note: str = "", min_rungs: int = 4) -> ScalingReport:
    """Least-squares slope of log|value| against log(epsilon).

    Exact zeros are dropped and counted; fewer than ``min_rungs`` usable rungs
    raise :class:`DegenerateLadderError`.
    """
    pairs = [(float(e), float(v)) for e, v in ladder]
    if any(e <= 0 for e, _ in pairs):
        raise ValueError("ladder scales must be positive")
    usable = [(e, v) for e, v in pairs if v != 0.0 and math.isfinite(v)]
    dropped = len(pairs) - len(usable)
    if len(usable) < min_rungs:
        raise DegenerateLadderError(
            f"degenerate ladder: {len(usable)} usable rungs of {len(pairs)} ({dropped} zero or non-finite)")
    x = np.log([e for e, _ in usable])
    y = np.log([abs(v) for _, v in usable])
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return ScalingReport(tuple(pairs), float(slope), float(min(max(r2, 0.0), 1.0)), float(icpt),
                         predicted, note, dropped)


def measure_ladder(fn: Callable[[MollifierKernel], float], grid, epsilons: Iterable[float]):
    """[(eps, fn(kernel_eps))] in the order given."""
    return [(float(e), float(fn(MollifierKernel(grid, float(e))))) for e in epsilons]
