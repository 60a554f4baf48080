"""Local-to-global balance: boundary cutoff fluxes on a channel and space-time defect pairings."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad, trapezoid

from .commutators import EntropyFunction, fit_scaling
from .errors import DegenerateLadderError, FieldError, ResolutionError
from .grid import PeriodicGrid, ScalarField, VectorField

RESOLUTION_CELLS = 4


# ---------------------------------------------------------------------------
# cutoff profile


def xi(s):
    """Quintic smoothstep: 0 for s <= 0, 1 for s >= 1, C^2 at both ends."""
    s = np.clip(np.asarray(s, float), 0.0, 1.0)
    return s**3 * (10 - 15 * s + 6 * s**2)


def xi_prime(s):
    s = np.asarray(s, float)
    inside = (s > 0) & (s < 1)
    return np.where(inside, 30 * s**2 * (1 - s) ** 2, 0.0)


def xi_antiderivative(s):
    """int_0^s xi; grows linearly past s = 1."""
    s = np.asarray(s, float)
    c = np.clip(s, 0.0, 1.0)
    return np.where(s <= 1, c**4 * (2.5 - 3 * c + c**2), 0.5 + (s - 1.0))


XI_PRIME_MAX = 1.875  # xi'(1/2)


# ---------------------------------------------------------------------------
# channel


@dataclass(frozen=True)
class ChannelDomain:
    """Periodic in x1 with length ``length``; x2 in [0, 1] sampled at cell centres."""

    n1: int
    n2: int
    length: float = 1.0

    def __post_init__(self) -> None:
        # validates sizes through the container grid
        self.grid  # noqa: B018

    @property
    def grid(self) -> PeriodicGrid:
        """Sample container; only the x1 axis is periodic."""
        return PeriodicGrid((self.n1, self.n2), (self.length, 1.0))

    @property
    def h2(self) -> float:
        return 1.0 / self.n2

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        x1 = (np.arange(self.n1) * self.length / self.n1)[:, None]
        x2 = ((np.arange(self.n2) + 0.5) / self.n2)[None, :]
        return x1, x2

    def distance(self) -> np.ndarray:
        x2 = self.coords()[1]
        return np.broadcast_to(np.minimum(x2, 1.0 - x2), (self.n1, self.n2))

    def normal(self) -> np.ndarray:
        """Outward normal of the nearest wall: -e2 below the midline, +e2 above."""
        x2 = self.coords()[1]
        n = np.zeros((2, self.n1, self.n2))
        n[1] = np.where(x2 < 0.5, -1.0, 1.0)
        return n

    def scalar(self, fn: Callable) -> ScalarField:
        x1, x2 = self.coords()
        return ScalarField(self.grid, np.broadcast_to(fn(x1, x2), (self.n1, self.n2)))

    def vector(self, fn: Callable) -> VectorField:
        x1, x2 = self.coords()
        a, b = fn(x1, x2)
        shape = (self.n1, self.n2)
        return VectorField(self.grid, np.stack([np.broadcast_to(a, shape), np.broadcast_to(b, shape)]))

    def boundary_layer(self, nu: float, amplitude: float = 1.0) -> VectorField:
        s = math.sqrt(nu)
        return self.vector(lambda x1, x2: (amplitude * np.tanh(x2 / s) * np.tanh((1 - x2) / s), 0.0 * x2))


@dataclass(frozen=True)
class CutoffFamily:
    domain: ChannelDomain
    deltas: tuple[float, ...]

    def __post_init__(self) -> None:
        d = tuple(float(v) for v in self.deltas)
        if any(b >= a for a, b in zip(d, d[1:])):
            raise ValueError("delta ladder must be strictly decreasing")
        for v in d:
            check_delta(self.domain, v)
        object.__setattr__(self, "deltas", d)

    def phi(self, delta: float) -> np.ndarray:
        return xi(self.domain.distance() / delta)

    def grad_phi(self, delta: float) -> np.ndarray:
        """xi'(d/delta)/delta times grad d = -n."""
        return -self.domain.normal() * (xi_prime(self.domain.distance() / delta) / delta)[None]


def check_delta(domain: ChannelDomain, delta: float) -> None:
    floor = RESOLUTION_CELLS * domain.h2
    if delta < floor * (1 - 1e-12):
        raise ResolutionError(f"delta={delta:.4g} is below {RESOLUTION_CELLS} wall-normal cells ({floor:.4g})")
    if delta > 0.5:
        raise ValueError(f"delta={delta} exceeds the half width of the channel")


def _phi_primitive(x, delta: float):
    """int_0^x phi_delta(t) dt on [0, 1]."""
    x = np.asarray(x, float)
    half = delta * xi_antiderivative(0.5 / delta)
    lower = delta * xi_antiderivative(x / delta)
    upper = half + delta * (xi_antiderivative(0.5 / delta) - xi_antiderivative((1.0 - x) / delta))
    return np.where(x <= 0.5, lower, upper)


def wall_normal_profile(domain: ChannelDomain, u: VectorField, p: ScalarField) -> np.ndarray:
    """G(x2) = int u2 (|u|^2/2 + p) dx1 at the cell centres."""
    s = u.data[1] * (0.5 * np.sum(u.data**2, axis=0) + p.data)
    return s.sum(axis=0) * domain.length / domain.n1


def boundary_flux_integral(domain: ChannelDomain, u: VectorField, p: ScalarField, delta: float):
    """(int grad phi_delta . u (|u|^2/2 + p) dx, upper bound).

    The wall-normal integral treats G(x2) as piecewise linear between cell
    centres (linearly extrapolated to the walls) and integrates phi_delta'
    against it exactly, so linear profiles are integrated without error.
    The bound is (C/delta) int_{Gamma_delta} |u.n| ||u|^2/2 + p| with
    C = max |xi'|.
    """
    if u.grid != domain.grid or p.grid != domain.grid:
        raise FieldError("fields are not sampled on this channel")
    check_delta(domain, delta)
    g = wall_normal_profile(domain, u, p)
    x = (np.arange(domain.n2) + 0.5) * domain.h2
    nodes = np.concatenate([[0.0], x, [1.0]])
    vals = np.concatenate([[1.5 * g[0] - 0.5 * g[1]], g, [1.5 * g[-1] - 0.5 * g[-2]]])
    slopes = np.diff(vals) / np.diff(nodes)
    integral = -float(np.sum(slopes * np.diff(_phi_primitive(nodes, delta))))
    dist = domain.distance()
    un = np.abs(np.sum(u.data * domain.normal(), axis=0))
    scal = np.abs(0.5 * np.sum(u.data**2, axis=0) + p.data)
    cell = domain.length / domain.n1 * domain.h2
    bound = XI_PRIME_MAX / delta * float(np.sum(np.where(dist < delta, un * scal, 0.0)) * cell)
    return integral, bound


def leak_flux_oracle(delta: float, length: float = 1.0) -> float:
    """Flux integral for u = (0, 1), p = x2 by adaptive 1D quadrature."""
    def integrand(x2):
        d = min(x2, 1 - x2)
        sign = 1.0 if x2 < 0.5 else -1.0
        return sign * float(xi_prime(d / delta)) / delta * (0.5 + x2)

    lo, _ = quad(integrand, 0.0, delta, epsabs=1e-13, epsrel=1e-13, limit=200)
    hi, _ = quad(integrand, 1.0 - delta, 1.0, epsabs=1e-13, epsrel=1e-13, limit=200)
    return length * (lo + hi)


@dataclass(frozen=True)
class BoundaryVerdict:
    conserved: bool
    limit: float
    rate: float | None
    fit_quality: float
    reliable: bool
    exact_zero: bool
    ladder: tuple[tuple[float, float, float], ...] = ()

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("ladder")
        return json.dumps(d, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["delta,integral,upper_bound"]
        lines += [f"{d!r},{i!r},{b!r}" for d, i, b in self.ladder]
        return "\n".join(lines) + "\n"


def global_from_local(ladder: Sequence[tuple], atol: float = 1e-10, rtol: float = 1e-3,
                      min_quality: float = 0.9) -> BoundaryVerdict:
    """Extrapolate a delta ladder of flux integrals to delta -> 0.

    Rungs are (delta, integral) or (delta, integral, bound).  The limit is
    the intercept of a least-squares line in delta; the flux is declared
    conserved when |limit| <= atol + rtol * max |integral|.  ``rate`` is the log-log decay exponent of the
    nonzero rungs when conserved; it is 0 for an exactly vanishing ladder.
    """
    rows = [(float(r[0]), float(r[1]), float(r[2]) if len(r) > 2 else math.nan) for r in ladder]
    if len(rows) < 3:
        raise DegenerateLadderError(f"degenerate ladder: {len(rows)} rungs, need 3")
    d = np.array([r[0] for r in rows])
    v = np.array([r[1] for r in rows])
    if np.all(v == 0):
        return BoundaryVerdict(True, 0.0, 0.0, 1.0, True, True, tuple(rows))
    slope, icpt = np.polyfit(d, v, 1)
    resid = v - (slope * d + icpt)
    ss = float(np.sum((v - v.mean()) ** 2))
    quality = 1.0 if ss == 0 else max(0.0, 1.0 - float(np.sum(resid**2)) / ss)
    scale = float(np.max(np.abs(v)))
    conserved = abs(icpt) <= atol + rtol * scale
    rate = None
    if conserved:
        try:
            rep = fit_scaling([(a, b) for a, b in zip(d, v)], min_rungs=3)
            rate, quality = rep.fitted_exponent, rep.fit_quality
        except DegenerateLadderError:
            rate = None
    return BoundaryVerdict(bool(conserved), float(icpt), rate, float(quality), quality >= min_quality,
                           False, tuple(rows))


# ---------------------------------------------------------------------------
# space-time pairings


@dataclass(frozen=True)
class SpaceTimeBump:
    """Product of 1D bumps exp(-1/(1-z^2)) centred at (x0, t0) with radii (rx, rt)."""

    x0: float
    t0: float
    rx: float
    rt: float
    height: float = 1.0

    @staticmethod
    def _b(z):
        z = np.asarray(z, float)
        inside = np.abs(z) < 1
        out = np.zeros_like(z)
        zi = z[inside]
        out[inside] = np.exp(-1.0 / (1.0 - zi**2))
        return out

    @staticmethod
    def _db(z):
        z = np.asarray(z, float)
        inside = np.abs(z) < 1
        out = np.zeros_like(z)
        zi = z[inside]
        out[inside] = np.exp(-1.0 / (1.0 - zi**2)) * (-2 * zi / (1.0 - zi**2) ** 2)
        return out

    @property
    def support(self):
        return (self.x0 - self.rx, self.x0 + self.rx), (self.t0 - self.rt, self.t0 + self.rt)

    def value(self, x, t):
        return self.height * self._b((x - self.x0) / self.rx) * self._b((t - self.t0) / self.rt)

    def d_x(self, x, t):
        return self.height * self._db((x - self.x0) / self.rx) / self.rx * self._b((t - self.t0) / self.rt)

    def d_t(self, x, t):
        return self.height * self._b((x - self.x0) / self.rx) * self._db((t - self.t0) / self.rt) / self.rt


def local_balance_defect(trajectory: Sequence, eta: EntropyFunction, q: Callable, phi) -> float:
    """int int (d_t phi eta(u) + d_x phi q(u)) dx dt over a 1D trajectory.

    ``trajectory`` holds states with ``u``, ``dx``, ``centers`` and ``time``
    sampled uniformly in time; ``phi`` provides ``support``, ``d_x`` and
    ``d_t``.  Time quadrature is the trapezoid rule; phi vanishes at the ends
    of its support so the rule is spectrally accurate for smooth integrands.
    """
    times = np.array([s.time for s in trajectory])
    (xa, xb), (ta, tb) = phi.support
    if ta < times[0] - 1e-12 or tb > times[-1] + 1e-12:
        raise ValueError(f"test function time support [{ta}, {tb}] leaves the trajectory "
                         f"[{times[0]}, {times[-1]}]")
    first = trajectory[0]
    xs = first.centers
    lo_x, hi_x = xs[first.interior][0] - 0.5 * first.dx, xs[first.interior][-1] + 0.5 * first.dx
    if xa < lo_x - 1e-12 or xb > hi_x + 1e-12:
        raise ValueError(f"test function space support [{xa}, {xb}] leaves the domain [{lo_x}, {hi_x}]")
    vals = []
    for s in trajectory:
        u = s.u
        vals.append(float(np.sum(phi.d_t(xs, s.time) * eta.eta(u) + phi.d_x(xs, s.time) * q(u)) * s.dx))
    return float(trapezoid(vals, times))
