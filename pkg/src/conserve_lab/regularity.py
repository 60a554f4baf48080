"""Besov-type increment functionals, Hoelder exponent estimates and ensembles."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .commutators import ScalingReport, fit_scaling
from .errors import DegenerateLadderError, FieldError
from .grid import Field, PeriodicGrid, ScalarField, _check_same_grid, gradient, lp_norm
from .mollify import EpsilonLadder, MollifierKernel, check_resolution, mollify


@dataclass(frozen=True)
class BesovFunctionalSpec:
    """Exponents of the increment functional.

    With ``include_time`` the last grid axis is time and the ball integral is
    taken in space-time; the denominator exponent is always the dimension of
    the supplied grid plus ``alpha * p_exp``.
    """

    p_exp: float
    alpha: float
    include_time: bool = False
    ladder: EpsilonLadder | None = None
    dim: int | None = None

    def __post_init__(self) -> None:
        if self.p_exp < 1:
            raise ValueError(f"p_exp must be >= 1, got {self.p_exp}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")

    def denominator_exponent(self, grid: PeriodicGrid) -> float:
        if self.dim is not None and self.dim != grid.dim:
            raise FieldError(f"spec expects dimension {self.dim}, field has dimension {grid.dim}")
        if self.include_time and grid.dim < 2:
            raise FieldError("a space-time functional needs at least one space axis and a time axis")
        return grid.dim + self.alpha * self.p_exp


def ball_offsets(grid: PeriodicGrid, epsilon: float) -> list[tuple[int, ...]]:
    """Integer cell offsets y with 0 < |y| <= epsilon, one of each +-y pair."""
    h = grid.spacing
    reach = [int(math.floor(epsilon / hi + 1e-12)) for hi in h]
    out = []
    for j in itertools.product(*(range(-r, r + 1) for r in reach)):
        if j <= (0,) * grid.dim:
            continue
        if sum((ji * hi) ** 2 for ji, hi in zip(j, h)) <= epsilon**2 * (1 + 1e-12):
            out.append(j)
    return out


def _increment_integral(f: Field, shift: tuple[int, ...], p: float) -> float:
    lead = f.data.ndim - f.grid.dim
    d = f.data - np.roll(f.data, shift, axis=tuple(range(lead, lead + f.grid.dim)))
    a = np.abs(d) if lead == 0 else np.sqrt(np.sum(d.reshape((-1,) + f.grid.shape) ** 2, axis=0))
    return float(np.sum(a**p))


def besov_functional(f: Field, spec: BesovFunctionalSpec, epsilon: float) -> float:
    """eps^{-(d + alpha p)} int int_{|y| <= eps} |f(x) - f(x - y)|^p dy dx."""
    g = f.grid
    check_resolution(g, epsilon)
    expo = spec.denominator_exponent(g)
    total = 2.0 * sum(_increment_integral(f, s, spec.p_exp) for s in ball_offsets(g, epsilon))
    return total * g.cell_volume**2 / epsilon**expo


def mollified_increment_norm(f: Field, p_exp: float, alpha: float, kernel: MollifierKernel) -> float:
    """eps^{-alpha} ||f - f_eps||_p."""
    return kernel.epsilon ** (-alpha) * lp_norm(f - mollify(f, kernel), p_exp)


def gradient_bound(f: ScalarField, p_exp: float, alpha: float, kernel: MollifierKernel) -> float:
    """eps^{1-alpha} ||grad f_eps||_p."""
    return kernel.epsilon ** (1 - alpha) * lp_norm(gradient(mollify(f, kernel)), p_exp)


class HolderEstimate(NamedTuple):
    alpha: float
    fit_quality: float
    unresolved: bool
    report: ScalingReport


def structure_function(f: Field, lag_cells: int) -> float:
    """Mean of |f(x + l e_i) - f(x)|^2 over x and coordinate directions i."""
    g = f.grid
    vals = []
    for axis in range(g.dim):
        shift = tuple(lag_cells if a == axis else 0 for a in range(g.dim))
        vals.append(_increment_integral(f, shift, 2.0) / g.size)
    return float(np.mean(vals))


def holder_exponent_estimate(f: Field, ladder: Sequence[float] | EpsilonLadder,
                             floor: float = 0.1) -> HolderEstimate:
    """Half the log-log slope of the second-order structure function.

    Lags are the ladder values rounded to whole cells (along each axis).
    The estimate is capped at 1; values at or below ``floor`` are flagged
    as unresolved.
    """
    g = f.grid
    h = g.max_spacing
    lags = sorted({max(1, int(round(e / h))) for e in ladder}, reverse=True)
    if len(lags) < 4:
        raise DegenerateLadderError(f"degenerate ladder: {len(lags)} distinct lags, need 4")
    rungs = [(lag * h, structure_function(f, lag)) for lag in lags]
    rep = fit_scaling(rungs)
    alpha = min(rep.fitted_exponent / 2.0, 1.0)
    return HolderEstimate(alpha, rep.fit_quality, alpha <= floor, rep)


@dataclass(frozen=True)
class EnsembleSet:
    """Equally gridded realisations with probability weights."""

    members: tuple[Field, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        members = tuple(self.members)
        if not members:
            raise FieldError("ensemble is empty")
        for m in members[1:]:
            _check_same_grid(members[0], m)
        if self.weights is None:
            w = np.full(len(members), 1.0 / len(members))
        else:
            w = np.asarray(self.weights, float)
            if w.shape != (len(members),):
                raise ValueError("one weight per member is required")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights must be nonnegative and sum to 1 (sum {w.sum():.15g})")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "weights", tuple(float(x) for x in w))

    def __len__(self) -> int:
        return len(self.members)


def ensemble_besov(ensemble: EnsembleSet, p_exp: float, alpha: float, epsilon: float) -> float:
    """Weighted ensemble average of the member functionals."""
    spec = BesovFunctionalSpec(p_exp, alpha)
    return float(sum(w * besov_functional(m, spec, epsilon)
                     for w, m in zip(ensemble.weights, ensemble.members)))
