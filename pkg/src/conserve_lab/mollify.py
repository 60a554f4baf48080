"""Radial bump mollifiers, periodic convolution and epsilon ladders."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ResolutionError
from .grid import Field, PeriodicGrid, irfftn, like, rfftn

#: smallest admissible epsilon in units of the largest grid spacing
RESOLUTION_CELLS = 4.0


def bump(r2: np.ndarray) -> np.ndarray:
    """Unnormalised profile exp(-1/(1-|z|^2)) on the unit ball, from |z|^2."""
    out = np.zeros_like(r2, dtype=float)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


def check_resolution(grid: PeriodicGrid, epsilon: float) -> None:
    floor = RESOLUTION_CELLS * grid.max_spacing
    if epsilon < floor * (1 - 1e-12):
        raise ResolutionError(
            f"epsilon={epsilon:.4g} is below the resolution floor {floor:.4g} "
            f"({RESOLUTION_CELLS:g} cells of spacing {grid.max_spacing:.4g})")


@dataclass(frozen=True)
class MollifierKernel:
    """Sampled chi_eps on ``grid``, renormalised to unit discrete mass."""

    grid: PeriodicGrid
    epsilon: float

    def __post_init__(self) -> None:
        check_resolution(self.grid, self.epsilon)
        if self.epsilon >= 0.5 * min(self.grid.lengths):
            raise ResolutionError(f"epsilon={self.epsilon:g} exceeds half the shortest period")

    @property
    def samples(self) -> np.ndarray:
        return _kernel_samples(self.grid, self.epsilon)

    @property
    def symbol(self) -> np.ndarray:
        """Fourier multiplier of the discrete convolution (real: kernel is even)."""
        return _kernel_symbol(self.grid, self.epsilon)

    def fourier_coefficient(self, wavevector) -> float:
        """Discrete multiplier at an integer wavevector, by direct summation."""
        x = self.grid.offsets()
        arg = sum(2 * np.pi * k * xi / L for k, xi, L in zip(wavevector, x, self.grid.lengths))
        return float(np.sum(self.samples * np.cos(arg)) * self.grid.cell_volume)


@lru_cache(maxsize=64)
def _kernel_samples(grid: PeriodicGrid, epsilon: float) -> np.ndarray:
    r2 = sum((o / epsilon) ** 2 for o in grid.offsets())
    vals = bump(np.broadcast_to(r2, grid.shape).copy())
    vals /= vals.sum() * grid.cell_volume
    vals.setflags(write=False)
    return vals


@lru_cache(maxsize=64)
def _kernel_symbol(grid: PeriodicGrid, epsilon: float) -> np.ndarray:
    sym = rfftn(_kernel_samples(grid, epsilon), grid.axes).real * grid.cell_volume
    sym.setflags(write=False)
    return sym


def mollify(f: Field, kernel: MollifierKernel) -> Field:
    """Periodic convolution f * chi_eps, componentwise for vectors and matrices."""
    g = f.grid
    if kernel.grid != g:
        kernel = MollifierKernel(g, kernel.epsilon)
    lead = f.data.ndim - g.dim
    axes = tuple(range(lead, lead + g.dim))
    fh = rfftn(f.data, axes)
    out = irfftn(fh * kernel.symbol, g.shape, axes)
    return like(f, out)


def mollify_array(a: np.ndarray, kernel: MollifierKernel) -> np.ndarray:
    g = kernel.grid
    lead = a.ndim - g.dim
    axes = tuple(range(lead, lead + g.dim))
    return irfftn(rfftn(a, axes) * kernel.symbol, g.shape, axes)


def increment_field(f: Field, shift) -> Field:
    """f(x) - f(x - y) for a grid-aligned offset ``shift`` (integer cells per axis)."""
    g = f.grid
    shift = tuple(int(s) for s in shift)
    lead = f.data.ndim - g.dim
    rolled = np.roll(f.data, shift, axis=tuple(range(lead, lead + g.dim)))
    return like(f, f.data - rolled)


@dataclass(frozen=True)
class EpsilonLadder:
    """Strictly decreasing list of mollification scales above the resolution floor."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(v) for v in self.values)
        if any(b >= a for a, b in zip(vals, vals[1:])):
            raise ValueError("epsilon ladder must be strictly decreasing")
        object.__setattr__(self, "values", vals)

    @classmethod
    def dyadic(cls, eps0: float, rungs: int, grid: PeriodicGrid | None = None) -> "EpsilonLadder":
        vals = [eps0 * 2.0 ** (-k) for k in range(rungs)]
        if grid is not None:
            floor = RESOLUTION_CELLS * grid.max_spacing
            vals = [v for v in vals if v >= floor * (1 - 1e-12)]
        return cls(tuple(vals))

    def check(self, grid: PeriodicGrid) -> None:
        for e in self.values:
            check_resolution(grid, e)

    def kernels(self, grid: PeriodicGrid) -> list[MollifierKernel]:
        return [MollifierKernel(grid, e) for e in self.values]

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)
