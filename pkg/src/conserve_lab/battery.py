"""Deterministic battery of smooth, compactly supported, nonnegative test functions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import PeriodicGrid, ScalarField

SCALES = (0.125, 0.25, 0.4)
CENTERS = ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25), (0.75, 0.25, 0.5),
           (0.25, 0.75, 0.75), (0.6, 0.4, 0.2))


def bump_profile(t):
    """exp(1 - 1/(1 - t^2)) on |t| < 1, zero elsewhere (peak value 1)."""
    t = np.asarray(t, float)
    inside = np.abs(t) < 1
    safe = np.where(inside, 1.0 - t**2, 1.0)
    return np.where(inside, np.exp(1.0 - 1.0 / safe), 0.0)


@dataclass(frozen=True)
class TestFunctionBattery:
    """Tensor-product bumps: every scale (fraction of the axis length) at every centre."""

    __test__ = False  # not a pytest class

    grid: PeriodicGrid
    scales: tuple[float, ...] = SCALES
    centers: tuple[tuple[float, ...], ...] = CENTERS

    @classmethod
    def default(cls, grid: PeriodicGrid) -> "TestFunctionBattery":
        return cls(grid)

    def __len__(self) -> int:
        return len(self.scales) * len(self.centers)

    def labels(self) -> list[str]:
        return [f"bump(s={s}, c={c[:self.grid.dim]})" for s in self.scales for c in self.centers]

    def fields(self) -> list[ScalarField]:
        g = self.grid
        out = []
        for s in self.scales:
            for c in self.centers:
                val = np.ones(g.shape)
                for a, x in enumerate(g.coords()):
                    L = g.lengths[a]
                    d = (x - c[a] * L + 0.5 * L) % L - 0.5 * L
                    val = val * bump_profile(d / (s * L))
                out.append(ScalarField(g, val))
        return out
