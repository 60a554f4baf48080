"""Periodic grids, sampled fields and spectral calculus on the flat torus.

Fields are thin immutable wrappers around numpy arrays.  Every derivative is
taken in Fourier space; odd-derivative Nyquist coefficients are zeroed so that
the discrete derivative is real and skew-adjoint on the grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence, Union

import numpy as np
import scipy.fft as sfft

from .errors import FieldError, ResolutionError

_WORKERS: int | None = None


def set_fft_workers(n: int | None) -> None:
    """Number of threads handed to scipy.fft (None lets scipy decide)."""
    global _WORKERS
    _WORKERS = n


def rfftn(a: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    return sfft.rfftn(a, axes=axes, workers=_WORKERS)


def irfftn(a: np.ndarray, shape: Sequence[int], axes: Sequence[int]) -> np.ndarray:
    return sfft.irfftn(a, s=shape, axes=axes, workers=_WORKERS)


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform collocation grid on a d-torus with side lengths ``lengths``."""

    shape: tuple[int, ...]
    lengths: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        shape = tuple(int(n) for n in self.shape)
        lengths = tuple(float(x) for x in self.lengths) or (1.0,) * len(shape)
        if not 1 <= len(shape) <= 3:
            raise FieldError(f"grid dimension must be 1, 2 or 3, got {len(shape)}")
        if len(lengths) != len(shape):
            raise FieldError("lengths and shape must have the same length")
        for n in shape:
            if n < 8 or n & (n - 1):
                raise FieldError(f"points per axis must be a power of two >= 8, got {n}")
        if any(not np.isfinite(x) or x <= 0 for x in lengths):
            raise FieldError(f"axis lengths must be positive, got {lengths}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "lengths", lengths)

    @classmethod
    def uniform(cls, n: int, dim: int, length: float = 1.0) -> "PeriodicGrid":
        return cls((n,) * dim, (length,) * dim)

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.lengths, self.shape))

    @property
    def max_spacing(self) -> float:
        return max(self.spacing)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(self.dim))

    def coords(self) -> tuple[np.ndarray, ...]:
        """Broadcastable coordinate arrays, one per axis (sparse meshgrid)."""
        axes = [np.arange(n) * h for n, h in zip(self.shape, self.spacing)]
        return tuple(np.meshgrid(*axes, indexing="ij", sparse=True))

    def offsets(self) -> tuple[np.ndarray, ...]:
        """Minimum-image displacement of every grid point from the origin."""
        out = []
        for ax, (n, h) in enumerate(zip(self.shape, self.spacing)):
            j = np.arange(n)
            j = np.where(j > n // 2, j - n, j)
            shp = [1] * self.dim
            shp[ax] = n
            out.append((j * h).reshape(shp))
        return tuple(out)

    def wavenumbers(self, axis: int, derivative: bool = True) -> np.ndarray:
        """Angular wavenumbers along ``axis`` in rfftn layout, broadcastable.

        With ``derivative`` the Nyquist entry is zeroed (odd derivatives).
        """
        n = self.shape[axis]
        last = axis == self.dim - 1
        if last:
            m = np.fft.rfftfreq(n, d=1.0 / n)
        else:
            m = np.fft.fftfreq(n, d=1.0 / n)
        k = 2.0 * np.pi * m / self.lengths[axis]
        if derivative:
            k = np.where(np.abs(m) == n // 2, 0.0, k)
        shp = [1] * self.dim
        shp[axis] = k.size
        return k.reshape(shp)

    def spectral_shape(self) -> tuple[int, ...]:
        return self.shape[:-1] + (self.shape[-1] // 2 + 1,)

    def to_dict(self) -> dict[str, Any]:
        return {"dim": self.dim, "points_per_axis": list(self.shape),
                "axis_length": list(self.lengths)}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScalarField:
    grid: PeriodicGrid
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.grid.shape:
            raise FieldError(f"sample array shape {data.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(data)):
            raise FieldError("scalar field contains non-finite samples")
        object.__setattr__(self, "data", _frozen(data))

    rank = 0

    def _wrap(self, other: Any) -> np.ndarray | float:
        if isinstance(other, ScalarField):
            _check_same_grid(self, other)
            return other.data
        return other

    def __add__(self, other):
        return ScalarField(self.grid, self.data + self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarField(self.grid, self.data - self._wrap(other))

    def __rsub__(self, other):
        return ScalarField(self.grid, self._wrap(other) - self.data)

    def __mul__(self, other):
        if isinstance(other, VectorField):
            return other * self
        return ScalarField(self.grid, self.data * self._wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.data)

    def apply(self, fn) -> "ScalarField":
        return ScalarField(self.grid, fn(self.data))


@dataclass(frozen=True)
class VectorField:
    grid: PeriodicGrid
    data: np.ndarray  # shape (dim,) + grid.shape

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        expect = (self.grid.dim,) + self.grid.shape
        if data.shape != expect:
            raise FieldError(f"vector data shape {data.shape}, expected {expect}")
        if not np.all(np.isfinite(data)):
            raise FieldError("vector field contains non-finite samples")
        object.__setattr__(self, "data", _frozen(data))

    rank = 1

    @classmethod
    def from_components(cls, comps: Sequence[ScalarField | np.ndarray], grid: PeriodicGrid | None = None):
        if grid is None:
            grid = comps[0].grid
        arrs = [c.data if isinstance(c, ScalarField) else np.broadcast_to(c, grid.shape) for c in comps]
        return cls(grid, np.stack(arrs))

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.data[i])

    def components(self) -> list[ScalarField]:
        return [self.component(i) for i in range(self.grid.dim)]

    def magnitude(self) -> ScalarField:
        return ScalarField(self.grid, np.sqrt(np.sum(self.data**2, axis=0)))

    def dot(self, other: "VectorField") -> ScalarField:
        _check_same_grid(self, other)
        return ScalarField(self.grid, np.sum(self.data * other.data, axis=0))

    def _wrap(self, other: Any):
        if isinstance(other, VectorField):
            _check_same_grid(self, other)
            return other.data
        if isinstance(other, ScalarField):
            _check_same_grid(self, other)
            return other.data[None]
        return other

    def __add__(self, other):
        return VectorField(self.grid, self.data + self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return VectorField(self.grid, self.data - self._wrap(other))

    def __mul__(self, other):
        return VectorField(self.grid, self.data * self._wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return VectorField(self.grid, -self.data)


@dataclass(frozen=True)
class MatrixField:
    """3x3 matrix-valued field on a 3-torus; rows are (m, u, w)."""

    grid: PeriodicGrid
    data: np.ndarray  # shape (3, 3) + grid.shape

    def __post_init__(self) -> None:
        if self.grid.dim != 3:
            raise FieldError("matrix fields live on three-dimensional grids")
        data = np.asarray(self.data, dtype=np.float64)
        expect = (3, 3) + self.grid.shape
        if data.shape != expect:
            raise FieldError(f"matrix data shape {data.shape}, expected {expect}")
        if not np.all(np.isfinite(data)):
            raise FieldError("matrix field contains non-finite samples")
        object.__setattr__(self, "data", _frozen(data))

    rank = 2

    @classmethod
    def from_rows(cls, rows: Sequence[VectorField]) -> "MatrixField":
        return cls(rows[0].grid, np.stack([r.data for r in rows]))

    def row(self, i: int) -> VectorField:
        return VectorField(self.grid, self.data[i])

    def rows(self) -> tuple[VectorField, VectorField, VectorField]:
        return self.row(0), self.row(1), self.row(2)

    def pointwise(self) -> np.ndarray:
        """Matrices as an (npoints, 3, 3) array."""
        return np.moveaxis(self.data.reshape(3, 3, -1), -1, 0)

    @classmethod
    def from_pointwise(cls, grid: PeriodicGrid, mats: np.ndarray) -> "MatrixField":
        return cls(grid, np.moveaxis(mats, 0, -1).reshape((3, 3) + grid.shape))

    def __add__(self, other):
        o = other.data if isinstance(other, MatrixField) else other
        return MatrixField(self.grid, self.data + o)

    def __sub__(self, other):
        o = other.data if isinstance(other, MatrixField) else other
        return MatrixField(self.grid, self.data - o)


Field = Union[ScalarField, VectorField, MatrixField]


def _check_same_grid(a, b) -> None:
    if a.grid != b.grid:
        raise FieldError(f"grid mismatch: {a.grid} vs {b.grid}")


def same_grid(*fields) -> PeriodicGrid:
    g = fields[0].grid
    for f in fields[1:]:
        _check_same_grid(fields[0], f)
    return g


def like(f: Field, data: np.ndarray) -> Field:
    """New field of the same type and grid as ``f`` holding ``data``."""
    return type(f)(f.grid, data)


# ---------------------------------------------------------------------------
# Analytic generators

KINDS = ("constant", "fourier-mode", "shear", "taylor-green", "weierstrass",
         "boundary-layer", "custom-table")


@dataclass(frozen=True)
class AnalyticFieldSpec:
    """Recipe for a synthetic field; ``params`` depend on ``kind``.

    constant        value, [vector: bool]
    fourier-mode    amplitude, wavevector (ints), phase, [vector_axis]
    shear           amplitude, wavenumber, [flow_axis=0, vary_axis=1]
    taylor-green    amplitude
    weierstrass     alpha, octaves, seed, [direction (ints)], [amplitude], [offset]
    boundary-layer  nu (layer width is sqrt(nu)), [amplitude]
    custom-table    values (nested list matching the grid shape)
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise FieldError(f"unknown field kind {self.kind!r}; expected one of {KINDS}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, **self.params}


def weierstrass_phases(seed: int, octaves: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi, size=octaves)


def weierstrass_sup_bound(alpha: float, octaves: int) -> float:
    return float(sum(2.0 ** (-alpha * k) for k in range(1, octaves + 1)))


def sample(spec: AnalyticFieldSpec, grid: PeriodicGrid) -> ScalarField | VectorField:
    """Evaluate ``spec`` on ``grid``; a pure function of its arguments."""
    p = spec.params
    x = grid.coords()
    kind = spec.kind
    if kind == "constant":
        value = float(p.get("value", 0.0))
        if p.get("vector"):
            return VectorField(grid, np.full((grid.dim,) + grid.shape, value))
        return ScalarField(grid, np.full(grid.shape, value))
    if kind == "fourier-mode":
        kvec = _int_vector(p.get("wavevector", [1] + [0] * (grid.dim - 1)), grid.dim)
        phase = float(p.get("phase", 0.0))
        amp = float(p.get("amplitude", 1.0))
        arg = sum(2.0 * np.pi * k * xi / L for k, xi, L in zip(kvec, x, grid.lengths))
        vals = np.broadcast_to(amp * np.sin(arg + phase), grid.shape)
        axis = p.get("vector_axis")
        if axis is not None:
            data = np.zeros((grid.dim,) + grid.shape)
            data[int(axis)] = vals
            return VectorField(grid, data)
        return ScalarField(grid, vals)
    if kind == "shear":
        if grid.dim < 2:
            raise FieldError("shear flow needs dim >= 2")
        amp = float(p.get("amplitude", 1.0))
        k = int(p.get("wavenumber", 1))
        fa, va = int(p.get("flow_axis", 0)), int(p.get("vary_axis", 1))
        data = np.zeros((grid.dim,) + grid.shape)
        data[fa] = np.broadcast_to(amp * np.sin(2 * np.pi * k * x[va] / grid.lengths[va]), grid.shape)
        return VectorField(grid, data)
    if kind == "taylor-green":
        amp = float(p.get("amplitude", 1.0))
        if grid.dim == 2:
            a, b = (2 * np.pi * xi / L for xi, L in zip(x, grid.lengths))
            data = np.stack([np.broadcast_to(amp * np.sin(a) * np.cos(b), grid.shape),
                             np.broadcast_to(-amp * np.cos(a) * np.sin(b), grid.shape)])
        elif grid.dim == 3:
            a, b, c = (2 * np.pi * xi / L for xi, L in zip(x, grid.lengths))
            data = np.stack([np.broadcast_to(amp * np.sin(a) * np.cos(b) * np.cos(c), grid.shape),
                             np.broadcast_to(-amp * np.cos(a) * np.sin(b) * np.cos(c), grid.shape),
                             np.zeros(grid.shape)])
        else:
            raise FieldError("taylor-green needs dim 2 or 3")
        return VectorField(grid, data)
    if kind == "weierstrass":
        alpha = float(p["alpha"])
        octaves = int(p["octaves"])
        seed = int(p.get("seed", 0))
        if not 0.0 < alpha < 1.0:
            raise FieldError(f"weierstrass exponent must lie in (0,1), got {alpha}")
        direction = _int_vector(p.get("direction", [1] + [0] * (grid.dim - 1)), grid.dim)
        for n, e in zip(grid.shape, direction):
            if e and (2 ** octaves) * abs(e) > n // 4:
                raise ResolutionError(
                    f"weierstrass octave 2^{octaves} along direction {direction} is not resolved "
                    f"by {n} points per axis (need 2^K*|e| <= {n // 4})")
        phases = weierstrass_phases(seed, octaves)
        arg = sum(2.0 * np.pi * e * xi / L for e, xi, L in zip(direction, x, grid.lengths))
        arg = np.broadcast_to(arg, grid.shape)
        vals = np.zeros(grid.shape)
        for k in range(1, octaves + 1):
            vals += 2.0 ** (-alpha * k) * np.cos(2.0 ** k * arg + phases[k - 1])
        vals = float(p.get("amplitude", 1.0)) * vals + float(p.get("offset", 0.0))
        return ScalarField(grid, vals)
    if kind == "boundary-layer":
        if grid.dim < 2:
            raise FieldError("boundary-layer profile needs dim >= 2")
        nu = float(p["nu"])
        amp = float(p.get("amplitude", 1.0))
        y = x[1] / grid.lengths[1]
        s = np.sqrt(nu)
        data = np.zeros((grid.dim,) + grid.shape)
        data[0] = np.broadcast_to(amp * np.tanh(y / s) * np.tanh((1.0 - y) / s), grid.shape)
        return VectorField(grid, data)
    # custom-table
    vals = np.asarray(p["values"], dtype=float)
    if vals.shape == grid.shape:
        return ScalarField(grid, vals)
    return VectorField(grid, vals)


def _int_vector(v, dim: int) -> tuple[int, ...]:
    v = tuple(int(a) for a in v)
    if len(v) != dim:
        raise FieldError(f"integer vector {v} does not match dimension {dim}")
    return v


TRIAD = ((1, 0), (1, 2), (2, 2))


def solenoidal_weierstrass(grid: PeriodicGrid, alpha: float, octaves: int, seed: int = 0,
                           amplitude: float = 1.0) -> VectorField:
    """Divergence-free 2D field of Hoelder exponent ``alpha`` with a steady energy cascade.

    Octave k = 0..octaves carries the resonant triad 2^k (1,0), 2^k (1,2),
    2^k (2,2) with velocity amplitude 2^{-alpha k}.  The first two phases are
    drawn from ``seed``; the third is their sum, which locks every triad to
    transfer energy with the same sign.  Without the lock a triad's net
    transfer depends on the random phase combination and the flux through a
    mollification scale has no definite power law.
    """
    if grid.dim != 2:
        raise FieldError("solenoidal_weierstrass is two-dimensional")
    top = 2 ** octaves * 2
    if top > min(grid.shape) // 4:
        raise ResolutionError(f"wavenumber {top} of octave {octaves} unresolved on grid {grid.shape}")
    rng = np.random.default_rng(seed)
    x, y = (2 * np.pi * xi / L for xi, L in zip(grid.coords(), grid.lengths))
    psi = np.zeros(grid.shape)
    for k in range(octaves + 1):
        ta, tb = rng.uniform(0, 2 * np.pi, 2)
        for (a, b), th in zip(TRIAD, (ta, tb, ta + tb)):
            kk = 2 ** k
            mag = 2 * np.pi * kk * np.hypot(a, b)
            psi = psi + 2.0 ** (-alpha * k) / mag * np.cos(kk * (a * x + b * y) + th)
    return perp_gradient(ScalarField(grid, amplitude * psi))


def random_trig_field(grid: PeriodicGrid, rng: np.random.Generator, max_mode: int = 4,
                      n_modes: int = 6, amplitude: float = 1.0) -> ScalarField:
    """Random real trigonometric polynomial with |wavenumber| <= max_mode per axis."""
    x = grid.coords()
    vals = np.zeros(grid.shape)
    for _ in range(n_modes):
        k = rng.integers(-max_mode, max_mode + 1, size=grid.dim)
        arg = sum(2 * np.pi * kk * xi / L for kk, xi, L in zip(k, x, grid.lengths))
        vals = vals + amplitude * rng.normal() * np.cos(arg + rng.uniform(0, 2 * np.pi))
    return ScalarField(grid, np.broadcast_to(vals, grid.shape))


# ---------------------------------------------------------------------------
# Spectral calculus

def _check_finite(a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise FieldError("non-finite samples")


def spectral_derivative(f: ScalarField, axis: int, order: int = 1) -> ScalarField:
    """d^order f / dx_axis^order by Fourier multiplication."""
    g = f.grid
    if not 0 <= axis < g.dim:
        raise FieldError(f"axis {axis} out of range for dim {g.dim}")
    _check_finite(f.data)
    k = g.wavenumbers(axis, derivative=order % 2 == 1)
    fh = rfftn(f.data, g.axes)
    fh *= (1j * k) ** order
    return ScalarField(g, irfftn(fh, g.shape, g.axes))


def gradient(f: ScalarField) -> VectorField:
    g = f.grid
    fh = rfftn(f.data, g.axes)
    comps = [irfftn(1j * g.wavenumbers(a) * fh, g.shape, g.axes) for a in g.axes]
    return VectorField(g, np.stack(comps))


def perp_gradient(psi: ScalarField) -> VectorField:
    """(d psi/dx2, -d psi/dx1) in two dimensions."""
    gr = gradient(psi).data
    return VectorField(psi.grid, np.stack([gr[1], -gr[0]]))


def divergence(v: VectorField) -> ScalarField:
    g = v.grid
    vh = rfftn(v.data, tuple(a + 1 for a in g.axes))
    acc = sum(1j * g.wavenumbers(a) * vh[a] for a in g.axes)
    return ScalarField(g, irfftn(acc, g.shape, g.axes))


def row_divergence(U: MatrixField) -> VectorField:
    """Row-wise divergence: (div m, div u, div w)."""
    return VectorField(U.grid, np.stack([divergence(r).data for r in U.rows()]))


def _curl_hat(g: PeriodicGrid, vh: np.ndarray) -> np.ndarray:
    k = [g.wavenumbers(a) for a in range(3)]
    return np.stack([1j * (k[1] * vh[2] - k[2] * vh[1]),
                     1j * (k[2] * vh[0] - k[0] * vh[2]),
                     1j * (k[0] * vh[1] - k[1] * vh[0])])


def curl(v: VectorField) -> VectorField:
    g = v.grid
    if g.dim != 3:
        raise FieldError(f"curl is defined for dim 3 only, got dim {g.dim}")
    vh = rfftn(v.data, (1, 2, 3))
    return VectorField(g, irfftn(_curl_hat(g, vh), g.shape, (1, 2, 3)))


def vector_potential(u: VectorField, tol: float = 1e-8) -> tuple[VectorField, np.ndarray]:
    """Divergence-free Psi with curl Psi = u - mean(u).

    Returns ``(psi, mean)``.  Raises :class:`FieldError` carrying the measured
    L2 norm of div u when u is not solenoidal within ``tol``.
    """
    g = u.grid
    if g.dim != 3:
        raise FieldError("vector potentials are computed in dim 3")
    div_norm = lp_norm(divergence(u), 2)
    if div_norm > tol:
        err = FieldError(f"field is not solenoidal: ||div u||_2 = {div_norm:.3e} > {tol:.1e}")
        err.div_norm = div_norm
        raise err
    mean = u.data.reshape(3, -1).mean(axis=1)
    vh = rfftn(u.data, (1, 2, 3))
    k = [g.wavenumbers(a) for a in range(3)]
    k2 = k[0] ** 2 + k[1] ** 2 + k[2] ** 2
    inv = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    psih = _curl_hat(g, vh) * inv
    return VectorField(g, irfftn(psih, g.shape, (1, 2, 3))), mean


def leray_project(v: VectorField) -> VectorField:
    """Remove the gradient part of ``v`` (the mean is kept)."""
    g = v.grid
    ax = tuple(a + 1 for a in g.axes)
    vh = rfftn(v.data, ax)
    k = [g.wavenumbers(a) for a in g.axes]
    k2 = sum(kk**2 for kk in k)
    inv = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    kdotv = sum(kk * vh[a] for a, kk in enumerate(k))
    out = np.stack([vh[a] - k[a] * kdotv * inv for a in g.axes])
    return VectorField(g, irfftn(out, g.shape, ax))


def lp_norm(f: Field, p: float = 2.0) -> float:
    """Discrete L^p norm with cell-volume weights; vectors use the pointwise Euclidean norm."""
    if p < 1:
        raise FieldError(f"p must be >= 1, got {p}")
    a = _pointwise_abs(f)
    if np.isinf(p):
        return float(a.max())
    return float((np.sum(a**p) * f.grid.cell_volume) ** (1.0 / p))


def _pointwise_abs(f: Field) -> np.ndarray:
    if f.rank == 0:
        return np.abs(f.data)
    lead = f.data.reshape((-1,) + f.grid.shape)
    return np.sqrt(np.sum(lead**2, axis=0))


def integrate(f: ScalarField) -> float:
    return float(np.sum(f.data) * f.grid.cell_volume)


def mean(f: ScalarField) -> float:
    return float(np.mean(f.data))
