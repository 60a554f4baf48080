"""Reference dynamics: Godunov Burgers, spectral transport, 2D vorticity-streamfunction.

Burgers uses the flux f(u) = u^2/2 with entropy pair eta = u^2/2, q = u^3/3.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.integrate import simpson

from .errors import FieldError
from .grid import (PeriodicGrid, ScalarField, VectorField, gradient, irfftn,
                   perp_gradient, rfftn)
from .commutators import _check_solenoidal

CFL_MAX = 0.9


# ---------------------------------------------------------------------------
# Burgers


def burgers_flux(u):
    return 0.5 * np.asarray(u) ** 2


def burgers_entropy(u):
    return 0.5 * np.asarray(u) ** 2


def burgers_entropy_flux(u):
    return np.asarray(u) ** 3 / 3.0


def burgers_exact_ramp(x, t: float):
    """Ramp datum 1 / (1 - x) / 0; the ramp steepens until t = 1, then a shock moves at speed 1/2."""
    x = np.asarray(x, dtype=float)
    if t < 0:
        raise ValueError("time must be nonnegative")
    if t < 1:
        out = np.where(x < t, 1.0, np.where(x < 1.0, (1.0 - x) / (1.0 - t), 0.0))
    else:
        out = np.where(x < 0.5 * (t + 1.0), 1.0, 0.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class BurgersState:
    """Cell averages on a uniform line.

    ``periodic`` selects the torus; otherwise the ends use constant
    extrapolation.  ``window`` is the index range of the region of interest
    (the rest is far-field padding).
    """

    x0: float
    dx: float
    u: np.ndarray
    time: float = 0.0
    periodic: bool = True
    window: tuple[int, int] | None = None
    last_cfl: float = 0.0

    @property
    def n(self) -> int:
        return self.u.size

    @property
    def centers(self) -> np.ndarray:
        return self.x0 + (np.arange(self.n) + 0.5) * self.dx

    @property
    def interior(self) -> slice:
        lo, hi = self.window or (0, self.n)
        return slice(lo, hi)

    def mass(self) -> float:
        return float(np.sum(self.u) * self.dx)

    def entropy(self, interior: bool = False) -> float:
        u = self.u[self.interior] if interior else self.u
        return float(np.sum(burgers_entropy(u)) * self.dx)


def burgers_periodic(grid: PeriodicGrid, u0) -> BurgersState:
    if grid.dim != 1:
        raise FieldError("Burgers runs in one dimension")
    data = u0.data if isinstance(u0, ScalarField) else np.asarray(u0, float)
    return BurgersState(0.0, grid.spacing[0], np.array(data, float), 0.0, True)


def burgers_line(a: float, b: float, n: int, u0, pad_lengths: float = 4.0) -> BurgersState:
    """Interval [a, b] with n cells, padded by ``pad_lengths`` interval lengths on each side."""
    dx = (b - a) / n
    npad = int(round(pad_lengths * n))
    x0 = a - npad * dx
    xc = x0 + (np.arange(n + 2 * npad) + 0.5) * dx
    return BurgersState(x0, dx, np.asarray(u0(xc), float), 0.0, False, (npad, npad + n))


def godunov_flux(ul: np.ndarray, ur: np.ndarray) -> np.ndarray:
    """Exact Riemann flux for f = u^2/2."""
    return np.maximum(burgers_flux(np.maximum(ul, 0.0)), burgers_flux(np.minimum(ur, 0.0)))


def _godunov_once(state: BurgersState, dt: float) -> np.ndarray:
    u = state.u
    if state.periodic:
        ext = np.concatenate([u[-1:], u, u[:1]])
    else:
        ext = np.concatenate([u[:1], u, u[-1:]])
    flux = godunov_flux(ext[:-1], ext[1:])
    return u - dt / state.dx * (flux[1:] - flux[:-1])


def burgers_step(state: BurgersState, dt: float) -> BurgersState:
    """Advance by exactly ``dt``, substepping so that the CFL number stays <= 0.9."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    remaining = dt
    u_state = state
    cfl = 0.0
    while remaining > 1e-15 * max(1.0, dt):
        speed = float(np.max(np.abs(u_state.u)))
        h = remaining if speed == 0 else min(remaining, CFL_MAX * state.dx / speed)
        cfl = max(cfl, h * speed / state.dx)
        u_state = replace(u_state, u=_godunov_once(u_state, h))
        remaining -= h
    return replace(u_state, time=state.time + dt, last_cfl=cfl)


def burgers_run(state: BurgersState, t_end: float, sample_dt: float,
                cfl: float = CFL_MAX) -> list[BurgersState]:
    """Integrate to ``t_end`` recording every ``sample_dt``; steps use CFL number ``cfl``."""
    out = [state]
    n_samples = int(round((t_end - state.time) / sample_dt))
    s = state
    for i in range(1, n_samples + 1):
        target = state.time + i * sample_dt
        while target - s.time > 1e-13:
            speed = float(np.max(np.abs(s.u)))
            h = target - s.time if speed == 0 else min(target - s.time, cfl * s.dx / speed)
            s = burgers_step(s, h)
        s = replace(s, time=target)
        out.append(s)
    return out


def burgers_entropy_balance(trajectory: Sequence[BurgersState], window: tuple[float, float]):
    """(dE/dt, boundary inflow, dissipation) over a time window.

    E is the entropy of the region of interest, dE/dt its least-squares slope
    over the samples in ``window``; the inflow is q(u) at the left edge of the
    region minus q(u) at its right edge (average over the window), and the
    dissipation rate is inflow - dE/dt.
    """
    t0, t1 = window
    times = np.array([s.time for s in trajectory])
    if t0 < times[0] - 1e-12 or t1 > times[-1] + 1e-12 or t1 <= t0:
        raise ValueError(f"window {window} outside trajectory [{times[0]}, {times[-1]}]")
    sel = [s for s in trajectory if t0 - 1e-12 <= s.time <= t1 + 1e-12]
    if len(sel) < 2:
        raise ValueError("window holds fewer than two samples")
    t = np.array([s.time for s in sel])
    e = np.array([s.entropy(interior=True) for s in sel])
    dedt = 0.0 if np.all(e == e[0]) else float(np.polyfit(t, e, 1)[0])
    if sel[0].periodic and sel[0].window is None:
        inflow = 0.0
    else:
        inflow = float(np.mean([burgers_entropy_flux(s.u[s.interior][0]) -
                                burgers_entropy_flux(s.u[s.interior][-1]) for s in sel]))
    return dedt, inflow, inflow - dedt


# ---------------------------------------------------------------------------
# transport


def _rk4(rhs, y, dt):
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def transport_step(rho: ScalarField, u: VectorField, dt: float, tol: float = 1e-8) -> ScalarField:
    """One RK4 step of rho_t + u . grad rho = 0 with spectral derivatives."""
    _check_solenoidal(u, tol)
    g = rho.grid

    def rhs(r):
        return -np.sum(u.data * gradient(ScalarField(g, r)).data, axis=0)

    return ScalarField(g, _rk4(rhs, rho.data, dt))


def transport_run(rho: ScalarField, u: VectorField, t_end: float, dt: float) -> ScalarField:
    n = int(round(t_end / dt))
    if not math.isclose(n * dt, t_end, rel_tol=1e-9):
        raise ValueError("t_end must be a whole number of steps")
    _check_solenoidal(u, 1e-8)
    for _ in range(n):
        rho = transport_step(rho, u, dt, tol=math.inf)
    return rho


# ---------------------------------------------------------------------------
# 2D incompressible flow


def _k2(g: PeriodicGrid) -> np.ndarray:
    return g.wavenumbers(0) ** 2 + g.wavenumbers(1) ** 2


def dealias_mask(g: PeriodicGrid) -> np.ndarray:
    """2/3-rule mask in the rfft layout."""
    masks = []
    for a in (0, 1):
        k = np.abs(g.wavenumbers(a, derivative=False)) * g.lengths[a] / (2 * np.pi)
        masks.append(k < g.shape[a] / 3.0)
    return masks[0] & masks[1]


def velocity_from_vorticity(omega: ScalarField) -> VectorField:
    """u = (d psi/dy, -d psi/dx) with -Laplacian psi = omega (zero-mean psi)."""
    g = omega.grid
    k2 = _k2(g)
    wh = rfftn(omega.data, g.axes)
    inv = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    psi = irfftn(wh * inv, g.shape, g.axes)
    return perp_gradient(ScalarField(g, psi))


def vorticity(u: VectorField) -> ScalarField:
    gr0 = gradient(u.component(0)).data
    gr1 = gradient(u.component(1)).data
    return ScalarField(u.grid, gr1[0] - gr0[1])


@dataclass(frozen=True)
class FlowState2D:
    grid: PeriodicGrid
    vorticity: ScalarField
    nu: float = 0.0
    time: float = 0.0

    def __post_init__(self) -> None:
        if self.grid.dim != 2:
            raise FieldError("FlowState2D lives on a 2D grid")
        if self.nu < 0:
            raise ValueError("viscosity must be nonnegative")

    @classmethod
    def from_velocity(cls, u: VectorField, nu: float = 0.0, time: float = 0.0) -> "FlowState2D":
        return cls(u.grid, vorticity(u), nu, time)

    @property
    def velocity(self) -> VectorField:
        return velocity_from_vorticity(self.vorticity)

    def energy(self) -> float:
        u = self.velocity.data
        return 0.5 * float(np.sum(u**2) * self.grid.cell_volume)

    def enstrophy(self) -> float:
        return 0.5 * float(np.sum(self.vorticity.data**2) * self.grid.cell_volume)

    def dissipation_density(self) -> float:
        """int |grad u|^2."""
        u = self.velocity
        return float(sum(np.sum(gradient(c).data ** 2) for c in u.components()) * self.grid.cell_volume)


def _euler_rhs_hat(g: PeriodicGrid, wh: np.ndarray, mask: np.ndarray) -> np.ndarray:
    k2 = _k2(g)
    kx, ky = g.wavenumbers(0), g.wavenumbers(1)
    inv = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    psih = wh * inv
    ux = irfftn(1j * ky * psih, g.shape, g.axes)
    uy = irfftn(-1j * kx * psih, g.shape, g.axes)
    wx = irfftn(1j * kx * wh, g.shape, g.axes)
    wy = irfftn(1j * ky * wh, g.shape, g.axes)
    return -rfftn(ux * wx + uy * wy, g.axes) * mask


def euler2d_step(state: FlowState2D, dt: float) -> FlowState2D:
    """RK4 for the advection term with an exact integrating factor for viscosity."""
    g = state.grid
    mask = dealias_mask(g)
    k2 = _k2(g)
    wh = rfftn(state.vorticity.data, g.axes) * mask
    half = np.exp(-state.nu * k2 * dt / 2)
    full = half * half

    def n(w):
        return _euler_rhs_hat(g, w, mask)

    a = n(wh)
    b = n(half * (wh + 0.5 * dt * a))
    c = n(half * wh + 0.5 * dt * b)
    d = n(full * wh + dt * half * c)
    new = full * wh + dt / 6.0 * (full * a + 2 * half * (b + c) + d)
    return FlowState2D(g, ScalarField(g, irfftn(new, g.shape, g.axes)), state.nu, state.time + dt)


def cfl_number(state: FlowState2D, dt: float) -> float:
    u = state.velocity.data
    return float(dt * max(np.max(np.abs(u[a])) / state.grid.spacing[a] for a in (0, 1)))


def euler2d_run(state: FlowState2D, t_end: float, dt: float, sample_every: int = 1,
                max_cfl: float = 1.0) -> list[FlowState2D]:
    """Fixed-step integration; the CFL number is checked at every recorded sample."""
    n = int(round((t_end - state.time) / dt))
    out = [state]
    s = state
    for i in range(1, n + 1):
        if i == 1 or (i - 1) % sample_every == 0:
            c = cfl_number(s, dt)
            if c > max_cfl:
                raise ValueError(f"CFL number {c:.3f} exceeds {max_cfl} at t = {s.time:.4g}")
        s = euler2d_step(s, dt)
        if i % sample_every == 0 or i == n:
            out.append(s)
    return out


def nse_energy_balance(trajectory: Sequence[FlowState2D]) -> float:
    """|E(T) + nu int_0^T int |grad u|^2 - E(0)| / E(0) with Simpson quadrature in time."""
    t = np.array([s.time for s in trajectory])
    if len(t) < 3:
        raise ValueError("energy balance needs at least three samples")
    steps = np.diff(t)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise ValueError("trajectory samples must be uniform in time")
    nu = trajectory[0].nu
    e0 = trajectory[0].energy()
    e1 = trajectory[-1].energy()
    diss = 0.0
    if nu > 0:
        diss = nu * float(simpson([s.dissipation_density() for s in trajectory], x=t))
    lhs = e1 + diss
    if e0 == 0.0:
        return 0.0 if lhs == 0.0 else math.inf
    return abs(lhs - e0) / e0
