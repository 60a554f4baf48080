"""Convex integration for Div(rho u) = Div u = 0 with Div(rho^2 u) = f.

States are 3x3 matrices whose rows are (m, u, w); the linear relaxation asks
for row-wise Div = (0, 0, f) and the constitutive set is

    K_C = {(rho v, v, rho^2 v) : 1/C <= rho <= C, 1/C <= |v| <= C}.

Every point of K_C has the form a(rho) (x) v with a(rho) = (rho, 1, rho^2), so
differences of such points have rank at most two: any two of them can be
joined by a divergence-free plane wave.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
import numpy as np

from .errors import FieldError, GeometryError
from .grid import (MatrixField, PeriodicGrid, ScalarField, VectorField, curl, divergence,
                   gradient, leray_project, vector_potential)

RHO1 = 1.0 + math.sqrt(6.0)
RHO2 = 1.0 + math.sqrt(6.0) / 3.0
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def a_vec(rho):
    """(rho, 1, rho^2), broadcasting over arrays of rho (last axis is the vector)."""
    rho = np.asarray(rho, float)
    return np.stack([rho, np.ones_like(rho), rho**2], axis=-1)


def k_point(rho: float, v) -> np.ndarray:
    return np.outer(a_vec(rho), np.asarray(v, float))


def state_triple(m, u, w) -> np.ndarray:
    return np.array([m, u, w], dtype=float)


# ---------------------------------------------------------------------------
# wave cone


def in_wave_cone(U, tol: float = 1e-9) -> bool:
    """|det U| <= tol * |U|^3 (Frobenius), i.e. rank at most two."""
    U = np.asarray(U, float)
    norm = np.linalg.norm(U)
    if norm == 0:
        return True
    return abs(np.linalg.det(U)) <= tol * norm**3


def rank2_direction(U, tol: float = 1e-9) -> np.ndarray:
    """Unit xi with U xi = 0.

    The kernel is taken from the SVD.  When it is more than one-dimensional
    the coordinate axis with the largest projection onto it (lowest index on
    ties) is projected and normalised.  Signs make the first nonzero entry
    positive.
    """
    U = np.asarray(U, float)
    if not in_wave_cone(U, tol):
        raise GeometryError(f"matrix has full rank (det {np.linalg.det(U):.3e}); no plane-wave direction")
    _, s, vt = np.linalg.svd(U)
    scale = max(s[0], 1e-300)
    null = vt[s <= 1e-8 * scale] if s[0] > 0 else np.eye(3)
    if null.shape[0] == 0:
        null = vt[-1:]
    if null.shape[0] == 1:
        xi = null[0]
    else:
        proj = null.T @ null
        norms = np.linalg.norm(proj, axis=0)
        j = int(np.argmax(np.round(norms, 12)))
        xi = proj[:, j]
    xi = xi / np.linalg.norm(xi)
    nz = np.flatnonzero(np.abs(xi) > 1e-12)
    if nz.size and xi[nz[0]] < 0:
        xi = -xi
    return xi


# ---------------------------------------------------------------------------
# constitutive set


@dataclass(frozen=True)
class ConstitutiveSet:
    C: float

    def __post_init__(self) -> None:
        if not self.C > 1:
            raise ValueError(f"C must exceed 1, got {self.C}")

    def contains(self, U, tol: float = 1e-9) -> bool:
        """Membership up to a relative tolerance on the defining equalities and bounds."""
        U = np.asarray(U, float)
        m, u, w = U
        nu = np.linalg.norm(u)
        lo, hi = 1.0 / self.C, self.C
        if nu < lo * (1 - tol) or nu > hi * (1 + tol):
            return False
        rho = float(np.dot(m, u) / nu**2)
        if rho < lo * (1 - tol) or rho > hi * (1 + tol):
            return False
        scale = max(1.0, np.linalg.norm(U))
        return (np.linalg.norm(m - rho * u) <= tol * scale
                and np.linalg.norm(w - rho**2 * u) <= tol * scale)

    def project(self, U):
        return kc_project(U, self.C)


def _inner(Us: np.ndarray, rho: np.ndarray, C: float):
    """Best v at fixed rho (clamped radially) and the squared distance."""
    m, u, w = Us[:, 0], Us[:, 1], Us[:, 2]
    r = rho[:, None]
    denom = 1.0 + r**2 + r**4
    v = (r * m + u + r**2 * w) / denom
    n = np.linalg.norm(v, axis=1, keepdims=True)
    target = np.clip(n, 1.0 / C, C)
    safe = np.where(n > 0, n, 1.0)
    direction = np.where(n > 0, v / safe, np.array([1.0, 0.0, 0.0]))
    v = direction * target
    d2 = (np.sum((m - r * v) ** 2, axis=1) + np.sum((u - v) ** 2, axis=1)
          + np.sum((w - r**2 * v) ** 2, axis=1))
    return v, d2


def kc_project_batch(Us: np.ndarray, C: float, scan: int = 96, tol: float = 1e-10):
    """Vectorised projection of an (n, 3, 3) stack onto K_C.

    Returns (distance, rho, v).  A log-spaced scan over rho picks the basin,
    golden-section search refines it; the distance is to the returned point,
    hence an upper bound on the true distance.
    """
    Us = np.asarray(Us, float).reshape(-1, 3, 3)
    n = Us.shape[0]
    grid = np.exp(np.linspace(-math.log(C), math.log(C), scan))
    best = np.full(n, np.inf)
    idx = np.zeros(n, dtype=int)
    for j, r in enumerate(grid):
        _, d2 = _inner(Us, np.full(n, r), C)
        better = d2 < best
        best[better] = d2[better]
        idx[better] = j
    lo = grid[np.maximum(idx - 1, 0)]
    hi = grid[np.minimum(idx + 1, scan - 1)]
    a, b = lo.copy(), hi.copy()
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc = _inner(Us, c, C)[1]
    fd = _inner(Us, d, C)[1]
    while np.max(b - a) > tol:
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c = b - GOLDEN * (b - a)
        d = a + GOLDEN * (b - a)
        fc = _inner(Us, c, C)[1]
        fd = _inner(Us, d, C)[1]
    rho = 0.5 * (a + b)
    v, d2 = _inner(Us, rho, C)
    # the scan point itself may be better at the ends of the range
    r_scan = grid[idx]
    v_scan, d2_scan = _inner(Us, r_scan, C)
    use_scan = d2_scan < d2
    rho = np.where(use_scan, r_scan, rho)
    v = np.where(use_scan[:, None], v_scan, v)
    d2 = np.where(use_scan, d2_scan, d2)
    return np.sqrt(np.maximum(d2, 0.0)), rho, v


def kc_project(U, C: float):
    """(distance, rho*, v*) for a single 3x3 state."""
    if not C > 1:
        raise ValueError("C must exceed 1")
    d, r, v = kc_project_batch(np.asarray(U, float)[None], C)
    return float(d[0]), float(r[0]), v[0]


# ---------------------------------------------------------------------------
# laminates


@dataclass
class LaminateNode:
    """Split tree node; leaves carry no children."""

    value: np.ndarray
    children: list[tuple[float, "LaminateNode"]] = field(default_factory=list)
    direction: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class Laminate:
    root: LaminateNode

    @property
    def leaves(self) -> list[tuple[float, np.ndarray]]:
        out: list[tuple[float, np.ndarray]] = []

        def walk(node, w):
            if node.is_leaf:
                out.append((w, node.value))
            for frac, child in node.children:
                walk(child, w * frac)

        walk(self.root, 1.0)
        return out

    @property
    def barycenter(self) -> np.ndarray:
        return sum(w * v for w, v in self.leaves)

    def spread(self) -> float:
        """sum_i lambda_i |U_i - U| (Frobenius)."""
        U = self.root.value
        return float(sum(w * np.linalg.norm(v - U) for w, v in self.leaves))

    def certify(self, det_tol: float = 1e-9, bary_tol: float = 1e-10) -> list[str]:
        """Problems with the split tree; empty when every node is a valid rank-2 split."""
        problems = []

        def walk(node, path):
            if node.is_leaf:
                return
            fracs = [f for f, _ in node.children]
            if len(node.children) != 2:
                problems.append(f"{path}: node has {len(node.children)} children")
            if abs(sum(fracs) - 1) > 1e-12 or min(fracs) <= 0:
                problems.append(f"{path}: child weights {fracs} are not a probability vector")
            bary = sum(f * c.value for f, c in node.children)
            scale = max(1.0, np.linalg.norm(node.value))
            if np.linalg.norm(bary - node.value) > bary_tol * scale:
                problems.append(f"{path}: barycenter mismatch {np.linalg.norm(bary - node.value):.3e}")
            if len(node.children) == 2:
                diff = node.children[0][1].value - node.children[1][1].value
                if not in_wave_cone(diff, det_tol):
                    problems.append(f"{path}: split difference has full rank")
                if node.direction is not None and np.linalg.norm(diff @ node.direction) > 1e-8 * max(1.0, np.linalg.norm(diff)):
                    problems.append(f"{path}: recorded direction is not in the kernel")
            for i, (_, c) in enumerate(node.children):
                walk(c, f"{path}.{i}")

        walk(self.root, "root")
        return problems

    def total_weight(self) -> float:
        return float(sum(w for w, _ in self.leaves))


def _split(value, children):
    a, b = children[0][1].value, children[1][1].value
    diff = a - b
    direction = rank2_direction(diff) if np.linalg.norm(diff) > 0 else None
    return LaminateNode(np.asarray(value, float), list(children), direction)


def geom1_constant(w) -> float:
    """Smallest admissible C for the three-leaf decomposition of (0, 0, w)."""
    nw = float(np.linalg.norm(w))
    return max(3 * nw, RHO1, nw) * (1 + 1e-9)


def geom1_decompose(w) -> Laminate:
    """(0,0,w) = 1/2 (w,w,w) + 1/4 (rho1 w, w, rho1^2 w) + 1/4 (-3 rho2 w, -3 w, -3 rho2^2 w)."""
    w = np.asarray(w, float)
    if np.linalg.norm(w) < 1 - 1e-12:
        raise GeometryError(f"|w| = {np.linalg.norm(w):.6g} is below 1", distance=None)
    plus = LaminateNode(state_triple(w, w, w))
    b1 = LaminateNode(k_point(RHO1, w))
    b2 = LaminateNode(k_point(RHO2, -3 * w))
    minus = _split(state_triple(-w, -w, w), [(0.5, b1), (0.5, b2)])
    root = _split(state_triple(0 * w, 0 * w, w), [(0.5, plus), (0.5, minus)])
    return Laminate(root)


def sqrt_modulus(kappa: float):
    """h(t) = kappa sqrt(t)."""
    return lambda t: kappa * np.sqrt(np.maximum(t, 0.0))


#: modulus constant of the general decomposition (frozen; see geom2_decompose)
KAPPA = 12.0


def _two_leaf(U, Cp: float):
    """Rank-2 U whose column space holds a(r), a(r') with r, r' admissible: exact 2-leaf split."""
    U = np.asarray(U, float)
    uu, s, _ = np.linalg.svd(U)
    if s[2] > 1e-10 * max(s[0], 1e-300) or s[1] <= 1e-10 * max(s[0], 1e-300):
        return None
    nvec = uu[:, 2]
    roots = np.roots([nvec[2], nvec[0], nvec[1]])
    roots = [float(r.real) for r in roots if abs(r.imag) < 1e-12 and 1 / Cp <= r.real <= Cp]
    if len(roots) != 2 or abs(roots[0] - roots[1]) < 1e-9:
        return None
    A = np.stack([a_vec(roots[0]), a_vec(roots[1])], axis=1)
    Q, *_ = np.linalg.lstsq(A, U, rcond=None)
    if np.linalg.norm(A @ Q - U) > 1e-10 * max(1.0, np.linalg.norm(U)):
        return None
    p, q = Q
    s_mag = np.linalg.norm(p) + np.linalg.norm(q)
    if not (1 / Cp <= s_mag <= Cp) or np.linalg.norm(p) == 0 or np.linalg.norm(q) == 0:
        return None
    lam = np.linalg.norm(p) / s_mag
    L1 = LaminateNode(k_point(roots[0], p / lam))
    L2 = LaminateNode(k_point(roots[1], q / (1 - lam)))
    return Laminate(_split(U, [(lam, L1), (1 - lam, L2)]))


def geom2_decompose(U, C: float, eps: float, kappa: float = KAPPA) -> Laminate:
    """Rank-2 laminate with barycenter U and leaves in K_{C+eps}.

    Cases, in order: U already in K_C (single leaf); U = (0,0,w) with
    |w| >= 1 (the three-leaf decomposition); rank-2 U spanned by two
    admissible a(r) (two leaves); otherwise the general four-leaf
    construction: write U = sum_i a(r_i) (x) q_i with r_2 the projected
    density and r_1 < r_2 < r_3 admissible, split

        U = mu A + (1-mu) B,  A = a_2 q_2 + a_1 q_1/mu,  B = a_2 q_2 + a_3 q_3/(1-mu)

    (A - B has rank two) and split A and B once more into two points of K.
    Inputs whose leaves would leave K_{C+eps}, or whose spread exceeds
    h(dist(U, K_C)) = kappa sqrt(dist), are rejected with GeometryError
    carrying the distance.
    """
    U = np.asarray(U, float)
    Cp = C + eps
    dist, rho, v = kc_project(U, C)
    h = sqrt_modulus(kappa)
    if ConstitutiveSet(C).contains(U, 1e-10):
        return Laminate(LaminateNode(U.copy()))
    m, u, w = U
    if np.allclose(m, 0, atol=1e-14) and np.allclose(u, 0, atol=1e-14) and np.linalg.norm(w) >= 1:
        if geom1_constant(w) > Cp:
            raise GeometryError(f"(0,0,w) with |w| = {np.linalg.norm(w):.4g} needs C >= {geom1_constant(w):.4g}",
                                distance=dist)
        return geom1_decompose(w)
    two = _two_leaf(U, Cp)
    if two is not None:
        return two
    lam_leaves = _four_leaf(U, rho, Cp)
    if lam_leaves is None:
        raise GeometryError(f"no admissible four-leaf split (distance {dist:.4g} to K_C)", distance=dist)
    lam = lam_leaves
    if lam.spread() > h(dist) * (1 + 1e-12):
        raise GeometryError(f"spread {lam.spread():.4g} exceeds h(dist) = {float(h(dist)):.4g}", distance=dist)
    return lam


def _radius_pairs(rho: float, Cp: float):
    lo, hi = 1.0 / Cp, Cp
    for beta in (1.2, 1.5, 2.0, 3.0, 5.0, 10.0):
        r1, r3 = rho / beta, rho * beta
        if r1 < lo:
            r1, r3 = lo, lo * beta * beta
        if r3 > hi:
            r1, r3 = hi / (beta * beta), hi
        r1 = max(r1, lo)
        if r3 - r1 > 1e-6 and min(abs(r1 - rho), abs(r3 - rho)) > 1e-6:
            yield r1, r3


def _four_leaf_params(U: np.ndarray, rho: float, Cp: float):
    """Admissible (r1, r3, q1, q2, q3, mu, lam) of least spread, or None."""
    best, best_spread = None, np.inf
    for r1, r3 in _radius_pairs(rho, Cp):
        A = np.stack([a_vec(r1), a_vec(rho), a_vec(r3)], axis=1)
        Q = np.linalg.solve(A, U)
        q1, q2, q3 = Q
        n1, n2, n3 = (np.linalg.norm(q) for q in Q)
        if n1 + n3 == 0:
            continue
        mu = n1 / (n1 + n3)
        for scale in (1.0, 2.0, 0.5, 4.0):
            target = min(max(scale * n2, 1 / Cp), Cp)
            lam = (n1 + n3) / target
            if not 0 < lam <= 0.5 or not 1 / Cp <= n2 / (1 - lam) <= Cp:
                continue
            near = k_point(rho, q2 / (1 - lam))
            spread = (1 - lam) * np.linalg.norm(near - U)
            if mu > 0:
                spread += mu * lam * np.linalg.norm(k_point(r1, q1 / (mu * lam)) - U)
            if mu < 1:
                spread += (1 - mu) * lam * np.linalg.norm(k_point(r3, q3 / ((1 - mu) * lam)) - U)
            if spread < best_spread:
                best, best_spread = (r1, r3, q1, q2, q3, mu, lam), spread
    return best


def _four_leaf(U: np.ndarray, rho: float, Cp: float) -> Laminate | None:
    params = _four_leaf_params(U, rho, Cp)
    if params is None:
        return None
    r1, r3, q1, q2, q3, mu, lam = params
    near = k_point(rho, q2 / (1 - lam))
    if mu <= 0 or mu >= 1:
        # only one far radius carries weight: a single split suffices
        r_far, q_far = (r1, q1) if mu >= 1 else (r3, q3)
        far = LaminateNode(k_point(r_far, q_far / lam))
        return Laminate(_split(U, [(1 - lam, LaminateNode(near)), (lam, far)]))
    a_node = _split(k_point(rho, q2) + np.outer(a_vec(r1), q1 / mu),
                    [(1 - lam, LaminateNode(near.copy())), (lam, LaminateNode(k_point(r1, q1 / (mu * lam))))])
    b_node = _split(k_point(rho, q2) + np.outer(a_vec(r3), q3 / (1 - mu)),
                    [(1 - lam, LaminateNode(near.copy())), (lam, LaminateNode(k_point(r3, q3 / ((1 - mu) * lam))))])
    return Laminate(_split(U, [(mu, a_node), (1 - mu, b_node)]))


# ---------------------------------------------------------------------------
# oscillations and localisation


def square_profile(s, lam: float, n_modes: int, transition: float = 0.0):
    """Band-limited 1-periodic profile of mean 0: about 1 - lam on [0, lam), -lam elsewhere.

    Fourier series of the indicator minus lam, truncated after ``n_modes``
    and damped by sinc(j tau / 2)^2, which spreads each jump over a width of
    about ``transition``.
    """
    if not 0 < lam < 1:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    s = np.asarray(s, float)
    out = np.zeros_like(s)
    for j in range(1, n_modes + 1):
        damp = np.sinc(j * transition / 2.0) ** 2
        a = math.sin(2 * math.pi * j * lam) / (math.pi * j)
        b = (1 - math.cos(2 * math.pi * j * lam)) / (math.pi * j)
        out += damp * (a * np.cos(2 * math.pi * j * s) + b * np.sin(2 * math.pi * j * s))
    return out


def lattice_vector(xi, max_entry: int = 8) -> np.ndarray:
    """Primitive integer vector parallel to xi (FieldError if none with small entries)."""
    xi = np.asarray(xi, float)
    xi = xi / np.max(np.abs(xi))
    for scale in range(1, max_entry + 1):
        k = xi * scale
        if np.max(np.abs(k - np.round(k))) < 1e-9:
            k = np.round(k).astype(int)
            return k // np.gcd.reduce(np.abs(k[k != 0]))
    raise FieldError(f"direction {xi} is not a lattice direction with entries <= {max_entry}")


def plane_wave_oscillation(grid: PeriodicGrid, Ubar, U1, U2, lam: float, xi, freq: int,
                           transition: float = 0.1) -> MatrixField:
    """Ubar + h(freq k.x / L)(U2 - U1) with h a band-limited square profile.

    k is the primitive integer vector parallel to xi (scaled by the axis
    lengths), so the wave is periodic with ``freq`` periods along k; the
    profile keeps only harmonics below the Nyquist limit of every axis, so
    the spectral row divergence vanishes up to round-off.
    """
    if grid.dim != 3:
        raise FieldError("plane waves are built on three-dimensional grids")
    Ubar, U1, U2 = (np.asarray(M, float) for M in (Ubar, U1, U2))
    xi = np.asarray(xi, float)
    xi = xi / np.linalg.norm(xi)
    diff = U2 - U1
    if np.linalg.norm(diff @ xi) > 1e-8 * max(1.0, np.linalg.norm(diff)):
        raise GeometryError(f"direction is not in the kernel of U2 - U1 (residual {np.linalg.norm(diff @ xi):.3e})")
    kint = freq * lattice_vector(xi * np.array(grid.lengths))
    top = max(abs(int(v)) for v in kint)
    if top == 0:
        raise FieldError("zero wave vector")
    n_modes = min((n // 2 - 1) // abs(int(v)) for n, v in zip(grid.shape, kint) if v != 0)
    if n_modes < 1:
        raise FieldError("wave vector is not resolved on this grid")
    x = grid.coords()
    s = sum(kint[a] * x[a] / grid.lengths[a] for a in range(3))
    h = np.broadcast_to(square_profile(s, lam, n_modes, transition), grid.shape)
    data = Ubar[:, :, None, None, None] + h[None, None] * diff[:, :, None, None, None]
    return MatrixField(grid, data)


def smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(np.asarray(t, float), 0.0, 1.0)
    a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
    b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def _periodic_offset(x, c, L):
    return (x - c + 0.5 * L) % L - 0.5 * L


def cube_cutoff(grid: PeriodicGrid, lo, hi, margin: float) -> ScalarField:
    """Smooth cutoff equal to 1 on [lo + margin, hi - margin] and 0 outside [lo, hi] (per axis, periodic)."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    out = np.ones(grid.shape)
    for a, x in enumerate(grid.coords()):
        L = grid.lengths[a]
        width = hi[a] - lo[a]
        if width >= L:
            continue
        if not 0 < margin <= width / 2:
            raise ValueError(f"margin {margin} must lie in (0, {width / 2}]")
        t = _periodic_offset(x, 0.5 * (lo[a] + hi[a]), L) + 0.5 * width
        out = out * (smooth_step(t / margin) * smooth_step((width - t) / margin))
    return ScalarField(grid, out)


def localize(U: MatrixField, lo, hi, margin: float, tol: float = 1e-8) -> MatrixField:
    """Row-wise curl(phi Psi) with curl Psi = U and phi the cube cutoff.

    Rows must be solenoidal with zero mean.  The spectral curl keeps the
    output exactly divergence-free; on the shrunk cube it equals U, outside
    the cube it vanishes, both up to the spectral tail of phi Psi.
    """
    g = U.grid
    phi = cube_cutoff(g, lo, hi, margin).data
    rows = []
    for r in U.rows():
        mean = r.data.reshape(3, -1).mean(axis=1)
        if np.max(np.abs(mean)) > tol * max(1.0, np.max(np.abs(r.data))):
            raise FieldError(f"row mean {mean} is not zero; only mean-free rows can be localised")
        psi, _ = vector_potential(r, tol=tol * max(1.0, float(np.sqrt(g.size))))
        rows.append(curl(VectorField(g, phi * psi.data)).data)
    return MatrixField(g, np.stack(rows))


# ---------------------------------------------------------------------------
# iteration


@dataclass(frozen=True)
class IterationSchedule:
    """Bookkeeping of the constants of the iteration.

    ``C_n = C0 + 1 - 2^-n`` increases strictly to ``C = C0 + 1``; stage k
    builds its leaves in ``K_{C_k}`` and is accepted when the mean of
    ``h(dist(U_k, K_{C_{k-1}}))`` is below ``deltas[k-1]`` and the mean
    distance decreased.  ``cube_cells[k-1]`` is the side of the partition
    cubes in grid cells, ``frequencies[k-1]`` the number of root periods per
    cube side, ``margin_cells`` the cutoff ramp width.
    """

    C0: float
    deltas: tuple[float, ...]
    cube_cells: tuple[int, ...]
    frequencies: tuple[float, ...]
    margin_cells: int = 2
    inner_ratio: float = 2.0
    kappa: float = KAPPA
    greedy: bool = False

    def __post_init__(self) -> None:
        if not self.C0 > 1:
            raise ValueError(f"C0 must exceed 1, got {self.C0}")
        n = len(self.deltas)
        if len(self.cube_cells) != n or len(self.frequencies) != n:
            raise ValueError("deltas, cube_cells and frequencies need one entry per stage")
        waves = [c / f for c, f in zip(self.cube_cells, self.frequencies)]
        for a, b in zip(waves, waves[1:]):
            if not b < a / 2:
                raise ValueError(f"wavelengths {waves} (cells) do not halve from stage to stage")
        if any(d <= 0 for d in self.deltas):
            raise ValueError("stage tolerances must be positive")

    @property
    def stages(self) -> int:
        return len(self.deltas)

    @property
    def C(self) -> float:
        return self.C0 + 1.0

    def C_n(self, n: int) -> float:
        return self.C - 2.0**-n

    def eps_n(self, n: int) -> float:
        return self.C_n(n + 1) - self.C_n(n)

    def wavelength(self, k: int) -> float:
        """Root wavelength of stage k (1-based) in cells."""
        return self.cube_cells[k - 1] / self.frequencies[k - 1]

    def h(self, t):
        return sqrt_modulus(self.kappa)(t)


def default_schedule(w0: VectorField | float, stages: int = 3) -> IterationSchedule:
    wmax = w0 if isinstance(w0, (int, float)) else float(np.max(np.sqrt(np.sum(w0.data**2, axis=0))))
    cubes = (32, 16, 8, 4, 2)[:stages]
    freqs = (2.0, 2.5, 3.0, 3.5, 4.0)[:stages]
    return IterationSchedule(geom1_constant([0, 0, wmax]), tuple([np.inf] * stages), cubes, freqs)


@dataclass
class LinearLaminate:
    """Leaves a(r_i) (x) (G_i U): linear in the local state, with a fixed split tree.

    Leaf order and tree: ((leaf0, leaf1) weight mu, (leaf2, leaf3) weight 1-mu),
    child splits with inner weight ``lam`` on leaves 1 and 3.  ``directions``
    holds the root and the two child kernels (computed at the cube state).
    """

    radii: np.ndarray       # (4,)
    G: np.ndarray           # (4, 3) row combinations
    mu: float
    lam_a: float
    lam_b: float
    directions: np.ndarray  # (3, 3)

    def leaves(self, Us: np.ndarray) -> np.ndarray:
        """(n, 4, 3, 3) leaves for an (n, 3, 3) stack of states."""
        v = np.einsum("ij,njc->nic", self.G, Us)
        return a_vec(self.radii)[None, :, :, None] * v[:, :, None, :]

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.mu * (1 - self.lam_a), self.mu * self.lam_a,
                         (1 - self.mu) * (1 - self.lam_b), (1 - self.mu) * self.lam_b])


def linear_laminate(Ubar, C: float, eps: float, kappa: float = KAPPA) -> LinearLaminate:
    """Laminate structure for a cube state, reusable at nearby states.

    For states (0, 0, w) the three-leaf decomposition (as a four-leaf tree
    whose first child is the single leaf (w, w, w)); otherwise the general
    four-leaf decomposition with its radii and weights frozen.
    """
    Ubar = np.asarray(Ubar, float)
    m, u, w = Ubar
    if np.allclose(m, 0, atol=1e-12) and np.allclose(u, 0, atol=1e-12):
        if np.linalg.norm(w) < 1 or geom1_constant(w) > C + eps:
            raise GeometryError(f"(0,0,w) with |w| = {np.linalg.norm(w):.4g} cannot be split in K_{C + eps:.4g}",
                                distance=kc_project(Ubar, C)[0])
        lam = geom1_decompose(w)
        d_root = lam.root.direction
        d_minus = lam.root.children[1][1].direction
        e3 = np.array([0.0, 0.0, 1.0])
        return LinearLaminate(np.array([1.0, 1.0, RHO1, RHO2]),
                              np.array([e3, e3, e3, -3 * e3]), 0.5, 0.0, 0.5,
                              np.stack([d_root, d_root, d_minus]))
    dist, rho, _ = kc_project(Ubar, C)
    params = _four_leaf_params(Ubar, rho, C + eps)
    if params is None:
        raise GeometryError(f"no admissible four-leaf split (distance {dist:.4g} to K_C)", distance=dist)
    r1, r3, q1, q2, q3, mu, lam = params
    A = np.stack([a_vec(r1), a_vec(rho), a_vec(r3)], axis=1)
    Ainv = np.linalg.inv(A)
    mu = min(max(mu, 1e-12), 1 - 1e-12)
    G = np.stack([Ainv[1] / (1 - lam), Ainv[0] / (mu * lam), Ainv[1] / (1 - lam), Ainv[2] / ((1 - mu) * lam)])
    out = LinearLaminate(np.array([rho, r1, rho, r3]), G, mu, lam, lam,
                         np.stack([_unit_cross(q1, q3), _unit_cross(q2, q1), _unit_cross(q2, q3)]))
    spread = float(np.sum(out.weights * np.linalg.norm(out.leaves(Ubar[None])[0] - Ubar, axis=(1, 2))))
    if spread > kappa * math.sqrt(dist) * (1 + 1e-12):
        raise GeometryError(f"spread {spread:.4g} exceeds h(dist) = {kappa * math.sqrt(dist):.4g}", distance=dist)
    return out


def _unit_cross(a, b) -> np.ndarray:
    """Unit vector along a x b, first nonzero entry positive (e1 when a and b are parallel)."""
    c = np.cross(a, b)
    n = np.linalg.norm(c)
    if n <= 1e-300:
        return np.array([1.0, 0.0, 0.0])
    c = c / n
    nz = np.flatnonzero(np.abs(c) > 1e-12)
    return -c if c[nz[0]] < 0 else c


def _pattern_index(lam: LinearLaminate, disp: np.ndarray, freq: float, inner: float) -> np.ndarray:
    """Leaf index at displacements ``disp`` (3, ...) from the cube centre."""
    ph = [np.tensordot(lam.directions[j], disp, axes=1) for j in range(3)]
    root_a = (freq * ph[0]) % 1.0 < lam.mu
    far_a = (inner * freq * ph[1]) % 1.0 < lam.lam_a
    far_b = (inner * freq * ph[2]) % 1.0 < lam.lam_b
    return np.where(root_a, np.where(far_a, 1, 0), np.where(far_b, 3, 2))


@dataclass
class StageDiagnostics:
    stage: int
    C_n: float
    mean_dist: float
    max_dist: float
    weak_residual_divU: float
    weak_residual_divRhoU: float
    weak_residual_divW: float
    renorm_defect_gap: float
    renorm_gap_bound: float
    h_integral: float
    accepted: bool
    failing_cubes: list = field(default_factory=list)
    note: str = ""

    COLUMNS = ("stage", "C_n", "mean_dist", "max_dist", "weak_residual_divU",
               "weak_residual_divRhoU", "renorm_defect_gap")

    def row(self) -> dict:
        return {c: getattr(self, c) for c in self.COLUMNS}


def weak_residuals(U: MatrixField, f: ScalarField, battery) -> tuple[float, float, float]:
    """max over test functions of |<grad phi, row>| for m and u, and |<grad phi, w> + <phi, f>|."""
    g = U.grid
    worst = [0.0, 0.0, 0.0]
    for phi in battery:
        gp = gradient(phi).data
        for r in range(3):
            val = float(np.sum(gp * U.data[r]) * g.cell_volume)
            if r == 2:
                val += float(np.sum(phi.data * f.data) * g.cell_volume)
            worst[r] = max(worst[r], abs(val))
    return worst[1], worst[0], worst[2]


def renorm_gap(U: MatrixField, f: ScalarField, C: float, battery):
    """Largest |<phi, Div(rho^2 u)> - <phi, f>| over the battery and its distance bound.

    (rho, u) is read off pointwise by kc_project; the pairing is the weak
    form -<grad phi, rho^2 u>.  Since <phi, f> = -<grad phi, w>, the gap is
    at most sup|grad phi| * int dist(U, K_C).
    """
    g = U.grid
    mats = U.pointwise()
    dist, rho, v = kc_project_batch(mats, C)
    flux = (rho**2)[:, None] * v
    flux = np.moveaxis(flux, 0, -1).reshape((3,) + g.shape)
    total = float(np.sum(dist) * g.cell_volume)
    gap = bound = 0.0
    for phi in battery:
        gp = gradient(phi).data
        pairing = -float(np.sum(gp * flux) * g.cell_volume)
        target = float(np.sum(phi.data * f.data) * g.cell_volume)
        gap = max(gap, abs(pairing - target))
        bound = max(bound, float(np.max(np.sqrt(np.sum(gp**2, axis=0)))) * total)
    return gap, bound, dist


def _cube_partition(grid: PeriodicGrid, cells: int, offset: int):
    n = grid.shape[0]
    if any(s != n for s in grid.shape) or n % cells:
        raise ValueError(f"cube side {cells} must divide the (cubic) grid size {n}")
    h = grid.spacing[0]
    starts = [((i * cells + offset) % n) * h for i in range(n // cells)]
    for a in starts:
        for b in starts:
            for c in starts:
                lo = np.array([a, b, c])
                yield lo, lo + cells * h


def _partition_weights(grid: PeriodicGrid, lo, hi, ramp: float) -> np.ndarray:
    """Member of a smooth partition of unity subordinate to cubes enlarged by ramp/2."""
    out = np.ones(grid.shape)
    for a, x in enumerate(grid.coords()):
        L = grid.lengths[a]
        width = hi[a] - lo[a]
        if width >= L:
            continue
        t = _periodic_offset(x, 0.5 * (lo[a] + hi[a]), L) + 0.5 * width
        out = out * (smooth_step(t / ramp + 0.5) - smooth_step((t - width) / ramp + 0.5))
    return out


def ci_iterate(w0: VectorField, schedule: IterationSchedule | None = None, stages: int | None = None,
               battery=None, f: ScalarField | None = None):
    """Run the iteration from U^0 = (0, 0, w0).

    Returns ``(iterates, diagnostics)``; ``iterates[0]`` is U^0 and one
    iterate is appended per accepted stage.  A stage whose cube states admit
    no decomposition, or whose distance integral misses its tolerance, is
    reported in the diagnostics and ends the iteration.
    """
    from .battery import TestFunctionBattery

    g = w0.grid
    if g.dim != 3:
        raise FieldError("the iteration runs on three-dimensional grids")
    norms = np.sqrt(np.sum(w0.data**2, axis=0))
    if norms.min() < 1 - 1e-12:
        shift = np.array([0.0, 0.0, 1.0 - norms.min() + np.max(norms)])
        w0 = VectorField(g, w0.data + shift[:, None, None, None])
    if schedule is None:
        schedule = default_schedule(w0, 3 if stages is None else stages)
    n_stages = schedule.stages if stages is None else stages
    if n_stages > schedule.stages:
        raise ValueError(f"schedule has {schedule.stages} stages, {n_stages} requested")
    if f is None:
        f = divergence(w0)
    if battery is None:
        battery = TestFunctionBattery.default(g).fields()
    U = MatrixField(g, np.stack([np.zeros_like(w0.data), np.zeros_like(w0.data), w0.data]))
    iterates = [U]
    diags: list[StageDiagnostics] = []
    prev_mean = np.inf
    h = g.spacing[0]
    disp_axes = g.coords()
    for k in range(1, n_stages + 1):
        # stage k realises laminates supported in K_{C_{k-1}} and is measured against that set
        C_set = schedule.C_n(k - 1)
        base, eps = (C_set, 0.0) if k == 1 else (schedule.C_n(k - 2), C_set - schedule.C_n(k - 2))
        cells = schedule.cube_cells[k - 1]
        freq = schedule.frequencies[k - 1] / (cells * h)
        ramp = schedule.margin_cells * h
        offset = 0 if k % 2 else cells // 2
        mats = U.pointwise()
        correction = np.zeros((3, 3) + g.shape)
        failing = []
        skipped = 0
        for lo, hi in _cube_partition(g, cells, offset):
            phi = _partition_weights(g, lo, hi, ramp)
            ubar = np.tensordot(U.data, phi, axes=3) / phi.sum()
            try:
                lam = linear_laminate(ubar, base, eps, schedule.kappa)
            except GeometryError as exc:
                failing.append((tuple(float(v) for v in lo), exc.distance))
                continue
            centre = 0.5 * (lo + hi)
            disp = np.stack([_periodic_offset(x, c, L) * np.ones(g.shape)
                             for x, c, L in zip(disp_axes, centre, g.lengths)])
            idx = _pattern_index(lam, disp, freq, schedule.inner_ratio).reshape(-1)
            target = lam.leaves(mats)[np.arange(mats.shape[0]), idx]
            piece = _localized_correction(MatrixField.from_pointwise(g, target - mats), phi)
            if schedule.greedy and k > 1:
                support = phi.reshape(-1) > 0
                cur = (U.data + correction).reshape(3, 3, -1)[:, :, support]
                before = kc_project_batch(np.moveaxis(cur, -1, 0), C_set)[0].mean()
                after = kc_project_batch(np.moveaxis(cur + piece.reshape(3, 3, -1)[:, :, support], -1, 0),
                                         C_set)[0].mean()
                if after >= before:
                    skipped += 1
                    continue
            correction += piece
        if failing:
            diags.append(StageDiagnostics(k, C_set, np.nan, np.nan, np.nan, np.nan, np.nan, np.nan, np.nan,
                                          np.nan, False, failing, "geometry rejected"))
            break
        V = MatrixField(g, U.data + correction)
        res_u, res_m, res_w = weak_residuals(V, f, battery)
        gap, bound, dist = renorm_gap(V, f, C_set, battery)
        hint = float(np.mean(schedule.h(dist)))
        mean_d = float(dist.mean())
        changed = bool(np.any(correction != 0))
        ok = changed and hint < schedule.deltas[k - 1] and mean_d < prev_mean
        diags.append(StageDiagnostics(k, C_set, mean_d, float(dist.max()), res_u, res_m, res_w, gap, bound,
                                      hint, ok, [], "; ".join(filter(None, [f"{skipped} cubes skipped" if schedule.greedy else "",
                                                                     "" if ok else "distance criterion missed" if changed
                                                                     else "no cube improved"]))))
        if not ok:
            break
        U = V
        iterates.append(U)
        prev_mean = mean_d
    return iterates, diags


def _localized_correction(D: MatrixField, phi: np.ndarray) -> np.ndarray:
    """Row-wise curl(phi Psi) where curl Psi is the mean-free solenoidal part of D."""
    g = D.grid
    out = []
    for r in D.rows():
        proj = leray_project(r)
        mean = proj.data.reshape(3, -1).mean(axis=1)
        proj = VectorField(g, proj.data - mean[:, None, None, None])
        psi, _ = vector_potential(proj, tol=1e-6 * max(1.0, float(np.max(np.abs(proj.data)))))
        out.append(curl(VectorField(g, phi * psi.data)).data)
    return np.stack(out)
