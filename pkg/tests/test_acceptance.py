"""Acceptance criteria at their stated sizes and tolerances.

Each criterion prints one PASS/FAIL line (also collected into the pytest
terminal summary).  Run standalone with ``python3 tests/test_acceptance.py``.
"""
import math
import time

import numpy as np
import pytest

from conserve_lab.balance import ChannelDomain, boundary_flux_integral, global_from_local, leak_flux_oracle
from conserve_lab.battery import TestFunctionBattery, bump_profile
from conserve_lab.commutators import (EntropyFunction, dl_commutator, euler_defect, fit_scaling,
                                      renormalisation_defect, taylor_gap, taylor_gap_bound)
from conserve_lab.convexint import (RHO1, RHO2, a_vec, ci_iterate, geom1_decompose, in_wave_cone, kc_project,
                                    state_triple)
from conserve_lab.grid import (AnalyticFieldSpec, PeriodicGrid, ScalarField, VectorField, divergence, lp_norm,
                               random_trig_field, sample, solenoidal_weierstrass)
from conserve_lab.mollify import MollifierKernel
from conserve_lab.regularity import BesovFunctionalSpec, EnsembleSet, besov_functional, ensemble_besov
from conserve_lab.solvers import (FlowState2D, burgers_entropy_balance, burgers_exact_ramp, burgers_line,
                                  burgers_run, euler2d_run, nse_energy_balance)

RESULTS: list[str] = []


def burgers_dissipation():
    s = burgers_line(0.0, 1.75, 4096, lambda x: burgers_exact_ramp(x, 0.0))
    traj = burgers_run(s, 2.0, 0.02)
    rate = burgers_entropy_balance(traj, (1.2, 2.0))[2]
    pre = burgers_entropy_balance(traj, (0.0, 0.8))[2]
    ok = abs(rate - 1 / 12) <= 0.02 / 12 and abs(pre) < 1e-4
    return ok, f"rate {rate:.6f} vs {1 / 12:.6f}, pre-shock {pre:.2e}"


def exact_solution_fidelity():
    s = burgers_line(0.0, 1.75, 4096, lambda x: burgers_exact_ramp(x, 0.0))
    mid = [q for q in burgers_run(s, 0.5, 0.25) if abs(q.time - 0.5) < 1e-12][0]
    sl = mid.interior
    err = float(np.sum(np.abs(mid.u[sl] - burgers_exact_ramp(mid.centers[sl], 0.5))) * mid.dx)
    return err < 2e-3, f"L1 error {err:.2e} at t = 0.5"


def diperna_lions_limit():
    g = PeriodicGrid.uniform(2048, 2)
    x, y = g.coords()
    rho = ScalarField(g, np.broadcast_to(1.2 + 0.3 * np.cos(2 * np.pi * x) * np.cos(2 * np.pi * y), g.shape))
    u = VectorField(g, np.stack([np.broadcast_to(np.sin(2 * np.pi * x), g.shape), np.zeros(g.shape)]))
    r = dl_commutator(rho, u, MollifierKernel(g, 1 / 256)).field_value
    limit_err = lp_norm(r - rho * divergence(u), 1)
    del rho, u, r
    h = PeriodicGrid.uniform(512, 2)
    x, y = h.coords()
    rho = ScalarField(h, np.broadcast_to(np.cos(2 * np.pi * x), h.shape))
    shear = VectorField(h, np.stack([np.broadcast_to(np.sin(2 * np.pi * y), h.shape), np.zeros(h.shape)]))
    ladder = [dl_commutator(rho, shear, MollifierKernel(h, e)).l1_norm for e in (1 / 8, 1 / 16, 1 / 32, 1 / 64)]
    decreasing = all(b < a for a, b in zip(ladder, ladder[1:]))
    return limit_err < 1e-2 and decreasing, f"limit error {limit_err:.2e}, solenoidal ladder {np.round(ladder, 8)}"


def cet_exponent(realisations=32):
    g = PeriodicGrid.uniform(4096, 1)
    x = g.coords()[0]
    phi = ScalarField(g, bump_profile((x - 0.5) / 0.3))
    eps = [2.0**-k for k in range(4, 10)]
    eta = EntropyFunction.quadratic()
    vals = np.empty((realisations, len(eps)))
    for s in range(realisations):
        rho = sample(AnalyticFieldSpec("weierstrass", {"alpha": 0.45, "octaves": 10, "seed": 2 * s + 1}), g)
        u = sample(AnalyticFieldSpec("weierstrass", {"alpha": 0.45, "octaves": 10, "seed": 2 * s + 2}), g)
        vals[s] = [renormalisation_defect(rho, VectorField(g, u.data[None]), eta, MollifierKernel(g, e), phi)
                   for e in eps]
    rms = np.sqrt(np.mean(vals**2, axis=0))
    rep = fit_scaling(list(zip(eps, rms)), predicted=0.35)
    ok = abs(rep.fitted_exponent - 0.35) <= 0.2 and rep.fit_quality >= 0.9
    return ok, f"exponent {rep.fitted_exponent:.3f} (predicted 0.35), R^2 {rep.fit_quality:.3f}"


def euler_defect_exponent():
    g = PeriodicGrid.uniform(1024, 2)
    u = solenoidal_weierstrass(g, 0.4, 7, seed=0)
    one = ScalarField(g, np.ones(g.shape))
    eps = [2.0**-k for k in range(3, 9)]
    rep = fit_scaling([(e, euler_defect(u, None, MollifierKernel(g, e), one)) for e in eps], predicted=0.2)
    ok = rep.is_decreasing() and abs(rep.fitted_exponent - 0.2) <= 0.2
    return ok, f"exponent {rep.fitted_exponent:.3f} (predicted 0.2), R^2 {rep.fit_quality:.3f}"


def taylor_gap_inequality(fields=200):
    rng = np.random.default_rng(6)
    g = PeriodicGrid.uniform(64, 2)
    kern = MollifierKernel(g, 1 / 8)
    worst_gap, worst_ratio = -np.inf, 0.0
    for _ in range(fields):
        w = random_trig_field(g, rng, 4)
        amp = float(np.max(np.abs(w.data)))
        rho = w * (rng.uniform(0.2, 0.9) / amp) + 1.0
        gap = taylor_gap(lambda s: s ** (5 / 3), rho, kern).data
        bound = taylor_gap_bound(lambda s: (10 / 9) * s ** (-1 / 3), rho, kern).data
        worst_gap = max(worst_gap, float(gap.max()))
        worst_ratio = max(worst_ratio, float(np.max(np.abs(gap) - bound)))
    ok = worst_gap <= 1e-12 and worst_ratio <= 1e-12
    return ok, f"max gap {worst_gap:.2e}, max |gap| - bound {worst_ratio:.2e}"


def conservation_2d():
    g = PeriodicGrid.uniform(256, 2)
    tg = sample(AnalyticFieldSpec("taylor-green", {}), g)
    tr = euler2d_run(FlowState2D.from_velocity(tg), 1.0, 1e-3, sample_every=1000)
    drift = abs(tr[-1].energy() / tr[0].energy() - 1)
    resid = nse_energy_balance(euler2d_run(FlowState2D.from_velocity(tg, 0.01), 1.0, 1e-3, sample_every=10))
    return drift < 1e-8 and resid < 1e-6, f"inviscid drift {drift:.2e}, viscous residual {resid:.2e}"


def boundary_cutoff():
    dom = ChannelDomain(16, 4096)
    deltas = [1 / 8, 1 / 16, 1 / 32, 1 / 64, 1 / 128]
    zero = dom.scalar(lambda x1, x2: 0 * x1 + 0 * x2)
    shear = dom.vector(lambda x1, x2: (np.sin(2 * np.pi * x2) + 0 * x1, 0 * x2))
    shear_ok = all(boundary_flux_integral(dom, shear, zero, d)[0] == 0.0 for d in deltas)
    leak_u = dom.vector(lambda x1, x2: (0 * x2, 1 + 0 * x2))
    leak_p = dom.scalar(lambda x1, x2: x2 + 0 * x1)
    verdict = global_from_local([(d, *boundary_flux_integral(dom, leak_u, leak_p, d)) for d in deltas])
    oracle = leak_flux_oracle(1e-6)
    leak_err = abs(verdict.limit - oracle) / abs(oracle)
    layer_ok = True
    for nu in (1e-2, 1e-3, 1e-4):
        layer = dom.boundary_layer(nu)
        layer_ok &= all(boundary_flux_integral(dom, layer, zero, d)[0] == 0.0 for d in deltas)
    ok = shear_ok and leak_err <= 0.05 and layer_ok
    return ok, (f"shear exact zero {shear_ok}, leak limit {verdict.limit:.5f} vs {oracle:.5f} "
                f"({100 * leak_err:.2f}%), boundary layer exact zero {layer_ok}")


def laminate_geometry(matrices=100, samples=10**6, C=4.0):
    w = np.array([0.0, 0.0, 2.0])
    lam = geom1_decompose(w)
    bary = float(np.max(np.abs(lam.barycenter - state_triple(0 * w, 0 * w, w))))
    system = max(abs(-RHO1 + 3 * RHO2 - 2), abs(-RHO1**2 + 3 * RHO2**2 + 2))
    splits = lam.certify() == [] and all(
        in_wave_cone(n.children[0][1].value - n.children[1][1].value)
        for n in (lam.root, lam.root.children[1][1]))
    rng = np.random.default_rng(9)
    worst = -np.inf
    chunk = 250_000
    for _ in range(matrices):
        U = rng.normal(size=(3, 3))
        d = kc_project(U, C)[0]
        best = np.inf
        for _ in range(samples // chunk):
            rho = np.exp(rng.uniform(-math.log(C), math.log(C), chunk))
            v = rng.normal(size=(chunk, 3))
            v *= (np.exp(rng.uniform(-math.log(C), math.log(C), chunk)) / np.linalg.norm(v, axis=1))[:, None]
            pts = a_vec(rho)[:, :, None] * v[:, None, :]
            best = min(best, float(np.sqrt(np.min(np.sum((pts - U) ** 2, axis=(1, 2))))))
        worst = max(worst, d - best)
    ok = bary <= 1e-12 and system <= 1e-12 and splits and worst <= 1e-3
    return ok, (f"barycenter {bary:.1e}, density system {system:.1e}, splits certified {splits}, "
                f"max(projection - brute force) {worst:.2e}")


def convex_integration():
    g = PeriodicGrid.uniform(32, 3)
    x3 = g.coords()[2]
    w = np.zeros((3,) + g.shape)
    w[2] = np.sin(2 * np.pi * x3)
    f = ScalarField(g, 2 * np.pi * np.cos(2 * np.pi * x3) * np.ones(g.shape))
    battery = TestFunctionBattery.default(g).fields()
    iterates, diags = ci_iterate(VectorField(g, w), stages=3, f=f, battery=battery)
    accepted = [d for d in diags if d.accepted]
    three = len(accepted) == 3
    res = max((max(d.weak_residual_divU, d.weak_residual_divRhoU) for d in accepted), default=math.nan)
    a_ok = bool(accepted) and res <= 1e-6
    means = [d.mean_dist for d in diags]
    b_ok = three and accepted[2].mean_dist <= 0.5 * accepted[0].mean_dist
    c_ok = bool(accepted) and all(d.renorm_defect_gap <= d.renorm_gap_bound for d in accepted)
    notes = "; ".join(f"stage {d.stage}: {d.note}" for d in diags if not d.accepted)
    return three and a_ok and b_ok and c_ok, (
        f"accepted {len(accepted)} of 3; (a) residual {res:.1e} {a_ok}; "
        f"(b) mean distances {np.round(means, 4).tolist()} {b_ok}; (c) gap bounded {c_ok}"
        + (f"; {notes}" if notes else ""))


def ensemble_consistency():
    g = PeriodicGrid.uniform(256, 1)
    a = sample(AnalyticFieldSpec("weierstrass", {"alpha": 0.5, "octaves": 5, "seed": 1}), g)
    b = sample(AnalyticFieldSpec("weierstrass", {"alpha": 0.5, "octaves": 5, "seed": 2}), g)
    spec = BesovFunctionalSpec(2.0, 0.3)
    eps = 1 / 16
    fa, fb = besov_functional(a, spec, eps), besov_functional(b, spec, eps)
    single = abs(ensemble_besov(EnsembleSet((a,)), 2.0, 0.3, eps) - fa)
    pair = abs(ensemble_besov(EnsembleSet((a, b), (0.3, 0.7)), 2.0, 0.3, eps) - (0.3 * fa + 0.7 * fb))
    scale = max(1.0, fa, fb)
    ok = single <= 1e-12 * scale and pair <= 1e-12 * scale
    return ok, f"singleton difference {single:.1e}, weighted pair difference {pair:.1e}"


CRITERIA = [
    (1, "Burgers entropy dissipation", burgers_dissipation, 30),
    (2, "exact-solution fidelity", exact_solution_fidelity, 30),
    (3, "DiPerna-Lions limit", diperna_lions_limit, 60),
    (4, "CET exponent", cet_exponent, 120),
    (5, "Euler defect exponent", euler_defect_exponent, 180),
    (6, "Jensen/Taylor-gap inequality", taylor_gap_inequality, 60),
    (7, "2D conservation", conservation_2d, 120),
    (8, "boundary cutoff", boundary_cutoff, 60),
    (9, "laminate geometry", laminate_geometry, 120),
    (10, "convex-integration iteration", convex_integration, 600),
    (11, "ensemble consistency", ensemble_consistency, 10),
]


def evaluate(number, title, fn, limit):
    t0 = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - t0
    ok = bool(ok) and elapsed < limit
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} ({title}): {detail}; {elapsed:.1f} s of {limit} s"
    print(line)
    RESULTS.append(line)
    return ok, line


@pytest.mark.parametrize("number,title,fn,limit", CRITERIA, ids=[f"c{c[0]:02d}" for c in CRITERIA])
def test_criterion(number, title, fn, limit):
    ok, line = evaluate(number, title, fn, limit)
    assert ok, line


if __name__ == "__main__":
    failures = sum(not evaluate(*c)[0] for c in CRITERIA)
    raise SystemExit(1 if failures else 0)
