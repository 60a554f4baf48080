"""Experiment configuration, runner and report emission.

A run is a pure function of its :class:`ExperimentConfig`; every report
carries the sha256 of the canonical JSON form of that config.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io as _io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .balance import ChannelDomain, boundary_flux_integral, global_from_local, leak_flux_oracle
from .battery import TestFunctionBattery
from .commutators import (EntropyFunction, cet_commutator, dl_commutator, euler_defect, fit_scaling,
                          renormalisation_defect)
from .convexint import IterationSchedule, KAPPA, StageDiagnostics, ci_iterate, default_schedule
from .errors import ConfigError, LabError
from .grid import (AnalyticFieldSpec, KINDS as FIELD_KINDS, PeriodicGrid, ScalarField, VectorField,
                   integrate, lp_norm, sample)
from .io import encode, ingest
from .mollify import EpsilonLadder, MollifierKernel, mollify
from .regularity import BesovFunctionalSpec, EnsembleSet, besov_functional, ensemble_besov
from .solvers import (FlowState2D, burgers_entropy, burgers_entropy_balance, burgers_entropy_flux,
                      burgers_exact_ramp, burgers_line, burgers_run, euler2d_run, nse_energy_balance,
                      transport_run)

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

__all__ = ["EXPERIMENT_KINDS", "ExperimentConfig", "ReportBundle", "Check", "TestFunctionBattery",
           "load_config", "run", "emit", "ingest", "config_hash"]

EXPERIMENT_KINDS = ("gen", "mollify", "commutator", "besov", "burgers", "transport", "euler2d",
                    "boundary", "convexint", "report")
_TOP_KEYS = {"kind", "grid", "fields", "ladder", "params", "schedule", "out", "seed"}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    grid: dict = field(default_factory=dict)
    fields: dict = field(default_factory=dict)
    ladder: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    out: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        problems = []
        if not isinstance(d, dict):
            raise ConfigError(["config: expected a table"])
        for k in sorted(set(d) - _TOP_KEYS):
            problems.append(f"{k}: unknown key")
        kind = d.get("kind")
        if kind is None:
            problems.append("kind: missing")
        elif kind not in EXPERIMENT_KINDS:
            problems.append(f"kind: unknown experiment kind {kind!r}; expected one of {', '.join(EXPERIMENT_KINDS)}")
        for k in ("grid", "fields", "ladder", "params", "schedule"):
            if k in d and not isinstance(d[k], dict):
                problems.append(f"{k}: expected a table")
        if "seed" in d and (not isinstance(d["seed"], int) or isinstance(d["seed"], bool)):
            problems.append("seed: expected an integer")
        if "out" in d and not isinstance(d["out"], str):
            problems.append("out: expected a string")
        if problems:
            raise ConfigError(problems)
        cfg = cls(kind, **{k: copy.deepcopy(d[k]) for k in _TOP_KEYS - {"kind"} if k in d})
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {"kind": self.kind, "grid": self.grid, "fields": self.fields, "ladder": self.ladder,
                "params": self.params, "schedule": self.schedule, "out": self.out, "seed": self.seed}

    def validate(self) -> None:
        problems = []
        g = self.grid
        if g:
            n, dim = g.get("n"), g.get("dim")
            if not isinstance(n, int) or n < 8 or n & (n - 1):
                problems.append(f"grid.n: points per axis must be a power of two >= 8, got {n!r}")
            if dim not in (1, 2, 3):
                problems.append(f"grid.dim: must be 1, 2 or 3, got {dim!r}")
            length = g.get("length", 1.0)
            if not isinstance(length, (int, float)) or length <= 0:
                problems.append(f"grid.length: must be positive, got {length!r}")
        for name, spec in self.fields.items():
            if not isinstance(spec, dict) or spec.get("kind") not in FIELD_KINDS:
                problems.append(f"fields.{name}.kind: expected one of {', '.join(FIELD_KINDS)}")
        if self.ladder:
            e0, rungs = self.ladder.get("eps0"), self.ladder.get("rungs")
            if not isinstance(e0, (int, float)) or not 0 < e0 < 1:
                problems.append(f"ladder.eps0: must lie in (0, 1), got {e0!r}")
            if not isinstance(rungs, int) or rungs < 1:
                problems.append(f"ladder.rungs: must be a positive integer, got {rungs!r}")
        need_grid = self.kind in ("gen", "mollify", "commutator", "besov", "transport", "euler2d", "convexint")
        if need_grid and not g:
            problems.append("grid: required for this kind")
        need_ladder = self.kind in ("mollify", "commutator", "besov")
        if need_ladder and not self.ladder:
            problems.append("ladder: required for this kind")
        if self.kind == "convexint" and g and g.get("dim") != 3:
            problems.append("grid.dim: convexint runs in three dimensions")
        if self.kind == "report" and not isinstance(self.params.get("runs"), list):
            problems.append("params.runs: list of run directories required")
        if problems:
            raise ConfigError(problems)

    def hash(self) -> str:
        return config_hash(self)


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 of the canonical JSON config; the output directory does not enter."""
    d = cfg.to_dict()
    d.pop("out")
    text = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        data = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    return ExperimentConfig.from_dict(data)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ReportBundle:
    kind: str
    config_hash: str
    version: str = __version__
    files: dict = field(default_factory=dict)  # name -> str or bytes
    checks: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def manifest(self) -> dict:
        return {"kind": self.kind, "config_hash": self.config_hash, "version": self.version,
                "files": sorted(self.files), "summary": self.summary, "warnings": list(self.warnings),
                "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks]}


def _csv(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def emit(bundle: ReportBundle, out_dir) -> Path:
    """Write every file of the bundle plus ``report.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, content in sorted(bundle.files.items()):
        p = out / name
        if isinstance(content, bytes):
            p.write_bytes(content)
        else:
            p.write_text(content)
    (out / "report.json").write_text(json.dumps(bundle.manifest(), sort_keys=True, indent=2) + "\n")
    return out


# ---------------------------------------------------------------------------
# helpers


def _grid(cfg: ExperimentConfig) -> PeriodicGrid:
    g = cfg.grid
    return PeriodicGrid.uniform(g["n"], g["dim"], float(g.get("length", 1.0)))


def _field(cfg: ExperimentConfig, name: str, grid: PeriodicGrid, default: dict | None = None):
    spec = cfg.fields.get(name, default)
    if spec is None:
        raise ConfigError([f"fields.{name}: required for kind {cfg.kind!r}"])
    spec = dict(spec)
    return sample(AnalyticFieldSpec(spec.pop("kind"), spec), grid)


def _as_vector(f, grid: PeriodicGrid) -> VectorField:
    if isinstance(f, VectorField):
        return f
    data = np.zeros((grid.dim,) + grid.shape)
    data[0] = f.data
    return VectorField(grid, data)


def _ladder(cfg: ExperimentConfig, grid: PeriodicGrid) -> list[float]:
    lad = EpsilonLadder.dyadic(float(cfg.ladder["eps0"]), int(cfg.ladder["rungs"]), grid)
    return list(lad.values)


def _scaling_bundle(bundle: ReportBundle, rungs, predicted, params: dict) -> None:
    rep = fit_scaling(rungs, predicted=predicted)
    bundle.files["scaling.csv"] = rep.to_csv()
    bundle.summary.update(fitted_exponent=rep.fitted_exponent, fit_quality=rep.fit_quality)
    if predicted is not None and "exponent_tol" in params:
        err = abs(rep.fitted_exponent - predicted)
        bundle.checks.append(Check("exponent", err <= float(params["exponent_tol"]),
                                   f"fitted {rep.fitted_exponent:.4f} vs predicted {predicted:.4f}"))
    if "min_quality" in params:
        bundle.checks.append(Check("fit_quality", rep.fit_quality >= float(params["min_quality"]),
                                   f"R^2 = {rep.fit_quality:.4f}"))
    if not rep.is_decreasing():
        bundle.warnings.append("ladder is not monotonically decreasing")


# ---------------------------------------------------------------------------
# experiment kinds


def _run_gen(cfg, bundle):
    grid = _grid(cfg)
    rows = []
    for name in sorted(cfg.fields):
        f = _field(cfg, name, grid)
        bundle.files[f"{name}.clf"] = encode(f, name)
        rows.append((name, f.rank, float(np.mean(f.data)), lp_norm(f, 2.0), float(np.max(np.abs(f.data)))))
    bundle.files["fields.csv"] = _csv(("name", "rank", "mean", "l2_norm", "max_abs"), rows)


def _run_mollify(cfg, bundle):
    grid = _grid(cfg)
    f = _field(cfg, "f", grid)
    p = float(cfg.params.get("p", 1.0))
    rows = []
    for eps in _ladder(cfg, grid):
        fe = mollify(f, MollifierKernel(grid, eps))
        drift = float(np.max(np.abs(np.mean(fe.data.reshape(-1, grid.size) if f.rank else fe.data[None], axis=-1)
                                    - np.mean(f.data.reshape(-1, grid.size) if f.rank else f.data[None],
                                              axis=-1))))
        rows.append((eps, lp_norm(f - fe, p), drift))
        bundle.checks.append(Check(f"mean_preserved[eps={eps:g}]", drift <= 1e-12, f"drift {drift:.2e}"))
    bundle.files["mollify.csv"] = _csv(("epsilon", "increment_norm", "mean_drift"), rows)


def _entropy(params: dict) -> EntropyFunction:
    name = params.get("entropy", "quadratic")
    if name == "quadratic":
        return EntropyFunction.quadratic()
    if name == "linear":
        return EntropyFunction.linear()
    if name == "power":
        return EntropyFunction.power(float(params.get("power", 2.0)))
    raise ConfigError([f"params.entropy: unknown entropy {name!r}"])


def _run_commutator(cfg, bundle):
    grid = _grid(cfg)
    params = cfg.params
    which = params.get("type", "dl")
    eps_list = _ladder(cfg, grid)
    one = ScalarField(grid, np.ones(grid.shape))
    if which == "euler":
        u = _as_vector(_field(cfg, "u", grid), grid)
        rungs = [(e, abs(euler_defect(u, None, MollifierKernel(grid, e), one))) for e in eps_list]
    elif which in ("dl", "cet", "renorm"):
        rho = _field(cfg, "rho", grid)
        u = _as_vector(_field(cfg, "u", grid), grid)
        if which == "dl":
            rungs = [(e, dl_commutator(rho, u, MollifierKernel(grid, e)).l1_norm) for e in eps_list]
        elif which == "cet":
            rungs = [(e, cet_commutator(rho, u, MollifierKernel(grid, e)).l1_norm) for e in eps_list]
        else:
            eta = _entropy(params)
            rungs = [(e, abs(renormalisation_defect(rho, u, eta, MollifierKernel(grid, e), one)))
                     for e in eps_list]
    else:
        raise ConfigError([f"params.type: unknown commutator {which!r}; expected dl, cet, renorm or euler"])
    pred = params.get("predicted")
    _scaling_bundle(bundle, rungs, None if pred is None else float(pred), params)


def _run_besov(cfg, bundle):
    params = cfg.params
    p_exp, alpha = float(params.get("p", 2.0)), float(params.get("alpha", 0.5))
    snaps = params.get("snapshots")
    if snaps:
        members = [ingest(s) for s in snaps]
        grid = members[0].grid
        ens = EnsembleSet(tuple(members), params.get("weights"))
        rungs = [(e, ensemble_besov(ens, p_exp, alpha, e)) for e in _ladder(cfg, grid)]
    else:
        grid = _grid(cfg)
        f = _field(cfg, "f", grid)
        spec = BesovFunctionalSpec(p_exp, alpha)
        rungs = [(e, besov_functional(f, spec, e)) for e in _ladder(cfg, grid)]
    pred = params.get("predicted")
    _scaling_bundle(bundle, rungs, None if pred is None else float(pred), params)


def _run_burgers(cfg, bundle):
    params = cfg.params
    a, b = float(params.get("a", 0.0)), float(params.get("b", 1.75))
    n = int(params.get("n", 1024))
    t_end = float(params.get("t_end", 2.0))
    dt = float(params.get("sample_dt", 0.02))
    window = tuple(float(x) for x in params.get("window", (1.2, 2.0)))
    state = burgers_line(a, b, n, lambda x: burgers_exact_ramp(x, 0.0))
    traj = burgers_run(state, t_end, dt)
    rows = []
    for s0, s1 in zip(traj[:-1], traj[1:]):
        e0, e1 = s0.entropy(interior=True), s1.entropy(interior=True)
        inflow = 0.5 * sum(float(burgers_entropy_flux(s.u[s.interior][0]) - burgers_entropy_flux(s.u[s.interior][-1]))
                           for s in (s0, s1))
        rows.append((s1.time, e1, inflow - (e1 - e0) / (s1.time - s0.time)))
    _, _, rate = burgers_entropy_balance(traj, window)
    bundle.files["entropy_balance.csv"] = _csv(("t", "E", "dissipation"), rows)
    bundle.summary.update(dissipation_rate=rate, window=list(window))
    if "expected_rate" in params:
        exp = float(params["expected_rate"])
        rtol = float(params.get("rtol", 0.02))
        bundle.checks.append(Check("dissipation_rate", abs(rate - exp) <= rtol * abs(exp),
                                   f"rate {rate:.6f} vs {exp:.6f}"))
    if min(float(burgers_entropy(s.u).min()) for s in traj) < 0:
        bundle.warnings.append("negative entropy density")


def _run_transport(cfg, bundle):
    grid = _grid(cfg)
    rho = _field(cfg, "rho", grid)
    u = _as_vector(_field(cfg, "u", grid), grid)
    dt = float(cfg.params.get("dt", 1e-3))
    n_steps = int(cfg.params.get("steps", 100))
    every = int(cfg.params.get("sample_every", 25))
    if n_steps < 1 or every < 1 or n_steps % every:
        raise ConfigError([f"params.sample_every: {every} must divide params.steps = {n_steps}"])
    rows = [(0.0, integrate(rho), lp_norm(rho, 2.0))]
    cur = rho
    for i in range(1, n_steps // every + 1):
        cur = transport_run(cur, u, every * dt, dt)
        rows.append((i * every * dt, integrate(cur), lp_norm(cur, 2.0)))
    bundle.files["transport.csv"] = _csv(("t", "mass", "l2_norm"), rows)
    bundle.files["rho_final.clf"] = encode(cur, "rho")
    drift = abs(rows[-1][1] - rows[0][1]) / max(abs(rows[0][1]), 1.0)
    bundle.checks.append(Check("mass_conserved", drift <= 1e-10, f"relative drift {drift:.2e}"))
    l2drift = abs(rows[-1][2] / rows[0][2] - 1.0)
    if l2drift > float(cfg.params.get("l2_tol", 1e-6)):
        bundle.warnings.append(f"L2 norm drift {l2drift:.2e}")


def _run_euler2d(cfg, bundle):
    grid = _grid(cfg)
    u = _as_vector(_field(cfg, "u", grid, {"kind": "taylor-green"}), grid)
    nu = float(cfg.params.get("nu", 0.0))
    t_end, dt = float(cfg.params.get("t_end", 1.0)), float(cfg.params.get("dt", 1e-3))
    every = int(cfg.params.get("sample_every", 10))
    traj = euler2d_run(FlowState2D.from_velocity(u, nu), t_end, dt, every)
    rows = [(s.time, s.energy(), nu * s.dissipation_density()) for s in traj]
    bundle.files["energy.csv"] = _csv(("t", "E", "dissipation"), rows)
    bundle.files["vorticity_final.clf"] = encode(traj[-1].vorticity, "vorticity")
    tol = float(cfg.params.get("tol", 1e-6))
    if nu == 0:
        drift = abs(traj[-1].energy() / traj[0].energy() - 1.0)
        bundle.checks.append(Check("energy_conserved", drift <= tol, f"relative drift {drift:.2e}"))
    else:
        res = nse_energy_balance(traj)
        bundle.checks.append(Check("energy_balance", res <= tol, f"relative residual {res:.2e}"))


_FLOWS: dict[str, Callable] = {
    "shear": lambda d, p: (d.vector(lambda x1, x2: (np.sin(2 * np.pi * x2) + 0 * x1, 0 * x2)),
                           d.scalar(lambda x1, x2: 0 * x1 + 0 * x2)),
    "leak": lambda d, p: (d.vector(lambda x1, x2: (0 * x2, 1 + 0 * x2)),
                          d.scalar(lambda x1, x2: x2 + 0 * x1)),
    "boundary-layer": lambda d, p: (d.boundary_layer(float(p.get("nu", 1e-4))),
                                    d.scalar(lambda x1, x2: 0 * x1 + 0 * x2)),
}


def _run_boundary(cfg, bundle):
    params = cfg.params
    flow = params.get("flow", "shear")
    if flow not in _FLOWS:
        raise ConfigError([f"params.flow: unknown flow {flow!r}; expected one of {', '.join(_FLOWS)}"])
    dom = ChannelDomain(int(params.get("n1", 16)), int(params.get("n2", 1024)), float(params.get("length", 1.0)))
    u, p = _FLOWS[flow](dom, params)
    deltas = [float(d) for d in params.get("deltas", [1 / 8, 1 / 16, 1 / 32, 1 / 64])]
    ladder = [(d, *boundary_flux_integral(dom, u, p, d)) for d in deltas]
    verdict = global_from_local(ladder)
    bundle.files["boundary.csv"] = verdict.to_csv()
    bundle.files["verdict.json"] = verdict.to_json() + "\n"
    bundle.summary.update(limit=verdict.limit, conserved=verdict.conserved)
    if flow == "leak":
        oracle = -float(dom.length)
        err = abs(verdict.limit - oracle) / abs(oracle)
        bundle.checks.append(Check("leak_limit", err <= 0.05, f"limit {verdict.limit:.6f} vs {oracle:.6f}"))
        worst = max(abs(i - leak_flux_oracle(d, dom.length)) for d, i, _ in ladder)
        bundle.summary.update(max_rung_error=worst)
    else:
        bundle.checks.append(Check("exact_zero", verdict.exact_zero, f"limit {verdict.limit:.3e}"))


def _run_convexint(cfg, bundle):
    grid = _grid(cfg)
    w0 = _field(cfg, "w0", grid, {"kind": "fourier-mode", "amplitude": 1.0, "wavevector": [0, 0, 1],
                                   "phase": math.pi / 2, "vector_axis": 2})
    if not isinstance(w0, VectorField):
        raise ConfigError(["fields.w0: a vector field is required"])
    sch = cfg.schedule
    stages = int(sch.get("stages", 3))
    if "cube_cells" in sch:
        base = default_schedule(w0, stages)
        schedule = IterationSchedule(
            float(sch.get("C0", base.C0)),
            tuple(float(x) for x in sch.get("deltas", [math.inf] * stages)),
            tuple(int(x) for x in sch["cube_cells"]),
            tuple(float(x) for x in sch.get("frequencies", base.frequencies)),
            int(sch.get("margin_cells", base.margin_cells)), float(sch.get("inner_ratio", base.inner_ratio)),
            float(sch.get("kappa", KAPPA)), bool(sch.get("greedy", False)))
    else:
        schedule = None
    iterates, diags = ci_iterate(w0, schedule, stages)
    rows = [[getattr(d, c) for c in StageDiagnostics.COLUMNS] for d in diags]
    bundle.files["stages.csv"] = _csv(StageDiagnostics.COLUMNS, rows)
    for i, U in enumerate(iterates):
        bundle.files[f"iterate_{i}.clf"] = encode(U, f"U{i}")
    tol = float(cfg.params.get("residual_tol", 1e-6))
    for d in diags:
        if not d.accepted:
            bundle.warnings.append(f"stage {d.stage} rejected: {d.note}")
            continue
        res = max(d.weak_residual_divU, d.weak_residual_divRhoU)
        bundle.checks.append(Check(f"weak_residual[stage={d.stage}]", res <= tol, f"{res:.2e}"))
        bundle.checks.append(Check(f"renorm_gap[stage={d.stage}]", d.renorm_defect_gap <= d.renorm_gap_bound,
                                   f"{d.renorm_defect_gap:.3e} <= {d.renorm_gap_bound:.3e}"))
    accepted = [d for d in diags if d.accepted]
    bundle.summary.update(accepted_stages=len(accepted),
                          mean_dist=[d.mean_dist for d in diags])
    if len(accepted) < stages:
        bundle.warnings.append(f"{len(accepted)} of {stages} stages accepted")


def _run_report(cfg, bundle):
    rows = []
    for run_dir in cfg.params["runs"]:
        path = Path(run_dir) / "report.json"
        try:
            man = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError([f"params.runs: cannot read {path}: {exc}"]) from exc
        for c in man["checks"]:
            rows.append((str(run_dir), man["kind"], man["config_hash"], c["name"], c["passed"], c["detail"]))
        if not man["checks"]:
            rows.append((str(run_dir), man["kind"], man["config_hash"], "", "", ""))
        bundle.warnings.extend(f"{run_dir}: {w}" for w in man["warnings"])
        bundle.checks.extend(Check(f"{run_dir}:{c['name']}", c["passed"], c["detail"]) for c in man["checks"])
    bundle.files["summary.csv"] = _csv(("run", "kind", "config_hash", "check", "passed", "detail"), rows)


_RUNNERS = {"gen": _run_gen, "mollify": _run_mollify, "commutator": _run_commutator, "besov": _run_besov,
            "burgers": _run_burgers, "transport": _run_transport, "euler2d": _run_euler2d,
            "boundary": _run_boundary, "convexint": _run_convexint, "report": _run_report}


def run(config: ExperimentConfig | dict) -> ReportBundle:
    """Execute one experiment and return its (unwritten) report bundle."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    cfg.validate()
    bundle = ReportBundle(cfg.kind, cfg.hash())
    try:
        _RUNNERS[cfg.kind](cfg, bundle)
    except ConfigError:
        raise
    except (LabError, ValueError) as exc:
        bundle.checks.append(Check("run", False, f"{type(exc).__name__}: {exc}"))
    meta = f"# config_hash: {bundle.config_hash}\n# version: {bundle.version}\n"
    for name, content in list(bundle.files.items()):
        if name.endswith(".csv"):
            bundle.files[name] = meta + content
    return bundle
