"""Command line entry point: ``taxflow run`` and ``taxflow validate``."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import ScenarioConfig, load_config
from .errors import ConfigError, TaxflowError
from .fairness import fairness_suite
from .flow import evolve, feynman_kac_estimate, short_time_prediction, stationary_tau
from .heatkernel import solve_kernel
from .model import Grid, GridFunction, Preferences, SkillModel, derivative
from .optimal import diamond_check, solve_optimal
from .spectral import active_block, decay_certificate, eigensolve, frozen_trajectory, rayleigh_lambda1

MODES = ("optimal", "fairness", "flow", "spectral", "all")
FMT = "%.17g"


class StageError(TaxflowError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage


@dataclass
class RunManifest:
    config_hash: str
    version: str
    config: dict
    stages: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.stages) and all(s == "pass" for s in self.stages.values())

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "version": self.version, "config": self.config,
                "stages": self.stages, "files": self.files, "wall_clock": self.wall_clock,
                "passed": self.passed}


def _write_csv(path, header, columns):
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    np.savetxt(path, data, fmt=FMT, delimiter=",", header=",".join(header), comments="")


def _write_json(path, obj):
    # repr of a float is the shortest round-trip form, so values are exact
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _model(cfg: ScenarioConfig):
    g = cfg.section("grid")
    s = cfg.section("skills")
    grid = Grid(g["y_min"], g["y_max"], g["n"])
    skills = SkillModel(s["theta_min"], s["theta_max"], s["location"], s["scale"], s["taper"], s["family"])
    return grid, skills, Preferences(cfg["preferences.e0"])


def initial_tax(cfg: ScenarioConfig, grid: Grid) -> GridFunction:
    it = cfg.section("initial_tax")
    y = np.asarray(grid.nodes)
    fam = it["family"]
    if fam == "zero":
        return GridFunction(grid, np.zeros(grid.n))
    if fam == "linear":
        return GridFunction(grid, it["rate"] * y)
    if fam == "quadratic":
        return GridFunction(grid, it["rate"] * y + 0.5 * it["curvature"] * y * y)
    data = np.loadtxt(it["path"], delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] < 2 or data[0, 0] > grid.y_min or data[-1, 0] < grid.y_max:
        raise ConfigError([f"initial_tax.path must hold (y, T) columns covering [{grid.y_min}, {grid.y_max}]"])
    return GridFunction(grid, np.interp(y, data[:, 0], data[:, 1]))


class Runner:
    def __init__(self, cfg: ScenarioConfig, out: str):
        self.cfg = cfg
        self.out = out
        self.grid, self.skills, self.prefs = _model(cfg)
        self.manifest = RunManifest(cfg.digest(), __version__, cfg.values)
        self._opt = None

    def _path(self, name):
        self.manifest.files.append(name)
        return os.path.join(self.out, name)

    def _solver_kw(self):
        s = self.cfg.section("solver")
        return dict(damping=s["damping"], tol=s["tol"], max_iter=s["max_iter"],
                    retention_floor=s["retention_floor"], n_theta=self.cfg["skills.n_theta"],
                    sigma_taper=s["sigma_taper"], foc_tol=s["foc_tol"],
                    curvature_smoothing=s["curvature_smoothing"])

    def optimum(self):
        if self._opt is None:
            T, snap, rep = solve_optimal(self.skills, self.prefs, self.grid, **self._solver_kw())
            self._opt = (T, snap, rep)
        return self._opt

    def stage_optimal(self) -> bool:
        T, snap, rep = self.optimum()
        tol = 1e-3
        gap = diamond_check(T, self.skills, self.prefs, snap)
        y = np.asarray(self.grid.nodes)
        _write_csv(self._path("optimal_tax.csv"), ["y", "T", "dT", "phi", "eps"],
                   [y, T.values, derivative(T).values, snap.phi.values, snap.eps.values])
        ok = rep.certified and rep.top_rate < tol and gap < 1e-2
        _write_json(self._path("optimal_report.json"), {
            "iterations": rep.iterations, "converged": rep.converged,
            "foc_residual": rep.foc_residual, "foc_tol": self.cfg["solver.foc_tol"],
            "top_marginal_rate": rep.top_rate, "top_rate_tol": tol, "diamond_gap": gap,
            "certified": rep.certified, "pass": ok})
        return ok

    def stage_fairness(self) -> bool:
        T, snap, _ = self.optimum()
        g = self.grid
        k = self.cfg.section("kernel")
        probes = [g.y_min + f * g.span for f in k["positions"]]
        times = [f * g.span ** 2 for f in k["times"]]
        rep = fairness_suite(T, snap, probes, times)
        y = np.asarray(g.nodes)
        for x in rep.probes:
            ker = solve_kernel(snap.sigma, x, times)
            tt = np.repeat(ker.times, g.n)
            yy = np.tile(y, len(ker.times))
            qq = np.concatenate([s.values for s in ker.slices])
            _write_csv(self._path(f"kernel_{x:.6g}.csv"), ["t", "y", "q"], [tt, yy, qq])
        d = rep.to_dict()
        ok = d["max_relative_residual"] < 1e-3 and d["max_relative_derivative_residual"] < 5e-3
        d.update({"residual_tol": 1e-3, "derivative_residual_tol": 5e-3, "pass": ok})
        _write_json(self._path("fairness_report.json"), d)
        return ok

    def stage_flow(self) -> bool:
        f = self.cfg.section("flow")
        s = self.cfg.section("solver")
        T0 = initial_tax(self.cfg, self.grid)
        traj = evolve(T0, f["t_end"], f["dt_outer"], f["dt_inner"], self.skills, self.prefs, self.grid,
                      n_theta=self.cfg["skills.n_theta"], sigma_taper=s["sigma_taper"],
                      curvature_smoothing=s["curvature_smoothing"])
        y = np.asarray(self.grid.nodes)
        n = self.grid.n
        st = traj.states
        _write_csv(self._path("trajectory.csv"), ["t", "y", "T", "R"],
                   [np.repeat(traj.times, n), np.tile(y, len(st)),
                    np.concatenate([x.tax.values for x in st]), np.repeat(traj.revenues, n)])
        dr = np.diff(traj.revenues)
        monotone = bool(np.all(dr >= -1e-10))
        x = float(self.grid.nodes[self.grid.index_of(self.grid.y_min + f["probe"] * self.grid.span)])
        snap0 = st[0].snapshot
        pred = short_time_prediction(T0, snap0, f["fk_dt"], x)
        mean, se = feynman_kac_estimate(T0, snap0, f["fk_dt"], x, f["fk_paths"], seed=self.cfg["seed"])
        fk_ok = abs(mean - pred) <= 3 * se
        ok = monotone and fk_ok
        _write_json(self._path("flow_report.json"), {
            "outer_steps": len(st) - 1, "revenue_first": float(traj.revenues[0]),
            "revenue_last": float(traj.revenues[-1]),
            "min_revenue_increment": float(dr.min()) if dr.size else 0.0,
            "revenue_monotone": monotone, "fk_probe": x, "fk_dt": f["fk_dt"],
            "short_time_prediction": pred, "fk_mean": mean, "fk_stderr": se,
            "fk_within_3_stderr": fk_ok, "pass": ok})
        return ok

    def stage_spectral(self) -> bool:
        T, snap, _ = self.optimum()
        sp_cfg = self.cfg.section("spectral")
        g = self.grid
        sp = eigensolve(snap.sigma, sp_cfg["k"])
        lam_r = rayleigh_lambda1(snap.sigma)
        _write_csv(self._path("spectrum.csv"), ["j", "lambda"],
                   [np.arange(sp.eigenvalues.size), sp.eigenvalues])
        y = np.asarray(g.nodes)
        _write_csv(self._path("eigenfunctions.csv"), ["y"] + [f"eta_{j}" for j in range(sp.eigenvalues.size)],
                   [y] + [e.values for e in sp.eigenfunctions])
        tau = stationary_tau(snap).tau
        i0, i1 = active_block(snap.sigma)
        w = np.asarray(g.weights)[i0:i1 + 1]
        rng = np.random.default_rng(np.random.SeedSequence(self.cfg["seed"], spawn_key=(1,)))
        u = np.linspace(0.0, 1.0, i1 - i0 + 1)
        dt = sp_cfg["horizon"] / sp_cfg["steps"]
        margins = []
        for _ in range(sp_cfg["samples"]):
            z = np.zeros(g.n)
            modes = rng.standard_normal(6)
            bump = np.sin(np.pi * u) ** 4
            zi = sum(a * np.cos((j + 1) * np.pi * u) for j, a in enumerate(modes)) * bump
            z[i0:i1 + 1] = zi - np.dot(w, zi) / w.sum()
            tr = frozen_trajectory(GridFunction(g, tau.values + z), tau, snap, dt, sp_cfg["steps"])
            margins.append(decay_certificate(tr, tau, sp.lambda1))
        agree = abs(lam_r - sp.lambda1)
        ok = agree < 1e-8 and min(margins) >= -1e-8
        _write_json(self._path("spectral_report.json"), {
            "lambda1_eigensolve": sp.lambda1, "lambda1_rayleigh": lam_r, "lambda1_gap": agree,
            "lambda0": float(sp.eigenvalues[0]), "active_block": [i0, i1],
            "decay_margins": margins, "min_margin": min(margins), "pass": ok})
        return ok

    def run(self, mode: str) -> RunManifest:
        stages = ["optimal", "fairness", "flow", "spectral"] if mode == "all" else [mode]
        os.makedirs(self.out, exist_ok=True)
        try:
            for st in stages:
                t0 = time.perf_counter()
                try:
                    ok = getattr(self, f"stage_{st}")()
                except TaxflowError as exc:
                    self.manifest.stages[st] = "error"
                    raise StageError(st, exc) from exc
                finally:
                    self.manifest.wall_clock[st] = time.perf_counter() - t0
                self.manifest.stages[st] = "pass" if ok else "fail"
        finally:
            self.manifest.files.sort()
            _write_json(os.path.join(self.out, "manifest.json"), self.manifest.to_dict())
        return self.manifest


def run(config: ScenarioConfig, mode: str = "all", out: str | None = None) -> RunManifest:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {', '.join(MODES)}")
    return Runner(config, out or config["output.dir"]).run(mode)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="taxflow")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("--config", required=True)
    r.add_argument("--mode", choices=MODES, default="all")
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("--config", required=True)
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.cmd == "run" and args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
    except ConfigError as exc:
        for msg in exc.violations:
            print(f"config error: {msg}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.cmd == "validate":
        print(json.dumps(cfg.values, indent=2, sort_keys=True))
        return 0
    try:
        manifest = run(cfg, args.mode, args.out)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for st, status in manifest.stages.items():
        print(f"{st}: {status}")
    return 0 if manifest.passed else 1


if __name__ == "__main__":
    sys.exit(main())
