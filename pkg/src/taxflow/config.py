"""Scenario configuration: TOML text, defaults, and all-violations validation.

Every key lives in a section; the documented defaults are below.  Positions
for kernel sources are fractions of the income grid span and kernel times are
multiples of ``span²``, so one config scales with the grid.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from dataclasses import dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .model import MIN_NODES

DEFAULTS = {
    "seed": 0,
    "grid": {"y_min": 0.25, "y_max": 5.6, "n": 801},
    "skills": {"family": "tapered_lognormal", "theta_min": 1.0, "theta_max": 3.0,
               "location": math.log(1.2), "scale": 0.4, "taper": 0.25, "n_theta": 801},
    "preferences": {"e0": 0.5},
    "initial_tax": {"family": "linear", "rate": 0.1, "curvature": 0.0, "path": ""},
    "solver": {"tol": 1e-9, "damping": 0.3, "retention_floor": 0.02, "max_iter": 400,
               "foc_tol": 1e-4, "sigma_taper": 0.02, "curvature_smoothing": 0.1},
    "flow": {"dt_outer": 5e-5, "dt_inner": 5e-5, "t_end": 5e-4, "probe": 0.6,
             "fk_paths": 100_000, "fk_dt": 1e-4},
    "kernel": {"positions": [0.55, 0.625, 0.7, 0.775, 0.85],
               "times": [0.00125, 0.0025, 0.005, 0.01]},
    "spectral": {"k": 20, "samples": 20, "horizon": 0.05, "steps": 20},
    "output": {"dir": "taxflow_out"},
}

FAMILIES = {"skills.family": ("tapered_lognormal",),
            "initial_tax.family": ("zero", "linear", "quadratic", "gridded")}

INTEGERS = {"seed", "grid.n", "skills.n_theta", "solver.max_iter", "flow.fk_paths",
            "spectral.k", "spectral.samples", "spectral.steps"}
STRINGS = {"skills.family", "initial_tax.family", "initial_tax.path", "output.dir"}
LISTS = {"kernel.positions", "kernel.times"}


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _nest(flat):
    out = {}
    for key, v in flat.items():
        parts = key.split(".")
        d = out
        for p in parts[:-1]:
            d = d.setdefault(p, {})
        d[parts[-1]] = v
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    values: dict

    def __getitem__(self, key):
        return self.flat[key]

    @property
    def flat(self) -> dict:
        return _flatten(self.values)

    def section(self, name: str) -> dict:
        return dict(self.values[name])

    def with_overrides(self, **flat) -> "ScenarioConfig":
        f = self.flat
        f.update(flat)
        return validate(_nest(f))

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _check_types(flat, errors):
    for key, v in flat.items():
        if key in STRINGS:
            if not isinstance(v, str):
                errors.append(f"{key} must be a string")
        elif key in LISTS:
            if not isinstance(v, list) or not v or not all(
                    isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
                errors.append(f"{key} must be a non-empty list of numbers")
        elif key in INTEGERS:
            if not isinstance(v, int) or isinstance(v, bool):
                errors.append(f"{key} must be an integer")
        elif not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
            errors.append(f"{key} must be a finite number")


def _check_ranges(f, errors):
    def need(cond, msg):
        if not cond:
            errors.append(msg)

    need(f["grid.y_min"] > 0, "grid.y_min must be positive")
    need(f["grid.y_max"] > f["grid.y_min"], "grid.y_max must exceed grid.y_min")
    need(f["grid.n"] >= MIN_NODES, f"grid.n below minimum {MIN_NODES}")
    need(f["skills.theta_min"] > 0, "skills.theta_min must be positive")
    need(f["skills.theta_max"] > f["skills.theta_min"], "skills.theta_max must exceed skills.theta_min")
    need(f["skills.scale"] > 0, "skills.scale must be positive")
    need(0 < f["skills.taper"] <= 0.5, "skills.taper must lie in (0, 0.5]")
    need(f["skills.n_theta"] >= 16, "skills.n_theta below minimum 16")
    need(f["preferences.e0"] > 0, "preferences.e0 must be positive")
    need(0 <= f["initial_tax.rate"] < 1, "initial_tax.rate must lie in [0, 1)")
    if f["initial_tax.family"] == "gridded":
        need(f["initial_tax.path"] != "", "initial_tax.path is required for the gridded family")
    need(0 < f["solver.tol"] < 1, "solver.tol must lie in (0, 1)")
    need(0 < f["solver.damping"] <= 1, "solver.damping must lie in (0, 1]")
    need(0 < f["solver.retention_floor"] < 1, "solver.retention_floor must lie in (0, 1)")
    need(f["solver.max_iter"] >= 1, "solver.max_iter must be at least 1")
    need(f["solver.foc_tol"] > 0, "solver.foc_tol must be positive")
    need(0 < f["solver.sigma_taper"] < 0.5, "solver.sigma_taper must lie in (0, 0.5)")
    need(f["solver.curvature_smoothing"] >= 0, "solver.curvature_smoothing must be nonnegative")
    need(f["flow.dt_outer"] > 0, "flow.dt_outer must be positive")
    need(0 < f["flow.dt_inner"] <= f["flow.dt_outer"], "flow.dt_inner must lie in (0, flow.dt_outer]")
    if f["flow.dt_outer"] > 0:
        k = f["flow.t_end"] / f["flow.dt_outer"]
        need(f["flow.t_end"] > 0 and abs(k - round(k)) < 1e-9 * max(1.0, k),
             "flow.t_end must be a positive multiple of flow.dt_outer")
    need(0 < f["flow.probe"] < 1, "flow.probe must lie in (0, 1)")
    need(f["flow.fk_paths"] >= 10_000, "flow.fk_paths below minimum 10000")
    need(f["flow.fk_dt"] > 0, "flow.fk_dt must be positive")
    if isinstance(f["kernel.positions"], list):
        need(all(0.1 <= x <= 0.9 for x in f["kernel.positions"]),
             "kernel.positions must lie in the interior 80% [0.1, 0.9]")
    if isinstance(f["kernel.times"], list):
        need(all(x > 0 for x in f["kernel.times"]), "kernel.times must be positive")
    need(f["spectral.k"] >= 1, "spectral.k must be at least 1")
    if f["grid.n"] >= MIN_NODES:
        need(f["spectral.k"] <= f["grid.n"] // 4, "spectral.k must not exceed grid.n/4")
    need(f["spectral.samples"] >= 1, "spectral.samples must be at least 1")
    need(f["spectral.horizon"] > 0, "spectral.horizon must be positive")
    need(f["spectral.steps"] >= 1, "spectral.steps must be at least 1")
    need(0 <= f["seed"] < 2 ** 64, "seed must lie in [0, 2^64)")
    for key, allowed in FAMILIES.items():
        need(f[key] in allowed, f"{key} must be one of {', '.join(allowed)}")


def validate(raw: dict) -> ScenarioConfig:
    """Merge ``raw`` over the defaults; raise :class:`ConfigError` listing every violation."""
    defaults = _flatten(DEFAULTS)
    given = _flatten(raw)
    errors = [f"unknown key '{k}'" for k in given if k not in defaults]
    merged = copy.deepcopy(defaults)
    merged.update({k: v for k, v in given.items() if k in defaults})
    # integers are accepted where a float is expected
    for k, v in merged.items():
        if k not in INTEGERS | STRINGS | LISTS and isinstance(v, int) and not isinstance(v, bool):
            merged[k] = float(v)
        if k in LISTS and isinstance(v, list):
            merged[k] = [float(x) if isinstance(x, int) and not isinstance(x, bool) else x for x in v]
    _check_types(merged, errors)
    if not any(e.endswith("must be a finite number") or e.endswith("must be an integer")
               or "must be a string" in e or "list of numbers" in e for e in errors):
        _check_ranges(merged, errors)
    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(_nest(merged))


def parse_config(text: str) -> ScenarioConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    return validate(raw)


def load_config(path) -> ScenarioConfig:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError([f"config is not UTF-8: {exc}"]) from exc
    return parse_config(text)
