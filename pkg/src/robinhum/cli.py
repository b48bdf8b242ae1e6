"""Config-driven experiment runner.

    robinhum run --config cfg.yaml [--set hum.eps=[0.1,0.01] ...] [--out DIR]
    robinhum plot-data --records 'runs/*.json' --kind eps [--out table.csv]

Each run writes ``<out>/<experiment_id>.json`` (config echo, report, rows,
diagnostics) and ``<out>/<experiment_id>.csv`` (one row per epsilon, lambda
or sample). The CSV carries no timing, so identical configs give identical
files. Exit codes: 0 success, 2 config error, 3 solver error.
"""
from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import io
import json
import re
import sys
import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .estimates import (carleman_batch, carleman_eval_backward, carleman_eval_forward, default_ensemble,
                        lambda_sweep, observability_backward, observability_forward,
                        substitution_sources_backward, substitution_sources_forward)
from .grid import SolverFailure, build_grid
from .hum import (VARIANTS, CgStalled, HumConfig, LqProblem, compare_with_oracle, cost_report,
                  solve_hum_backward, solve_hum_forward, solve_weighted_hum_A, solve_weighted_hum_B)
from .noise import MAX_DEPTH, build_tree
from .spde import (CFLWarning, CoefficientSet, ProblemInstance, TableCoefficient, duality_check,
                   random_coefficients, solve_backward, solve_forward)
from .weights import WeightFamily, WeightOverflow, build_psi, lambda_threshold

KINDS = ("control-forward", "control-backward", "carleman-backward", "carleman-forward",
         "observability-forward", "observability-backward", "oracle-check", "ito-check",
         "weighted-hum-A", "weighted-hum-B")
COEFF_NAMES = ("a", "a1", "a2", "B1", "B2", "B", "beta")
DATA_KINDS = ("sin", "zero", "random")
PLOT_KINDS = ("eps", "lambda", "observability", "cost")
PLOT_COLUMNS = ["experiment_id", "x_name", "x_value", "y_name", "y_value"]


class ConfigInvalid(ValueError):
    """Config errors; ``errors`` maps dotted field names to messages."""

    def __init__(self, errors: dict):
        self.errors = dict(errors)
        super().__init__("; ".join(f"{k}: {v}" for k, v in self.errors.items()))


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class GeometryConfig:
    M: int = 32
    g0: tuple = (0.25, 0.5)
    g1: tuple = (0.3, 0.45)
    psi: tuple = (3, 5)


@dataclass(frozen=True)
class NoiseConfig:
    L: int = 6
    T: float = 1.0


@dataclass(frozen=True)
class CoefficientConfig:
    """Each entry is a number or a table {times, xs, values}; beta is a number or a pair."""

    a: object = 1.0
    a1: object = 0.0
    a2: object = 0.0
    B1: object = 0.0
    B2: object = 0.0
    B: object = 0.0
    beta: object = 0.0
    c0: Optional[float] = None


@dataclass(frozen=True)
class WeightConfig:
    mu: float = 1.0
    C_cal: float = 1.0
    lam: Optional[float] = None
    n_lambda: int = 7
    lambda_span: float = 4.0


@dataclass(frozen=True)
class HumSection:
    eps: tuple = (1e-2,)
    cg_tol: float = 1e-8
    max_iters: int = 500


@dataclass(frozen=True)
class DataConfig:
    kind: str = "sin"
    n_samples: int = 20


@dataclass(frozen=True)
class SweepConfig:
    name: Optional[str] = None
    values: tuple = ()


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "control-forward"
    seed: int = 0
    out: str = "runs"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    coefficients: CoefficientConfig = field(default_factory=CoefficientConfig)
    weights: WeightConfig = field(default_factory=WeightConfig)
    hum: HumSection = field(default_factory=HumSection)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


_SECTIONS = {"geometry": GeometryConfig, "noise": NoiseConfig, "coefficients": CoefficientConfig,
             "weights": WeightConfig, "hum": HumSection, "data": DataConfig, "sweep": SweepConfig}


def _freeze(v):
    if isinstance(v, list):
        return tuple(_freeze(e) for e in v)
    if isinstance(v, dict):
        return tuple(sorted((k, _freeze(e)) for k, e in v.items()))
    return v


def _thaw(v):
    if isinstance(v, tuple) and v and all(isinstance(e, tuple) and len(e) == 2 and isinstance(e[0], str)
                                           for e in v):
        return {k: _thaw(e) for k, e in v}
    if isinstance(v, tuple):
        return [_thaw(e) for e in v]
    return v


def config_from_dict(d: dict) -> ExperimentConfig:
    """Build and validate a config from nested dicts; unknown keys are errors."""
    if not isinstance(d, dict):
        raise ConfigInvalid({"<root>": "config must be a mapping"})
    errors, kw = {}, {}
    for key, val in d.items():
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            names = {f.name for f in fields(cls)}
            if val is None:
                val = {}
            if not isinstance(val, dict):
                errors[key] = "must be a mapping"
                continue
            bad = set(val) - names
            for b in sorted(bad):
                errors[f"{key}.{b}"] = "unknown field"
            kw[key] = cls(**{k: _freeze(v) for k, v in val.items() if k in names})
        elif key in ("kind", "seed", "out"):
            kw[key] = val
        else:
            errors[key] = "unknown field"
    cfg = ExperimentConfig(**kw)
    try:
        validate_config(cfg)
    except ConfigInvalid as ex:
        errors.update(ex.errors)
    if errors:
        raise ConfigInvalid(errors)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain nested dict that re-parses to an equal config."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            out[f.name] = {g.name: _thaw(getattr(v, g.name)) for g in fields(v)}
        else:
            out[f.name] = v
    return out


def _num(errors, key, v, lo=None, hi=None, integer=False, strict_lo=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and int(v) != v):
        errors[key] = f"expected {'an integer' if integer else 'a number'}, got {v!r}"
        return False
    if not np.isfinite(v):
        errors[key] = "must be finite"
        return False
    if lo is not None and (v <= lo if strict_lo else v < lo):
        errors[key] = f"must be {'>' if strict_lo else '>='} {lo}, got {v}"
        return False
    if hi is not None and v > hi:
        errors[key] = f"must be <= {hi}, got {v}"
        return False
    return True


def _coefficient(name, v):
    if isinstance(v, tuple) and v and isinstance(v[0], tuple) and isinstance(v[0][0], str):
        t = dict(v)
        missing = {"times", "xs", "values"} - set(t)
        if missing:
            raise ValueError(f"table needs {sorted(missing)}")
        tab = TableCoefficient(np.asarray(t["times"], float), np.asarray(t["xs"], float),
                               np.asarray(t["values"], float))
        return tab
    if name == "beta" and isinstance(v, tuple):
        if len(v) != 2:
            raise ValueError("beta pair needs two entries")
        return tuple(float(e) for e in v)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise ValueError(f"expected a number or a table, got {v!r}")
    return float(v)


def build_coefficients(cc: CoefficientConfig, **override) -> CoefficientSet:
    vals = {n: _coefficient(n, override.get(n, getattr(cc, n))) for n in COEFF_NAMES}
    return CoefficientSet(c0=cc.c0, **vals)


def validate_config(cfg: ExperimentConfig) -> None:
    """Check every field against the solver preconditions; raise ConfigInvalid."""
    e = {}
    if cfg.kind not in KINDS:
        e["kind"] = f"must be one of {KINDS}"
    _num(e, "seed", cfg.seed, 0, integer=True)
    if not isinstance(cfg.out, str) or not cfg.out:
        e["out"] = "must be a non-empty path"
    g = cfg.geometry
    ok = _num(e, "geometry.M", g.M, 4, 4097, integer=True)
    for nm in ("g0", "g1", "psi"):
        v = getattr(g, nm)
        if not (isinstance(v, tuple) and len(v) == 2 and all(isinstance(x, (int, float)) for x in v)):
            e[f"geometry.{nm}"] = "must be a pair of numbers"
            ok = False
    n = cfg.noise
    _num(e, "noise.L", n.L, 1, MAX_DEPTH, integer=True)
    _num(e, "noise.T", n.T, 0, strict_lo=True)
    if ok:
        try:
            grid = build_grid(int(g.M), tuple(g.g0), tuple(g.g1))
            build_psi(grid, int(g.psi[0]), int(g.psi[1]))
        except ValueError as ex:
            e["geometry"] = str(ex)
    c = cfg.coefficients
    for nm in COEFF_NAMES:
        try:
            _coefficient(nm, getattr(c, nm))
        except ValueError as ex:
            e[f"coefficients.{nm}"] = str(ex)
    if c.c0 is not None:
        _num(e, "coefficients.c0", c.c0, 0, strict_lo=True)
    if not any(k.startswith("coefficients.") for k in e) and "geometry" not in e and ok and "noise.L" not in e \
            and "noise.T" not in e:
        try:
            coeffs = build_coefficients(c)
            coeffs.validate(grid, np.linspace(0, n.T, n.L + 1))
        except Exception as ex:
            e["coefficients.a"] = str(ex)
    w = cfg.weights
    _num(e, "weights.mu", w.mu, 0, strict_lo=True)
    _num(e, "weights.C_cal", w.C_cal, 0, strict_lo=True)
    if w.lam is not None:
        _num(e, "weights.lam", w.lam, 0, strict_lo=True)
    _num(e, "weights.n_lambda", w.n_lambda, 1, integer=True)
    _num(e, "weights.lambda_span", w.lambda_span, 1)
    h = cfg.hum
    if not (isinstance(h.eps, tuple) and h.eps):
        e["hum.eps"] = "must be a non-empty list"
    else:
        for i, v in enumerate(h.eps):
            _num(e, f"hum.eps[{i}]", v, 0, strict_lo=True)
    _num(e, "hum.cg_tol", h.cg_tol, 0, strict_lo=True)
    _num(e, "hum.max_iters", h.max_iters, 1, integer=True)
    d = cfg.data
    if d.kind not in DATA_KINDS:
        e["data.kind"] = f"must be one of {DATA_KINDS}"
    lo = 10 if cfg.kind.startswith("observability") else 1
    _num(e, "data.n_samples", d.n_samples, lo, integer=True)
    s = cfg.sweep
    if s.name is not None:
        if s.name not in COEFF_NAMES[1:]:
            e["sweep.name"] = f"must be one of {COEFF_NAMES[1:]}"
        if not (isinstance(s.values, tuple) and s.values):
            e["sweep.values"] = "must be a non-empty list"
        else:
            for i, v in enumerate(s.values):
                _num(e, f"sweep.values[{i}]", v)
    if e:
        raise ConfigInvalid(e)


class _Loader(yaml.SafeLoader):
    pass


# plain YAML 1.1 reads 1e-8 as a string
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _yaml(text):
    return yaml.load(text, Loader=_Loader)


def load_config(path, overrides=()) -> ExperimentConfig:
    """Read a YAML config and apply ``key.sub=value`` overrides (YAML values)."""
    try:
        d = _yaml(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as ex:
        raise ConfigInvalid({"<file>": str(ex)})
    for item in overrides:
        if "=" not in item:
            raise ConfigInvalid({item: "override must be key=value"})
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigInvalid({key: "cannot descend into a non-mapping"})
        node[parts[-1]] = _yaml(val)
    return config_from_dict(d)


def experiment_id(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True)
    return f"{cfg.kind}-{hashlib.sha1(blob.encode()).hexdigest()[:10]}"


# ----------------------------------------------------------- experiments

@dataclass
class _Setup:
    cfg: ExperimentConfig
    grid: object
    tree: object
    coeffs: CoefficientSet
    rng: np.random.Generator

    def coeffs_for(self, value):
        s = self.cfg.sweep
        if s.name is None or value is None:
            return self.coeffs
        return build_coefficients(self.cfg.coefficients, **{s.name: float(value)})

    def sweep_values(self):
        s = self.cfg.sweep
        return list(s.values) if s.name is not None else [None]

    def hum_cfg(self, eps):
        return HumConfig(epsilon=float(eps), cg_tol=float(self.cfg.hum.cg_tol),
                         cg_max_iters=int(self.cfg.hum.max_iters))

    def wf(self, lam):
        g = self.cfg.geometry
        psi = build_psi(self.grid, int(g.psi[0]), int(g.psi[1]))
        return WeightFamily(psi, float(self.cfg.weights.mu), float(lam), float(self.tree.T))


def _forward_datum(s: _Setup):
    x = s.grid.nodes
    k = s.cfg.data.kind
    if k == "zero":
        return np.zeros_like(x)
    if k == "random":
        return s.rng.standard_normal(x.size)
    return np.sin(np.pi * x)


def _backward_datum(s: _Setup):
    x, n = s.grid.nodes, 2 ** s.tree.L
    k = s.cfg.data.kind
    if k == "zero":
        return np.zeros((n, x.size))
    if k == "random":
        return s.rng.standard_normal((n, x.size))
    xi = s.rng.standard_normal((n, 1))
    eta = s.rng.standard_normal((n, 1))
    return np.sin(np.pi * x) * (1 + 0.5 * xi) + 0.3 * eta * np.sin(2 * np.pi * x)


def _sweep_cols(s: _Setup, value):
    return {"sweep_name": s.cfg.sweep.name or "", "sweep_value": "" if value is None else float(value)}


def _run_control(s: _Setup, rows: list, forward: bool) -> dict:
    datum = _forward_datum(s) if forward else _backward_datum(s)
    report = {"runs": []}
    for val in s.sweep_values():
        c = s.coeffs_for(val)
        for eps in s.cfg.hum.eps:
            solve = solve_hum_forward if forward else solve_hum_backward
            res = solve(s.grid, s.tree, datum, c, s.hum_cfg(eps))
            cr = cost_report(res, c, s.tree.T, s.cfg.weights.C_cal, s.grid, s.tree.times)
            ratio = res.terminal_residual / res.datum_norm_sq if res.datum_norm_sq > 0 else 0.0
            row = dict(_sweep_cols(s, val), eps=float(eps), terminal_norm_sq=res.terminal_residual,
                       terminal_ratio=ratio, datum_norm_sq=res.datum_norm_sq, cost=res.cost,
                       u_norm_sq=res.u_norm_sq, v_norm_sq=res.v_norm_sq, K=cr["K"],
                       log_ratio=cr["log_ratio"], C_fit=cr["C_fit"], iterations=res.iterations,
                       identity_error=res.identity_error)
            rows.append(row)
            report["runs"].append(row)
    return report


def _run_carleman(s: _Setup, rows: list, backward: bool) -> dict:
    which = "forward-obs" if backward else "backward-obs"
    lt = lambda_threshold(s.coeffs, s.tree.T, which, s.cfg.weights.C_cal, s.grid, s.tree.times)
    lam0 = s.cfg.weights.lam or lt.value
    lams = lambda_sweep(lam0, s.cfg.weights.n_lambda, s.cfg.weights.lambda_span)
    wf = s.wf(lam0)
    ens = default_ensemble(s.grid, s.tree, s.cfg.data.n_samples, s.rng, leaf=backward)
    reps = []
    for i, d in enumerate(ens):
        if backward:
            b = solve_backward(ProblemInstance("adjoint-backward", s.grid, s.tree, s.coeffs, d))
            rep = carleman_eval_backward(b, substitution_sources_backward(b, s.coeffs), wf, lams,
                                         coeffs=s.coeffs, threshold=lt.value)
        else:
            b = solve_forward(ProblemInstance("adjoint-forward", s.grid, s.tree, s.coeffs, d))
            rep = carleman_eval_forward(b, substitution_sources_forward(b, s.coeffs), wf, lams,
                                        coeffs=s.coeffs, threshold=lt.value)
        reps.append(rep)
        for j, lam in enumerate(lams):
            row = {"sample": i, "lambda": float(lam)}
            row.update({f"lhs_{k}": float(v[j]) for k, v in rep.lhs_terms.items()})
            row.update({f"rhs_{k}": float(v[j]) for k, v in rep.rhs_terms.items()})
            row.update(lhs=float(rep.lhs[j]), rhs=float(rep.rhs[j]), ratio=float(rep.ratio_per_lambda[j]))
            row.update({f"absorption_{k}": float(v[j]) for k, v in rep.absorption.items()})
            rows.append(row)
    batch = carleman_batch(reps)
    return {"lambda_threshold": lt.value, "r1": lt.r1, "r2": lt.r2,
            "lambda_grid": [float(v) for v in lams], "per_lambda": [float(v) for v in batch["per_lambda"]],
            "C": batch["C"], "variation": batch["variation"], "C_min": batch["C_min"],
            "C_median": batch["C_median"], "C_max": batch["C_max"],
            "absorption_max": {k: float(max(np.max(r.absorption[k]) for r in reps)) for k in reps[0].absorption}}


def _run_observability(s: _Setup, rows: list, forward: bool) -> dict:
    ens = default_ensemble(s.grid, s.tree, s.cfg.data.n_samples, s.rng, leaf=forward)
    out = {"runs": []}
    for val in s.sweep_values():
        c = s.coeffs_for(val)
        rep = (observability_forward if forward else observability_backward)(s.grid, s.tree, ens, c)
        for i, r in enumerate(rep.ratios):
            rows.append(dict(_sweep_cols(s, val), sample=i, ratio=float(r), K=rep.K))
        out["runs"].append(dict(_sweep_cols(s, val), size=rep.size, max_ratio=rep.max_ratio, K=rep.K,
                                C_obs=rep.C_obs, **rep.summary()))
    return out


def _run_oracle(s: _Setup, rows: list) -> dict:
    rng, g, tr, c = s.rng, s.grid, s.tree, s.coeffs
    eps = float(s.cfg.hum.eps[0])
    M, L = g.M, tr.L
    wf = s.wf(s.cfg.weights.lam or 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CFLWarning)
        zb = solve_backward(ProblemInstance("general-backward", g, tr, c, rng.standard_normal((2 ** L, M))))
        zf = solve_forward(ProblemInstance("general-forward", g, tr, c, rng.standard_normal(M)))
        for var in VARIANTS:
            if var == "forward":
                p = LqProblem(var, g, tr, c, rng.standard_normal(M), eps)
            elif var == "backward":
                p = LqProblem(var, g, tr, c, rng.standard_normal((2 ** L, M)), eps)
            else:
                p = LqProblem(var, g, tr, c, eps=eps, wf=wf, zdata=zb if var == "weighted-A" else zf)
            rows.append(compare_with_oracle(p, s.hum_cfg(eps)))
    return {"max_control_diff": max(max(r["max_du"], r["max_dv"]) for r in rows),
            "max_oracle_residual": max(r["oracle_residual"] for r in rows)}


def _run_ito(s: _Setup, rows: list) -> dict:
    for i in range(s.cfg.data.n_samples):
        c = random_coefficients(s.rng)
        d = duality_check(s.grid, s.tree, c, s.rng)
        rows.append({"sample": i, **d})
    return {"max_relative_residual": max(r["max"] for r in rows)}


def _run_weighted(s: _Setup, rows: list, variant: str) -> dict:
    lam = s.cfg.weights.lam or 1.0
    wf = s.wf(lam)
    out = {"runs": []}
    for i in range(s.cfg.data.n_samples):
        if variant == "A":
            zd = solve_backward(ProblemInstance("general-backward", s.grid, s.tree, s.coeffs,
                                                s.rng.standard_normal((2 ** s.tree.L, s.grid.M))))
        else:
            zd = solve_forward(ProblemInstance("general-forward", s.grid, s.tree, s.coeffs,
                                               s.rng.standard_normal(s.grid.M)))
        for eps in s.cfg.hum.eps:
            solve = solve_weighted_hum_A if variant == "A" else solve_weighted_hum_B
            res = solve(zd, lam, wf, s.hum_cfg(eps), s.coeffs)
            row = {"sample": i, "eps": float(eps), "iterations": res.iterations,
                   "terminal_norm_sq": res.terminal_residual, "identity_error": res.identity_error}
            row.update({k: float(v) for k, v in res.weighted_norms.items()})
            rows.append(row)
    return {"max_fitted_constant": max(r["fitted_constant"] for r in rows)}


def _dispatch(s: _Setup, rows: list) -> dict:
    k = s.cfg.kind
    if k.startswith("control-"):
        return _run_control(s, rows, k == "control-forward")
    if k.startswith("carleman-"):
        return _run_carleman(s, rows, k == "carleman-backward")
    if k.startswith("observability-"):
        return _run_observability(s, rows, k == "observability-forward")
    if k == "oracle-check":
        return _run_oracle(s, rows)
    if k == "ito-check":
        return _run_ito(s, rows)
    return _run_weighted(s, rows, k[-1])


# ------------------------------------------------------------------ output

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(e) for k, e in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(e) for e in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(e) for e in v.tolist()]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def rows_to_csv(rows: list) -> str:
    cols = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for c, v in r.items()})
    return buf.getvalue()


def run(cfg: ExperimentConfig, out: Optional[str] = None) -> dict:
    """Run one experiment, write its JSON record and CSV table, return the record.

    Solver errors propagate after the partial record has been written.
    """
    out_dir = Path(out or cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    eid = experiment_id(cfg)
    setup = _Setup(cfg, build_grid(int(cfg.geometry.M), tuple(cfg.geometry.g0), tuple(cfg.geometry.g1)),
                   build_tree(int(cfg.noise.L), float(cfg.noise.T)), build_coefficients(cfg.coefficients),
                   np.random.default_rng(int(cfg.seed)))
    rows: list = []
    record = {"experiment_id": eid, "kind": cfg.kind, "config": config_to_dict(cfg), "version": __version__}
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            report = _dispatch(setup, rows)
        record.update(status="ok", report=report)
        record["diagnostics"] = {"warnings": sorted({f"{w.category.__name__}: {w.message}" for w in caught})}
        return record
    except (SolverFailure, CgStalled, WeightOverflow) as ex:
        record.update(status="failed", error=f"{type(ex).__name__}: {ex}")
        raise
    finally:
        record["wall_time"] = time.perf_counter() - t0
        record["rows"] = rows
        (out_dir / f"{eid}.json").write_text(json.dumps(_jsonable(record), indent=1, sort_keys=True))
        (out_dir / f"{eid}.csv").write_text(rows_to_csv(rows), encoding="utf-8")
        record["paths"] = [str(out_dir / f"{eid}.json"), str(out_dir / f"{eid}.csv")]


def _f(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return float("nan")


def emit_plotdata(records: list, kind: str) -> list:
    """Tidy rows (experiment_id, x_name, x_value, y_name, y_value) in report order."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"kind must be one of {PLOT_KINDS}")
    out = []
    for rec in records:
        eid, rk, rep = rec.get("experiment_id", ""), rec.get("kind", ""), rec.get("report") or {}
        if kind in ("eps", "cost") and rk.startswith("control-"):
            for r in rep.get("runs", []):
                if kind == "eps":
                    out.append([eid, "eps", r["eps"], "terminal_ratio", r["terminal_ratio"]])
                else:
                    out.append([eid, "K", r["K"], "log_ratio", _f(r["log_ratio"])])
        elif kind == "lambda" and rk.startswith("carleman-"):
            for lam, v in zip(rep.get("lambda_grid", []), rep.get("per_lambda", [])):
                out.append([eid, "lambda", lam, "ratio", v])
        elif kind == "observability" and rk.startswith("observability-"):
            for r in rep.get("runs", []):
                name = r.get("sweep_name") or "sweep"
                x = r.get("sweep_value")
                out.append([eid, name, _f(x) if x != "" else float("nan"), "C_obs", r["C_obs"]])
    return out


def plotdata_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(PLOT_COLUMNS)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# -------------------------------------------------------------------- main

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="robinhum", description="Penalized HUM experiments on a scenario tree.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run one experiment from a YAML config")
    r.add_argument("--config", required=True)
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--out", default=None)
    p = sub.add_parser("plot-data", help="tidy tables from run records")
    p.add_argument("--records", required=True, help="directory or glob of JSON records")
    p.add_argument("--kind", required=True, choices=PLOT_KINDS)
    p.add_argument("--out", default=None, help="output CSV (default stdout)")
    args = ap.parse_args(argv)

    if args.cmd == "run":
        try:
            cfg = load_config(args.config, args.set)
        except ConfigInvalid as ex:
            for k, v in ex.errors.items():
                print(f"config error: {k}: {v}", file=sys.stderr)
            return 2
        try:
            rec = run(cfg, args.out)
        except (SolverFailure, CgStalled, WeightOverflow) as ex:
            print(f"solver error: {type(ex).__name__}: {ex}", file=sys.stderr)
            return 3
        print(json.dumps({"experiment_id": rec["experiment_id"], "paths": rec["paths"]}))
        return 0

    pattern = args.records
    if Path(pattern).is_dir():
        pattern = str(Path(pattern) / "*.json")
    records = []
    for path in sorted(glob.glob(pattern)):
        with open(path) as fh:
            records.append(json.load(fh))
    text = plotdata_csv(emit_plotdata(records, args.kind))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
