"""Benchmark harness: flat key-value configuration, seeded trials, traces and summaries.

Configuration files hold one ``key = value`` per line (``#`` starts a
comment). Solver-wide defaults use bare keys (``inner_k = 50``); a solver
label listed in ``solvers`` can override any solver field with a dotted key
(``low06.sigma0_sq = 0.6``). A label's variant defaults to the label
itself.

Trial ``i`` uses seed ``base_seed + i``. For ``meg_like`` the leadfield is
drawn once from ``base_seed`` and shared by every trial.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .experiments import (
    GroundTruth,
    TrialSpec,
    aggregate_median,
    generate,
    recon_snr_db,
    support_metrics,
    time_to_convergence,
)
from .matrix_io import atomic_write_bytes, read_matrix, write_matrix
from .model import ProblemInstance, eval_type2
from .solvers import VARIANTS, SolverConfig, SolverResult, solve

logger = logging.getLogger(__name__)

TRACE_HEADER = ("iter", "wall_seconds", "objective", "data_fit", "n_active", "recon_snr_db")
TIMING_KEYS = ("wall_seconds", "time_to_convergence")

EXIT_OK, EXIT_CONFIG, EXIT_TRIAL_FAILURE = 0, 1, 2


class ConfigError(ValueError):
    pass


_SOLVER_FIELDS = {f.name: f.type for f in fields(SolverConfig)} | {"rho": "float"}

_TRIAL_KEYS = {
    "M": int, "N": int, "T": int, "active_fraction": float, "target_snr_db": float,
    "generator": str, "coherence": float, "rho": float,
}
_RUN_KEYS = {
    "n_trials": int, "base_seed": int, "parallelism": int, "out": str,
    "matrix_format": str, "leadfield": str, "solvers": str, "grid_points": int,
    "ttc_rel_tol": float,
}


@dataclass
class SolverSpec:
    label: str
    config: SolverConfig
    rho: Optional[float] = None


@dataclass
class BenchConfig:
    M: int = 300
    N: int = 1000
    T: int = 1
    active_fraction: float = 0.1
    target_snr_db: float = 25.0
    generator: str = "gaussian_cs"
    coherence: float = 0.9
    rho: float = 0.0
    solvers: list[SolverSpec] = field(default_factory=list)
    n_trials: int = 1
    base_seed: int = 0
    parallelism: int = 1
    out: str = "sbl_out"
    matrix_format: str = "binary"
    leadfield: Optional[str] = None
    grid_points: int = 200
    ttc_rel_tol: float = 1e-4

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.matrix_format not in ("binary", "text"):
            raise ConfigError("matrix_format must be 'binary' or 'text'")
        if self.grid_points < 1:
            raise ConfigError("grid_points must be >= 1")

    def trial_spec(self, i: int) -> TrialSpec:
        return TrialSpec(self.M, self.N, self.T, self.active_fraction, self.target_snr_db,
                         self.generator, self.base_seed + i, self.rho)


# --------------------------------------------------------------------------
# parsing

def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if not tok.startswith("--") or "=" not in tok:
            raise ConfigError(f"override {tok!r} must have the form --key=value")
        key, value = tok[2:].split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _convert(key: str, value: str, kind):
    try:
        if kind in (bool, "bool"):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
        if kind in ("Optional[float]",):
            return None if value.lower() in ("", "none") else float(value)
        return value
    except ValueError:
        raise ConfigError(f"invalid value {value!r} for key {key!r}") from None


def _solver_kind(name: str):
    kind = _SOLVER_FIELDS[name]
    return {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)


def build_solver_specs(kv: dict[str, str], default_variant: Optional[str] = None) -> list[SolverSpec]:
    labels = [s.strip() for s in kv.get("solvers", default_variant or "").split(",") if s.strip()]
    if not labels:
        raise ConfigError("no solvers configured (set 'solvers' or 'variant')")
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate solver labels in {labels}")
    base = {k: v for k, v in kv.items() if k in _SOLVER_FIELDS and k != "rho"}
    specs = []
    for label in labels:
        values = dict(base)
        values.setdefault("variant", label if label in VARIANTS else base.get("variant", ""))
        rho = None
        prefix = label + "."
        for k, v in kv.items():
            if k.startswith(prefix):
                name = k[len(prefix):]
                if name not in _SOLVER_FIELDS:
                    raise ConfigError(f"unknown solver field {name!r} in key {k!r}")
                if name == "rho":
                    rho = _convert(k, v, float)
                else:
                    values[name] = v
        typed = {name: _convert(name, v, _solver_kind(name)) for name, v in values.items()}
        try:
            specs.append(SolverSpec(label, SolverConfig(**typed), rho))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"solver {label!r}: {exc}") from None
    return specs


def build_config(kv: dict[str, str]) -> BenchConfig:
    labels = [s.strip() for s in kv.get("solvers", "").split(",") if s.strip()]
    for key in kv:
        head = key.split(".", 1)[0]
        if key in _TRIAL_KEYS or key in _RUN_KEYS or key in _SOLVER_FIELDS:
            continue
        if "." in key and head in labels:
            continue
        raise ConfigError(f"unknown configuration key {key!r}")
    values = {}
    for key, kind in (_TRIAL_KEYS | _RUN_KEYS).items():
        if key in kv and key != "solvers":
            values[key] = _convert(key, kv[key], kind)
    values["solvers"] = build_solver_specs(kv, kv.get("variant"))
    try:
        cfg = BenchConfig(**values)
        cfg.trial_spec(0)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_kv(config_path: Optional[str], overrides: list[str]) -> dict[str, str]:
    kv = {}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        kv.update(parse_kv_text(text, config_path))
    kv.update(parse_overrides(overrides))
    return kv


# --------------------------------------------------------------------------
# output records

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    if isinstance(x, (list, tuple)):
        return ",".join(_fmt(v) for v in x)
    return str(x)


def format_kv(record: dict) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in record.items())


def trace_csv(result: SolverResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for t in result.trace:
        w.writerow([t.iter, _fmt(float(t.wall_seconds)), _fmt(float(t.objective)),
                    _fmt(float(t.data_fit)), t.n_active,
                    "" if t.recon_snr_db is None else _fmt(float(t.recon_snr_db))])
    return buf.getvalue()


def read_trace_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != TRACE_HEADER:
        raise ValueError(f"{path}: unexpected trace header {rows[0]}")
    cols = list(zip(*rows[1:])) if len(rows) > 1 else [()] * len(TRACE_HEADER)
    out = {}
    for name, col in zip(TRACE_HEADER, cols):
        out[name] = np.array([float(c) if c != "" else np.nan for c in col])
    return out


def summarize(label: str, spec: SolverSpec, problem: ProblemInstance, result: SolverResult,
              truth: Optional[GroundTruth], ttc_rel_tol: float, extra: Optional[dict] = None) -> dict:
    times = [t.wall_seconds for t in result.trace]
    objs = [t.objective for t in result.trace]
    rec = {"solver": label}
    if extra:
        rec.update(extra)
    rec.update({
        "final_objective": float(objs[-1]) if objs else math.nan,
        "final_type2": eval_type2(problem, result.gamma),
        "n_active": result.estimate.n_active,
        "outer_iterations": result.outer_iterations,
        "converged": result.converged,
    })
    if truth is not None and np.any(truth.X_true != 0):
        p, r, f1 = support_metrics(truth, result.estimate)
        rec.update({"recon_snr_db": recon_snr_db(truth.X_true, result.estimate.X),
                    "precision": p, "recall": r, "f1": f1})
    else:
        rec.update({"recon_snr_db": None, "precision": None, "recall": None, "f1": None})
    rec["wall_seconds"] = float(times[-1]) if times else 0.0
    rec["time_to_convergence"] = time_to_convergence(times, objs, ttc_rel_tol)
    for f in fields(SolverConfig):
        rec[f"config.{f.name}"] = getattr(spec.config, f.name)
    rec["config.rho"] = problem.rho
    rec["config.noise_var"] = problem.noise_var
    return rec


def strip_timing(record: dict) -> dict:
    return {k: v for k, v in record.items() if k not in TIMING_KEYS}


# --------------------------------------------------------------------------
# running

def run_solver(problem: ProblemInstance, spec: SolverSpec, truth=None) -> SolverResult:
    if spec.rho is not None and spec.rho != problem.rho:
        problem = ProblemInstance(problem.G, problem.Y, problem.noise_var, spec.rho)
    return solve(problem, spec.config, truth)


def write_solver_outputs(directory: Path, trace_text: str, summary: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(directory / "trace.csv", trace_text.encode())
    atomic_write_bytes(directory / "summary.txt", format_kv(summary).encode())


def _leadfield(cfg: BenchConfig):
    return None if not cfg.leadfield else read_matrix(cfg.leadfield)


def make_trial(cfg: BenchConfig, i: int, leadfield=None):
    return generate(cfg.trial_spec(i), cfg.coherence, leadfield=leadfield,
                    leadfield_seed=cfg.base_seed)


def _run_trial(cfg: BenchConfig, i: int, leadfield) -> dict:
    """Generate trial ``i`` and run every solver; failures are captured per solver."""
    trial_dir = Path(cfg.out) / "trials" / f"trial_{i:04d}"
    out = {"trial": i, "results": {}}
    try:
        problem, truth = make_trial(cfg, i, leadfield)
    except Exception as exc:
        msg = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))
        last = msg.strip().splitlines()[-1]
        for spec in cfg.solvers:
            sdir = trial_dir / spec.label
            sdir.mkdir(parents=True, exist_ok=True)
            atomic_write_bytes(sdir / "error.txt", f"generation failed\n{msg}".encode())
            out["results"][spec.label] = {"error": f"generation failed: {last}"}
        return out
    for spec in cfg.solvers:
        sdir = trial_dir / spec.label
        try:
            result = run_solver(problem, spec, truth)
            run_problem = problem if spec.rho is None else replace_rho(problem, spec.rho)
            summary = summarize(spec.label, spec, run_problem, result, truth, cfg.ttc_rel_tol,
                                {"trial": i, "seed": cfg.base_seed + i})
            write_solver_outputs(sdir, trace_csv(result), summary)
            out["results"][spec.label] = {
                "summary": summary,
                "times": [t.wall_seconds for t in result.trace],
                "objective": [t.objective for t in result.trace],
                "recon_snr_db": [np.nan if t.recon_snr_db is None else t.recon_snr_db
                                 for t in result.trace],
            }
        except Exception as exc:
            msg = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))
            sdir.mkdir(parents=True, exist_ok=True)
            atomic_write_bytes(sdir / "error.txt", msg.encode())
            out["results"][spec.label] = {"error": msg.strip().splitlines()[-1]}
    return out


def replace_rho(problem: ProblemInstance, rho: float) -> ProblemInstance:
    return ProblemInstance(problem.G, problem.Y, problem.noise_var, rho)


def run_bench(cfg: BenchConfig) -> tuple[int, dict]:
    """Run every solver on every trial and write per-trial and aggregate outputs.

    Returns the exit code (0, or 2 if any trial failed) and the comparison
    table keyed by solver label.
    """
    out_dir = Path(cfg.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    leadfield = _leadfield(cfg)
    if cfg.parallelism == 1:
        trials = [_run_trial(cfg, i, leadfield) for i in range(cfg.n_trials)]
    else:
        with ProcessPoolExecutor(max_workers=cfg.parallelism) as pool:
            futures = [pool.submit(_run_trial, cfg, i, leadfield) for i in range(cfg.n_trials)]
            trials = [f.result() for f in futures]

    failed = False
    table = {}
    for spec in cfg.solvers:
        ok = [t["results"][spec.label] for t in trials if "summary" in t["results"][spec.label]]
        n_failed = cfg.n_trials - len(ok)
        failed |= n_failed > 0
        row = {"solver": spec.label, "variant": spec.config.variant,
               "n_ok": len(ok), "n_failed": n_failed}
        if ok:
            summaries = [r["summary"] for r in ok]
            row["median_recon_snr_db"] = _median(s["recon_snr_db"] for s in summaries)
            row["median_time_to_convergence"] = _median(s["time_to_convergence"] for s in summaries)
            row["median_f1"] = _median(s["f1"] for s in summaries)
            row["median_outer_iterations"] = _median(s["outer_iterations"] for s in summaries)
            horizon = max(r["times"][-1] for r in ok if r["times"]) if any(r["times"] for r in ok) else 0.0
            grid = np.linspace(0.0, horizon, cfg.grid_points)
            snr = aggregate_median([(r["times"], r["recon_snr_db"]) for r in ok], grid)
            obj = aggregate_median([(r["times"], r["objective"]) for r in ok], grid)
            _write_aggregate(out_dir / f"aggregate_{spec.label}.csv", grid, snr.median, obj.median)
        table[spec.label] = row
    _write_comparison(out_dir / "comparison.csv", table)
    return (EXIT_TRIAL_FAILURE if failed else EXIT_OK), table


def _median(values) -> Optional[float]:
    vals = [float(v) for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.median(vals)) if vals else None


def _write_aggregate(path: Path, grid, snr, obj) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "median_recon_snr_db", "median_objective"])
    for row in zip(grid, snr, obj):
        w.writerow([_fmt(float(x)) for x in row])
    atomic_write_bytes(path, buf.getvalue().encode())


COMPARISON_COLUMNS = ("solver", "variant", "n_ok", "n_failed", "median_recon_snr_db",
                      "median_time_to_convergence", "median_f1", "median_outer_iterations")


def _write_comparison(path: Path, table: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARISON_COLUMNS)
    for row in table.values():
        w.writerow([_fmt(row.get(c)) for c in COMPARISON_COLUMNS])
    atomic_write_bytes(path, buf.getvalue().encode())


def format_table(table: dict) -> str:
    head = f"{'solver':<14}{'variant':<12}{'ok':>4}{'fail':>5}{'SNR dB':>10}{'t_conv s':>10}{'F1':>7}"
    lines = [head]
    for row in table.values():
        def num(key, spec):
            v = row.get(key)
            return f"{v:{spec}}" if v is not None else f"{'-':>{spec.split('.')[0]}}"
        lines.append(f"{row['solver']:<14}{row['variant']:<12}{row['n_ok']:>4}{row['n_failed']:>5}"
                     f"{num('median_recon_snr_db', '10.2f')}{num('median_time_to_convergence', '10.3f')}"
                     f"{num('median_f1', '7.3f')}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# gen / solve

def write_trial_files(directory: Path, problem: ProblemInstance, truth: GroundTruth,
                      spec: TrialSpec, fmt: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    ext = "bin" if fmt == "binary" else "txt"
    write_matrix(directory / f"G.{ext}", problem.G, fmt)
    write_matrix(directory / f"Y.{ext}", problem.Y, fmt)
    write_matrix(directory / f"X_true.{ext}", truth.X_true, fmt)
    meta = {
        "generator": spec.generator, "M": spec.M, "N": spec.N, "T": spec.T,
        "active_fraction": spec.active_fraction, "target_snr_db": spec.target_snr_db,
        "seed": spec.seed, "noise_var": problem.noise_var, "rho": problem.rho,
        "sensor_snr_db": truth.sensor_snr_db,
    }
    for k, v in truth.metadata.items():
        meta[k] = v
    atomic_write_bytes(directory / "meta.txt", format_kv(meta).encode())


def run_gen(cfg: BenchConfig) -> list[Path]:
    out_dir = Path(cfg.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    leadfield = _leadfield(cfg)
    dirs = []
    for i in range(cfg.n_trials):
        problem, truth = make_trial(cfg, i, leadfield)
        d = out_dir / f"trial_{i:04d}"
        write_trial_files(d, problem, truth, cfg.trial_spec(i), cfg.matrix_format)
        dirs.append(d)
    return dirs


def _find_matrix(directory: Path, stem: str) -> Optional[Path]:
    for ext in ("bin", "txt"):
        p = directory / f"{stem}.{ext}"
        if p.exists():
            return p
    return None


def load_problem(kv: dict[str, str]) -> tuple[ProblemInstance, Optional[GroundTruth]]:
    """Problem for ``solve``: from a ``problem`` directory written by ``gen``,
    from explicit ``G``/``Y`` files, or generated from the trial keys
    (``trial`` selects the index)."""
    meta = {}
    G_path = kv.get("G")
    Y_path = kv.get("Y")
    X_path = kv.get("X_true")
    if "problem" in kv:
        d = Path(kv["problem"])
        meta_path = d / "meta.txt"
        if meta_path.exists():
            meta = parse_kv_text(meta_path.read_text(), str(meta_path))
        G_path = G_path or _find_matrix(d, "G")
        Y_path = Y_path or _find_matrix(d, "Y")
        X_path = X_path or _find_matrix(d, "X_true")
        if G_path is None or Y_path is None:
            raise ConfigError(f"problem directory {d} lacks G or Y matrix files")
    if G_path is None and Y_path is None:
        cfg_kv = {k: v for k, v in kv.items() if k in _TRIAL_KEYS or k in ("base_seed", "leadfield")}
        cfg = BenchConfig(**{k: _convert(k, v, (_TRIAL_KEYS | _RUN_KEYS)[k]) for k, v in cfg_kv.items()},
                          solvers=[])
        i = int(kv.get("trial", "0"))
        return make_trial(cfg, i, _leadfield(cfg))
    if G_path is None or Y_path is None:
        raise ConfigError("solve needs both G and Y")
    G = read_matrix(G_path)
    Y = read_matrix(Y_path)
    if G.shape[0] != Y.shape[0]:
        raise ConfigError(f"dimension mismatch: G is {G.shape[0]}x{G.shape[1]} ({G_path}) "
                          f"but Y is {Y.shape[0]}x{Y.shape[1]} ({Y_path})")
    if "noise_var" in kv:
        noise_var = _convert("noise_var", kv["noise_var"], float)
    elif "noise_var" in meta:
        noise_var = float(meta["noise_var"])
    else:
        raise ConfigError("noise_var must be given (or present in the problem's meta.txt)")
    rho = _convert("rho", kv.get("rho", meta.get("rho", "0")), float)
    problem = ProblemInstance(G, Y, noise_var, rho)
    truth = None
    if X_path is not None:
        X = read_matrix(X_path)
        if X.shape != (G.shape[1], Y.shape[1]):
            raise ConfigError(f"dimension mismatch: X_true is {X.shape[0]}x{X.shape[1]}, "
                              f"expected {G.shape[1]}x{Y.shape[1]}")
        support = frozenset(int(i) for i in np.flatnonzero(np.any(X != 0, axis=1)))
        truth = GroundTruth(X, support, float(meta.get("sensor_snr_db", "nan")))
    return problem, truth


SOLVE_KEYS = {"problem", "G", "Y", "X_true", "noise_var", "trial", "variant"}


def run_solve(kv: dict[str, str]) -> dict:
    for key in kv:
        head = key.split(".", 1)[0]
        if key in SOLVE_KEYS or key in _TRIAL_KEYS or key in _RUN_KEYS or key in _SOLVER_FIELDS:
            continue
        if "." in key and head in kv.get("solvers", ""):
            continue
        raise ConfigError(f"unknown key {key!r} for solve")
    specs = build_solver_specs(kv, kv.get("variant", "reweighted"))
    spec = specs[0]
    if "rho" in kv and spec.rho is None:
        spec = SolverSpec(spec.label, spec.config, _convert("rho", kv["rho"], float))
    problem, truth = load_problem(kv)
    if spec.rho is not None:
        problem = replace_rho(problem, spec.rho)
    result = run_solver(problem, spec, truth)
    summary = summarize(spec.label, spec, problem, result, truth,
                        _convert("ttc_rel_tol", kv.get("ttc_rel_tol", "1e-4"), float))
    out = Path(kv.get("out", "sbl_solve"))
    write_solver_outputs(out, trace_csv(result), summary)
    return summary
