"""Config-driven sweeps: momentum-space quenches, lattice ensembles and scaling analysis.

An experiment is one INI document. ``[experiment]`` holds ``kind``
(momentum_quench, lattice_quench or analyze), the output directory and the
worker count; ``[schedule]`` the swept tau and gamma values; ``[grid]``,
``[lattice]``, ``[observables]`` and ``[analyze]`` the kind-specific knobs.
Every run writes flat CSV files; the manifest with checksums is written last,
so an interrupted sweep is recognisable by its missing or partial manifest.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import (LatticeBloch, LinearizedDirac, MomentumGrid, QuenchSchedule, _fmt,
                       iter_states, write_snapshots_csv, GridEvolution)
from .lattice import (lattice_schedule, run_disorder_ensemble, write_autocorrelation_csv,
                      write_ensemble_summary_csv, write_field_csv)
from .observables import (HallParams, SpinField, excitation_density, field_on_grid,
                          hall_conductivity, measure, write_observables_csv)
from .scaling import (ScalingPrediction, ScalingSeries, fit_crossover, format_fit_summary,
                      halfway_time, momentum_range, power_law_fit, radial_profile,
                      write_fit_report)

OUTPUT_ROOT_ENV = "DECOQUENCH_OUTPUT_ROOT"
KINDS = ("momentum_quench", "lattice_quench", "analyze")

# section -> allowed keys
SCHEMA = {
    "experiment": {"kind", "output", "workers"},
    "schedule": {"tau", "gamma", "gamma_rule", "t0", "tf", "dt", "method"},
    "grid": {"model", "k_max", "n"},
    "lattice": {"L", "delta_t", "seeds", "dump_fields"},
    "observables": {"snapshots", "hall_T", "dump_spins"},
    "analyze": {"manifests", "quantity", "against", "crossover"},
}
QUANTITIES = {"t_half": "time", "k_bar": "momentum", "xi_mean": "length"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    output: str = "results"
    workers: int = 0
    tau: list = field(default_factory=list)
    gamma: list = field(default_factory=lambda: [0.0])
    gamma_rule: tuple | None = None  # (c, p): gamma = c * tau^p
    t0: float | None = None
    tf: float | None = None
    dt: float | None = None
    method: str = "auto"
    model: str = "linearized"
    k_max: float | None = None
    n: int = 128
    L: int = 30
    delta_t: float = 0.1
    seeds: list = field(default_factory=lambda: list(range(50)))
    dump_fields: bool = True
    snapshots: int = 201
    hall_T: float | None = None
    dump_spins: bool = False
    manifests: list = field(default_factory=list)
    quantity: str = "t_half"
    against: str = "tau"
    crossover: bool = False

    @property
    def n_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def runs(self) -> list[tuple[float, float]]:
        """Expanded (tau, gamma) pairs in sweep order."""
        if self.gamma_rule is not None:
            c, p = self.gamma_rule
            return [(t, c * t ** p) for t in self.tau]
        return [(t, g) for t in self.tau for g in self.gamma]

    def to_text(self) -> str:
        """INI text that parses back to an equal config."""
        cp = configparser.ConfigParser()
        cp.optionxform = str
        d = asdict(self)
        default = ExperimentConfig(self.kind)
        for sec, keys in SCHEMA.items():
            for k in sorted(keys):
                if k == "gamma_rule":
                    if self.gamma_rule is not None:
                        cp.setdefault(sec, {})
                        cp[sec][k] = f"{_fmt(self.gamma_rule[0])} * tau ^ {_fmt(self.gamma_rule[1])}"
                    continue
                v = d[k]
                if k not in ("kind",) and v == getattr(default, k) and k != "tau":
                    continue
                if v is None:
                    continue
                if not cp.has_section(sec):
                    cp.add_section(sec)
                cp[sec][k] = _render(v)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _render(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, list):
        return ", ".join(_render(x) for x in v)
    if isinstance(v, float):
        return _fmt(v)
    return str(v)


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.replace(",", " ").split()]


def _seeds(s: str) -> list[int]:
    """Comma/space separated integers; "a-b" is an inclusive range."""
    out = []
    for part in s.replace(",", " ").split():
        a, sep, b = part.partition("-")
        if sep and a:
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


_RULE = re.compile(r"^\s*([-+0-9.eE]+)\s*\*\s*tau\s*\^\s*([-+0-9.eE]+)\s*$")


def parse_config(text: str, base_dir: str | os.PathLike | None = None) -> ExperimentConfig:
    """Parse and validate an experiment document.

    Relative manifest paths of an analyze config resolve against ``base_dir``.
    """
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    unknown = []
    for sec in cp.sections():
        if sec not in SCHEMA:
            unknown.append(f"[{sec}]")
            continue
        unknown.extend(f"{sec}.{k}" for k in cp[sec] if k not in SCHEMA[sec])
    if unknown:
        raise ConfigError("unknown keys: " + ", ".join(unknown))
    if not cp.has_option("experiment", "kind"):
        raise ConfigError("missing experiment.kind")
    kind = cp["experiment"]["kind"].strip()
    if kind not in KINDS:
        raise ConfigError(f"experiment.kind must be one of {KINDS}, got {kind!r}")

    cfg = ExperimentConfig(kind)
    get = lambda sec, key: cp.get(sec, key, fallback=None)  # noqa: E731
    try:
        if (v := get("experiment", "output")) is not None:
            cfg.output = v.strip()
        if (v := get("experiment", "workers")) is not None:
            cfg.workers = int(v)
        if (v := get("schedule", "tau")) is not None:
            cfg.tau = _floats(v)
        if (v := get("schedule", "gamma")) is not None:
            cfg.gamma = _floats(v)
        if (v := get("schedule", "gamma_rule")) is not None:
            m = _RULE.match(v.split("=", 1)[-1] if "=" in v else v)
            if not m:
                raise ConfigError(f"schedule.gamma_rule must read 'c * tau ^ p', got {v!r}")
            cfg.gamma_rule = (float(m.group(1)), float(m.group(2)))
        for key in ("t0", "tf", "dt"):
            if (v := get("schedule", key)) is not None:
                setattr(cfg, key, float(v))
        if (v := get("schedule", "method")) is not None:
            cfg.method = v.strip()
        if (v := get("grid", "model")) is not None:
            cfg.model = v.strip()
        if (v := get("grid", "k_max")) is not None:
            cfg.k_max = float(v)
        if (v := get("grid", "n")) is not None:
            cfg.n = int(v)
        if (v := get("lattice", "L")) is not None:
            cfg.L = int(v)
        if (v := get("lattice", "delta_t")) is not None:
            cfg.delta_t = float(v)
        if (v := get("lattice", "seeds")) is not None:
            cfg.seeds = _seeds(v)
        if cp.has_option("lattice", "dump_fields"):
            cfg.dump_fields = cp.getboolean("lattice", "dump_fields")
        if (v := get("observables", "snapshots")) is not None:
            cfg.snapshots = int(v)
        if (v := get("observables", "hall_T")) is not None:
            cfg.hall_T = float(v)
        if cp.has_option("observables", "dump_spins"):
            cfg.dump_spins = cp.getboolean("observables", "dump_spins")
        if (v := get("analyze", "manifests")) is not None:
            paths = [p.strip() for p in v.replace("\n", ",").split(",") if p.strip()]
            if base_dir is not None:
                paths = [str(Path(base_dir) / p) if not os.path.isabs(p) else p for p in paths]
            cfg.manifests = paths
        if (v := get("analyze", "quantity")) is not None:
            cfg.quantity = v.strip()
        if (v := get("analyze", "against")) is not None:
            cfg.against = v.strip()
        if cp.has_option("analyze", "crossover"):
            cfg.crossover = cp.getboolean("analyze", "crossover")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value: {exc}") from exc
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.kind == "analyze":
        if not cfg.manifests:
            raise ConfigError("analyze.manifests is empty")
        if cfg.quantity not in QUANTITIES:
            raise ConfigError(f"analyze.quantity must be one of {sorted(QUANTITIES)}")
        if cfg.against not in ("tau", "gamma"):
            raise ConfigError("analyze.against must be tau or gamma")
        return
    if not cfg.tau:
        raise ConfigError("schedule.tau is empty")
    if any(not t > 0 for t in cfg.tau):
        raise ConfigError("schedule.tau: every tau must be positive")
    if cfg.gamma_rule is None and not cfg.gamma:
        raise ConfigError("schedule.gamma is empty")
    if any(not g >= 0 for g in cfg.gamma):
        raise ConfigError("schedule.gamma: every gamma must be non-negative")
    if cfg.gamma_rule is not None and cfg.gamma_rule[0] < 0:
        raise ConfigError("schedule.gamma_rule: coefficient must be non-negative")
    if cfg.method not in ("auto", "rk4", "exponential"):
        raise ConfigError("schedule.method must be auto, rk4 or exponential")
    if cfg.dt is not None and not cfg.dt > 0:
        raise ConfigError("schedule.dt must be positive")
    if cfg.kind == "momentum_quench":
        if cfg.model not in ("linearized", "lattice"):
            raise ConfigError("grid.model must be linearized or lattice")
        if cfg.n < 2 or (cfg.k_max is not None and not cfg.k_max > 0):
            raise ConfigError("grid: need n >= 2 and positive k_max")
        if cfg.snapshots < 2:
            raise ConfigError("observables.snapshots must be at least 2")
    if cfg.kind == "lattice_quench":
        if cfg.L < 2 or cfg.delta_t < 0:
            raise ConfigError("lattice: need L >= 2 and delta_t >= 0")
        if len(cfg.seeds) < 2:
            raise ConfigError("lattice.seeds needs at least 2 seeds")
    for tau, gamma in cfg.runs():
        t0, tf = _window(cfg, tau)
        if not t0 < 0 < tf:
            raise ConfigError(f"window [{t0}, {tf}] must straddle t = 0 (tau={tau})")
        if cfg.hall_T is not None and not cfg.hall_T > 0:
            raise ConfigError("observables.hall_T must be positive")


def _window(cfg: ExperimentConfig, tau: float) -> tuple[float, float]:
    if cfg.kind == "lattice_quench":
        d0, df = -0.5 * tau, 0.5 * tau
    else:
        d0, df = QuenchSchedule.default_window(tau)
    return (d0 if cfg.t0 is None else cfg.t0), (df if cfg.tf is None else cfg.tf)


# ---------------------------------------------------------------------------
# Single runs (pure: return data, never write)
# ---------------------------------------------------------------------------

def _momentum_setup(cfg: ExperimentConfig, tau: float, gamma: float):
    if cfg.model == "linearized":
        model = LinearizedDirac(tau)
        grid = (MomentumGrid.square(cfg.k_max, cfg.n) if cfg.k_max is not None
                else MomentumGrid.default_linearized(tau, gamma, cfg.n))
    else:
        model = LatticeBloch(tau)
        grid = MomentumGrid.brillouin(cfg.n)
    t0, tf = _window(cfg, tau)
    if cfg.dt is not None:
        method = "rk4" if cfg.method == "auto" else cfg.method
        sched = QuenchSchedule(tau, gamma, t0, tf, cfg.dt, method)
    else:
        sched = QuenchSchedule.for_quench(model, grid, gamma, t0=t0, tf=tf, method=cfg.method)
    hp = HallParams(cfg.hall_T) if cfg.hall_T is not None else HallParams.default(tau, gamma)
    return model, grid, sched, hp


def momentum_run(cfg: ExperimentConfig, tau: float, gamma: float) -> dict:
    """Quench one (tau, gamma) point; returns time series, final state and scales."""
    model, grid, sched, hp = _momentum_setup(cfg, tau, gamma)
    times = np.linspace(sched.t0, sched.tf, cfg.snapshots)
    records = []
    final = None
    for t, n in iter_states(model, grid, sched, times):
        fld = SpinField(grid, n.reshape(grid.n, grid.n, 3), t)
        records.append(measure(fld, model, hp))
        final = fld
    out = {"tau": tau, "gamma": gamma, "records": records, "final": final,
           "dt": sched.dt, "method": sched.method}
    sig_i = hall_conductivity(SpinField.ground_state(model, grid, sched.t0), model, hp)
    sig_f = hall_conductivity(SpinField.ground_state(model, grid, sched.tf), model, hp)
    out["sigma_initial"], out["sigma_final"] = sig_i, sig_f
    errors = []
    try:
        out["t_half"] = halfway_time([r.t for r in records], [r.sigma_H for r in records], sig_i, sig_f)
    except ValueError as exc:
        out["t_half"] = math.nan
        errors.append(str(exc))
    p = excitation_density(final.n, field_on_grid(model, grid, final.t))
    k, prof = radial_profile(p, grid)
    out["profile"] = (k, prof)
    try:
        out["k_bar"] = momentum_range(k, prof)
    except ValueError as exc:
        out["k_bar"] = math.nan
        errors.append(str(exc))
    out["errors"] = errors
    return out


def lattice_run(cfg: ExperimentConfig, tau: float, gamma: float):
    if cfg.dt is not None:
        method = "exponential" if cfg.method == "auto" else cfg.method
        t0, tf = _window(cfg, tau)
        sched = QuenchSchedule(tau, gamma, t0, tf, cfg.dt, method)
    else:
        method = "exponential" if cfg.method == "auto" else cfg.method
        sched = lattice_schedule(tau, gamma, method=method, L=cfg.L)
    return run_disorder_ensemble(cfg.L, cfg.delta_t, cfg.seeds, sched, workers=cfg.n_workers)


def _safe(fn, cfg, tau, gamma):
    try:
        return fn(cfg, tau, gamma), None
    except Exception as exc:  # recorded per run; the sweep goes on
        return None, f"{type(exc).__name__}: {exc}"


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    version: str
    kind: str
    status: str
    wall_clock_s: float
    runs: list
    files: dict

    @property
    def exit_code(self) -> int:
        return {"complete": 0, "partial": 3, "failed": 2}[self.status]


def output_dir(cfg: ExperimentConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    out = Path(cfg.output)
    if root:
        out = Path(root) / (out.name if out.is_absolute() else out)
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(outdir: Path, cfg, status, runs, files, started) -> RunManifest:
    man = RunManifest(cfg.digest(), __version__, cfg.kind, status,
                      round(time.time() - started, 3), runs,
                      {f: _sha256(outdir / f) for f in sorted(files)})
    (outdir / "config.ini").write_text(cfg.to_text())
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(asdict(man), fh, indent=2)
    return man


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Execute every run of the sweep, write CSVs, then the manifest."""
    if cfg.kind == "analyze":
        return analyze(cfg)
    started = time.time()
    outdir = output_dir(cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    stale = outdir / "manifest.json"
    if stale.exists():
        stale.unlink()
    pairs = cfg.runs()
    fn = momentum_run if cfg.kind == "momentum_quench" else lattice_run
    if cfg.kind == "momentum_quench" and cfg.n_workers > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.n_workers, len(pairs))) as pool:
            results = list(pool.map(_safe, [fn] * len(pairs), [cfg] * len(pairs),
                                    *zip(*pairs)))
    else:
        results = [_safe(fn, cfg, t, g) for t, g in pairs]
    files, runs = [], []
    summary_rows = []
    ensembles = []
    for i, ((tau, gamma), (res, err)) in enumerate(zip(pairs, results)):
        tag = f"run{i:03d}"
        entry = {"index": i, "tau": tau, "gamma": gamma, "files": []}
        if res is None:
            entry.update(status="failed", error=err)
            runs.append(entry)
            continue
        if cfg.kind == "momentum_quench":
            entry["files"] += _write_momentum(outdir, tag, res, cfg)
            status = "censored" if res["errors"] else "ok"
            entry.update(status=status, error="; ".join(res["errors"]) or None)
            summary_rows.append([_fmt(tau), _fmt(gamma), _fmt(res["t_half"]), _fmt(res["k_bar"]),
                                 _fmt(res["sigma_initial"]), _fmt(res["sigma_final"]), status])
        else:
            entry["files"] += _write_lattice(outdir, tag, res, cfg)
            ensembles.append(res)
            status = "censored" if res.n_censored or res.n_used < 2 else "ok"
            entry.update(status=status, n_censored=res.n_censored, error=None)
        files += entry["files"]
        runs.append(entry)
    if cfg.kind == "momentum_quench":
        with open(outdir / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "gamma", "t_half", "k_bar", "sigma_initial", "sigma_final", "status"])
            w.writerows(summary_rows)
        files.append("summary.csv")
    else:
        write_ensemble_summary_csv(outdir / "ensemble_summary.csv", ensembles)
        files.append("ensemble_summary.csv")
    states = {r["status"] for r in runs}
    if states == {"ok"}:
        status = "complete"
    elif states == {"failed"}:
        status = "failed"
    else:
        status = "partial"
    return _write_manifest(outdir, cfg, status, runs, files, started)


def _write_momentum(outdir: Path, tag: str, res: dict, cfg) -> list[str]:
    names = [f"{tag}_observables.csv", f"{tag}_profile.csv"]
    write_observables_csv(outdir / names[0], res["records"])
    k, prof = res["profile"]
    with open(outdir / names[1], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "p_exc"])
        w.writerows([_fmt(a), _fmt(b)] for a, b in zip(k, prof))
    if cfg.dump_spins:
        fin = res["final"]
        names.append(f"{tag}_spins.csv")
        write_snapshots_csv(outdir / names[-1], GridEvolution(fin.grid, np.array([fin.t]), fin.n[None]))
    return names


def _write_lattice(outdir: Path, tag: str, ens, cfg) -> list[str]:
    names = []
    if cfg.dump_fields:
        for rec in ens.records:
            a, b = f"{tag}_seed{rec.seed}_fex.csv", f"{tag}_seed{rec.seed}_autocorr.csv"
            write_field_csv(outdir / a, rec.f_ex)
            write_autocorrelation_csv(outdir / b, rec.r, rec.A)
            names += [a, b]
    return names


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

def load_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    man = json.loads(path.read_text())
    if man.get("status") not in ("complete", "partial"):
        raise ValueError(f"manifest {path} is not complete (status {man.get('status')!r})")
    for name, digest in man["files"].items():
        f = path.parent / name
        if not f.exists() or _sha256(f) != digest:
            raise ValueError(f"manifest {path}: file {name} missing or modified")
    return man


def _collect(cfg: ExperimentConfig) -> list[tuple[float, float]]:
    pts = []
    for mpath in cfg.manifests:
        man = load_manifest(mpath)
        base = Path(mpath).parent
        summary = base / ("summary.csv" if man["kind"] == "momentum_quench" else "ensemble_summary.csv")
        with open(summary, newline="") as fh:
            for row in csv.DictReader(fh):
                if cfg.quantity not in row:
                    raise ValueError(f"manifest {mpath} has no {cfg.quantity} column")
                x, y = float(row[cfg.against]), float(row[cfg.quantity])
                if math.isfinite(y) and y > 0 and x > 0:
                    pts.append((x, y))
    return pts


def expected_exponents(quantity: str, against: str) -> tuple[float, float]:
    """(weak, strong) predicted exponents for a measured scale."""
    kind = QUANTITIES[quantity]
    out = []
    for regime in ("weak", "strong"):
        p = ScalingPrediction(regime=regime)
        out.append(getattr(p, f"{kind}_vs_{against}"))
    return tuple(out)


def analyze(cfg: ExperimentConfig) -> RunManifest:
    """Fit the selected scale across all referenced manifests."""
    if not cfg.manifests:
        raise ValueError("analyze needs at least one manifest")
    started = time.time()
    pts = _collect(cfg)
    label = f"{cfg.quantity}_vs_{cfg.against}"
    series = ScalingSeries.from_pairs(label, pts)
    fit = power_law_fit(series)
    weak, strong = expected_exponents(cfg.quantity, cfg.against)
    text = format_fit_summary([fit], {label: (weak, strong)})
    text = text.replace("  expected", "  expected (weak, strong)", 1)
    if cfg.crossover:
        try:
            xc = fit_crossover(series, strong, weak) if cfg.against == "tau" else \
                fit_crossover(series, weak, strong)
            text += f"crossover {cfg.against}_c = {xc:.6g}\n"
        except ValueError as exc:
            text += f"crossover: {exc}\n"
    outdir = output_dir(cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    write_fit_report(outdir / "fit_report.csv", [fit])
    (outdir / "fit_summary.txt").write_text(text)
    runs = [{"manifest": str(m), "status": "ok"} for m in cfg.manifests]
    return _write_manifest(outdir, cfg, "complete", runs, ["fit_report.csv", "fit_summary.txt"],
                           started)
