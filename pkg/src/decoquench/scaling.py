"""Scale extraction and power-law fitting.

Scales are read off simulation output with relative thresholds (midpoint
crossing, half maximum), so only log-log slopes carry physical meaning.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .dynamics import MomentumGrid, _fmt


@dataclass(frozen=True)
class ScalingSeries:
    label: str
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("x and y must be 1-d arrays of equal length")
        if np.any(x <= 0) or np.any(y <= 0):
            raise ValueError(f"{self.label}: scaling data must be positive")
        if np.any(np.diff(x) <= 0):
            raise ValueError(f"{self.label}: control values must be strictly increasing")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_pairs(cls, label: str, pairs) -> "ScalingSeries":
        pairs = sorted(pairs)
        return cls(label, np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))


@dataclass(frozen=True)
class ScalingPrediction:
    """Freeze-out exponents for a transition with exponents nu and z.

    Weak dephasing: t ~ tau^(nu z / (1 + nu z)), xi ~ tau^(nu / (1 + nu z)).
    Strong dephasing: t ~ (tau^(2 nu z) / gamma)^(1 / (1 + 2 nu z)),
    xi ~ (gamma tau)^(nu / (1 + 2 nu z)). Momentum ranges scale as 1 / xi.
    """

    nu: float = 1.0
    z: float = 1.0
    regime: str = "weak"

    def __post_init__(self):
        if not (self.nu > 0 and self.z > 0):
            raise ValueError("nu and z must be positive")
        if self.regime not in ("weak", "strong"):
            raise ValueError(f"unknown regime {self.regime!r}")

    @property
    def time_vs_tau(self) -> float:
        nz = self.nu * self.z
        return nz / (1 + nz) if self.regime == "weak" else 2 * nz / (1 + 2 * nz)

    @property
    def time_vs_gamma(self) -> float:
        return 0.0 if self.regime == "weak" else -1.0 / (1 + 2 * self.nu * self.z)

    @property
    def length_vs_tau(self) -> float:
        nz = self.nu * self.z
        return self.nu / (1 + nz) if self.regime == "weak" else self.nu / (1 + 2 * nz)

    @property
    def length_vs_gamma(self) -> float:
        return 0.0 if self.regime == "weak" else self.nu / (1 + 2 * self.nu * self.z)

    @property
    def momentum_vs_tau(self) -> float:
        return -self.length_vs_tau

    @property
    def momentum_vs_gamma(self) -> float:
        return -self.length_vs_gamma

    def crossover_gamma(self, tau: float) -> float:
        """gamma_c = tau^(nu z / (1 + nu z)), where the two regimes meet."""
        nz = self.nu * self.z
        return tau ** (nz / (1 + nz))


# ---------------------------------------------------------------------------
# Scale extraction
# ---------------------------------------------------------------------------

def halfway_time(t, sigma, sigma_initial: float, sigma_final: float) -> float:
    """First time t > 0 where sigma crosses (sigma_i + sigma_f) / 2, linearly interpolated."""
    t = np.asarray(t, dtype=float)
    d = np.asarray(sigma, dtype=float) - 0.5 * (sigma_initial + sigma_final)
    for i in range(len(t) - 1):
        if t[i + 1] <= 0:
            continue
        if d[i] == 0 and t[i] > 0:
            return float(t[i])
        if d[i] * d[i + 1] < 0:
            th = t[i] + (t[i + 1] - t[i]) * d[i] / (d[i] - d[i + 1])
            if th > 0:
                return float(th)
    if len(t) and t[-1] > 0 and d[-1] == 0:
        return float(t[-1])
    raise ValueError("relaxation incomplete — extend tf")


def radial_profile(values: np.ndarray, grid: MomentumGrid) -> tuple[np.ndarray, np.ndarray]:
    """Angle-averaged profile: annuli of width dk around k = 0.

    Only annuli fully inside the sampled square are kept.
    """
    kx, ky = grid.mesh()
    dk = grid.spacing
    idx = np.rint(np.hypot(kx, ky) / dk).astype(int).ravel()
    a = grid.axis()
    r_max = int(math.floor(min(-a[0], a[-1]) / dk))
    keep = idx <= r_max
    counts = np.bincount(idx[keep], minlength=r_max + 1)
    sums = np.bincount(idx[keep], weights=np.ravel(values)[keep], minlength=r_max + 1)
    ok = counts > 0
    return np.arange(r_max + 1)[ok] * dk, sums[ok] / counts[ok]


def momentum_range(k, p, p0: float | None = None) -> float:
    """Half width at half maximum: first k with p(k) <= p(0) / 2, interpolated."""
    k = np.asarray(k, dtype=float)
    p = np.asarray(p, dtype=float)
    p0 = float(p[0]) if p0 is None else float(p0)
    if not p0 > 0:
        raise ValueError("profile peak must be positive")
    half = 0.5 * p0
    below = np.flatnonzero(p <= half)
    if below.size == 0 or below[0] == 0:
        raise ValueError("profile unresolved — increase k_max")
    i = int(below[0])
    return float(k[i - 1] + (k[i] - k[i - 1]) * (p[i - 1] - half) / (p[i - 1] - p[i]))


# ---------------------------------------------------------------------------
# Fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    label: str
    exponent: float
    prefactor: float
    residual: float
    n_points: int


def power_law_fit(series: ScalingSeries) -> FitResult:
    """OLS of ln y on ln x; residual is the RMS of the log residuals."""
    if len(series.x) < 3:
        raise ValueError("power-law fit needs at least 3 points")
    lx, ly = np.log(series.x), np.log(series.y)
    slope, icpt = np.polyfit(lx, ly, 1)
    res = ly - (icpt + slope * lx)
    return FitResult(series.label, float(slope), float(math.exp(icpt)),
                     float(np.sqrt(np.mean(res * res))), len(lx))


def _broken_rms(lx, ly, u, e1, e2):
    shape = np.where(lx < u, e1 * lx, e1 * u + e2 * (lx - u))
    r = ly - shape
    r = r - r.mean()  # optimal ln a in closed form
    return float(np.sqrt(np.mean(r * r)))


def fit_crossover(series: ScalingSeries, exp_low: float, exp_high: float) -> float:
    """Knee x_c of a continuous broken power law with fixed slopes.

    y = a x^exp_low below x_c and a x_c^(exp_low - exp_high) x^exp_high above.
    The knee is searched between the third and third-last points. Raises when
    the broken law does not beat a free single power law by more than 5%
    in RMS log residual.
    """
    if len(series.x) < 6:
        raise ValueError("crossover fit needs at least 3 points per side")
    lx, ly = np.log(series.x), np.log(series.y)
    lo, hi = lx[2], lx[-3]
    cand = np.linspace(lo, hi, 201)
    costs = [_broken_rms(lx, ly, u, exp_low, exp_high) for u in cand]
    j = int(np.argmin(costs))
    step = cand[1] - cand[0]
    res = minimize_scalar(lambda u: _broken_rms(lx, ly, u, exp_low, exp_high),
                          bounds=(max(lo, cand[j] - step), min(hi, cand[j] + step)),
                          method="bounded", options={"xatol": 1e-10})
    u, best = (res.x, res.fun) if res.fun <= costs[j] else (cand[j], costs[j])
    single = power_law_fit(series).residual
    if not best < 0.95 * single:
        raise ValueError("no crossover detected")
    return float(math.exp(u))


def write_fit_report(path, fits) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "exponent", "prefactor", "residual", "n_points"])
        for f in fits:
            w.writerow([f.label, _fmt(f.exponent), _fmt(f.prefactor), _fmt(f.residual), f.n_points])


def format_fit_summary(fits, expected: dict | None = None) -> str:
    """Readable table; ``expected`` maps a label to predicted exponents to list next to it."""
    expected = expected or {}
    lines = [f"{'label':<28} {'exponent':>9} {'prefactor':>11} {'rms':>9} {'n':>4}  expected"]
    for f in fits:
        exp = ", ".join(f"{e:.4g}" for e in expected.get(f.label, ()))
        lines.append(f"{f.label:<28} {f.exponent:9.4f} {f.prefactor:11.4g} "
                     f"{f.residual:9.2e} {f.n_points:4d}  {exp}")
    return "\n".join(lines) + "\n"
