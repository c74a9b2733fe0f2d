"""Diagnostics of pseudo-spin fields: excitation, entropy, topology, energy, Hall response.

Grid sums carry the momentum measure dk^2 of the grid. Totals "per area"
divide by (2 pi)^2 so they read as densities per unit real-space area.
The Hall conductivity is reported in units of 2 pi.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, fields

import numpy as np

from .dynamics import FieldModel, LinearizedDirac, MomentumGrid, NORM_TOL, _fmt

FOUR_PI = 4.0 * math.pi


@dataclass
class SpinField:
    """Pseudo-spin vectors on every grid point at one time; n has shape (n, n, 3)."""

    grid: MomentumGrid
    n: np.ndarray
    t: float

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=float)
        if self.n.shape != (self.grid.n, self.grid.n, 3):
            raise ValueError(f"spin array shape {self.n.shape} does not match grid n={self.grid.n}")
        if np.max(np.linalg.norm(self.n, axis=-1)) > 1.0 + NORM_TOL:
            raise ValueError("pseudo-spin length exceeds 1")

    @classmethod
    def ground_state(cls, model: FieldModel, grid: MomentumGrid, t: float) -> "SpinField":
        h = field_on_grid(model, grid, t)
        return cls(grid, -h / np.linalg.norm(h, axis=-1, keepdims=True), t)


@dataclass(frozen=True)
class HallParams:
    """Probe time scale T of the Hall response.

    When ``tau`` is given, warns if T > tau / 10, where the response is no
    longer instantaneous on the quench scale.
    """

    T: float
    tau: float | None = None

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"probe time T must be positive, got {self.T}")
        if self.tau is not None and self.T > self.tau / 10.0:
            warnings.warn(f"probe time T={self.T:g} exceeds tau/10={self.tau / 10:g}",
                          stacklevel=2)

    @classmethod
    def default(cls, tau: float, gamma: float = 0.0) -> "HallParams":
        """T = 10 max(tau^1/2, (gamma tau)^1/3): beyond both freeze-out times."""
        return cls(10.0 * max(math.sqrt(tau), (gamma * tau) ** (1.0 / 3.0)))


def field_on_grid(model: FieldModel, grid: MomentumGrid, t: float) -> np.ndarray:
    kx, ky = grid.mesh()
    return np.stack(model.components(kx, ky, t), axis=-1)


# ---------------------------------------------------------------------------
# Local quantities
# ---------------------------------------------------------------------------

def excitation_density(n, h) -> np.ndarray | float:
    """Upper-band weight p = (1 + h_hat . n) / 2; broadcasts over leading axes."""
    n = np.asarray(n, dtype=float)
    h = np.asarray(h, dtype=float)
    hn = np.linalg.norm(h, axis=-1)
    if np.any(hn == 0):
        raise ValueError("undefined band basis: |h| = 0")
    p = 0.5 * (1.0 + np.sum(h * n, axis=-1) / hn)
    return float(p) if p.ndim == 0 else p


def thermal_entropy(n) -> np.ndarray | float:
    """Binary entropy (bits) of the eigenvalues (1 +- |n|) / 2."""
    r = np.linalg.norm(np.asarray(n, dtype=float), axis=-1)
    if np.any(r > 1.0 + NORM_TOL):
        raise ValueError(f"|n| = {float(np.max(r))} exceeds 1")
    r = np.minimum(r, 1.0)
    s = np.zeros_like(r)
    for p in (0.5 * (1.0 + r), 0.5 * (1.0 - r)):
        pos = p > 0
        s[pos] -= p[pos] * np.log2(p[pos])
    return float(s) if s.ndim == 0 else s


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

def _triangle_angle(a, b, c):
    # signed solid angle of the spherical triangle (a, b, c) of unit vectors
    num = np.sum(a * np.cross(b, c), axis=-1)
    den = 1.0 + np.sum(a * b, axis=-1) + np.sum(b * c, axis=-1) + np.sum(c * a, axis=-1)
    return 2.0 * np.arctan2(num, den)


def solid_angle_sum(u: np.ndarray, periodic: bool) -> float:
    """Total signed solid angle / 4 pi swept by a unit-vector field u[i, j].

    Each plaquette (i, j)-(i+1, j)-(i+1, j+1)-(i, j+1) is split into two
    spherical triangles. Periodic grids wrap around; open grids only use the
    interior plaquettes.
    """
    if periodic:
        b = np.roll(u, -1, axis=0)
        c = np.roll(b, -1, axis=1)
        d = np.roll(u, -1, axis=1)
        a = u
    else:
        a, b, c, d = u[:-1, :-1], u[1:, :-1], u[1:, 1:], u[:-1, 1:]
    total = np.sum(_triangle_angle(a, b, c)) + np.sum(_triangle_angle(a, c, d))
    return float(total) / FOUR_PI


def winding_number(model: FieldModel, m: float, grid: MomentumGrid) -> int:
    """Winding number of h_hat over a periodic Brillouin-zone grid at mass m."""
    if not grid.periodic:
        raise ValueError("winding number needs a periodic Brillouin-zone grid")
    kx, ky = grid.mesh()
    h = np.stack(model.components_at_mass(kx, ky, m), axis=-1)
    hn = np.linalg.norm(h, axis=-1)
    if np.any(hn <= 1e-12):
        raise ValueError("winding undefined at transition: gapless point on grid")
    return int(round(solid_angle_sum(h / hn[..., None], periodic=True)))


def _rect_solid_angle(x1, x2, y1, y2, m):
    """Integral of m / (x^2 + y^2 + m^2)^(3/2) over [x1, x2] x [y1, y2]."""
    if m == 0:
        return 0.0
    am = abs(m)

    def f(x, y):
        return math.atan(x * y / (am * math.sqrt(x * x + y * y + m * m)))

    return math.copysign(f(x2, y2) - f(x1, y2) - f(x2, y1) + f(x1, y1), m)


def adiabatic_exterior_chern(grid: MomentumGrid, m: float) -> float:
    """Chern contribution of the ground state n = -h_hat of the linearized
    cone outside the rectangle spanned by an open grid.

    Momenta far beyond the freeze-out scale follow the field adiabatically,
    so their share of the integral is known in closed form.
    """
    a = grid.axis()
    inside = _rect_solid_angle(a[0], a[-1], a[0], a[-1], m)
    whole = 2.0 * math.pi * (0.0 if m == 0 else math.copysign(1.0, m))
    return -(whole - inside) / FOUR_PI


def chern_number(field: SpinField, model: FieldModel | None = None) -> float:
    """Chern number of the state field n_hat.

    On a periodic grid this is the plain solid-angle sum. On an open
    linearized grid the sum only covers the sampled patch; passing the
    ``LinearizedDirac`` model adds the adiabatic exterior so that the value
    refers to the whole plane.
    """
    r = np.linalg.norm(field.n, axis=-1)
    if np.any(r <= 1e-12):
        raise ValueError("Chern undefined for fully mixed momentum: |n| = 0 on grid")
    c = solid_angle_sum(field.n / r[..., None], periodic=field.grid.periodic)
    if not field.grid.periodic and isinstance(model, LinearizedDirac):
        c += adiabatic_exterior_chern(field.grid, model.mass(field.t))
    return c


# ---------------------------------------------------------------------------
# Energy and Hall response
# ---------------------------------------------------------------------------

def energy(field: SpinField, model: FieldModel) -> float:
    """E = 1/2 sum_k h_k . n_k dk^2."""
    h = field_on_grid(model, field.grid, field.t)
    return 0.5 * float(np.sum(np.sum(h * field.n, axis=-1))) * field.grid.cell_area


def hall_conductivity(field: SpinField, model: FieldModel, p: HallParams) -> float:
    """sigma_H / 2 pi = (1/2pi) 1/2 sum n . (dh/dkx x dh/dky) / (h^2 + T^-2) dk^2.

    Field derivatives are analytic; only n is grid-sampled.
    """
    kx, ky = field.grid.mesh()
    h = np.stack(model.components(kx, ky, field.t), axis=-1)
    dx, dy = model.derivatives(kx, ky, field.t)
    cross = np.cross(np.stack(dx, axis=-1), np.stack(dy, axis=-1))
    w = np.sum(field.n * cross, axis=-1) / (np.sum(h * h, axis=-1) + p.T ** -2)
    return 0.5 * float(np.sum(w)) * field.grid.cell_area / (2.0 * math.pi)


def hall_conductivity_linearized(field: SpinField, tau: float, p: HallParams) -> float:
    """Specialization to h = (kx, ky, t/tau): integrand n_z / (k^2 + m^2 + T^-2)."""
    kx, ky = field.grid.mesh()
    m = field.t / tau
    w = field.n[..., 2] / (kx * kx + ky * ky + m * m + p.T ** -2)
    return 0.5 * float(np.sum(w)) * field.grid.cell_area / (2.0 * math.pi)


def total_excitation(field: SpinField, model: FieldModel) -> float:
    p = excitation_density(field.n, field_on_grid(model, field.grid, field.t))
    return float(np.sum(p)) * field.grid.cell_area / (2.0 * math.pi) ** 2


def total_entropy(field: SpinField) -> float:
    return float(np.sum(thermal_entropy(field.n))) * field.grid.cell_area / (2.0 * math.pi) ** 2


# ---------------------------------------------------------------------------
# Time series
# ---------------------------------------------------------------------------

@dataclass
class ObservableRecord:
    t: float
    sigma_H: float
    energy: float
    chern: float
    total_excitation: float
    total_entropy: float


def measure(field: SpinField, model: FieldModel, p: HallParams) -> ObservableRecord:
    """All scalar observables of one snapshot.

    Quantities that are undefined at this snapshot (Chern with a fully mixed
    momentum, excitation at a gapless point) are reported as NaN.
    """
    try:
        c = chern_number(field, model)
    except ValueError:
        c = math.nan
    try:
        exc = total_excitation(field, model)
    except ValueError:
        exc = math.nan
    return ObservableRecord(field.t, hall_conductivity(field, model, p), energy(field, model),
                            c, exc, total_entropy(field))


def write_observables_csv(path, records) -> None:
    names = [f.name for f in fields(ObservableRecord)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in names])
