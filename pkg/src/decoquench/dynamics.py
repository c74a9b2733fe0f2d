"""Pseudo-spin dynamics under energy-basis dephasing.

Each momentum carries a Bloch vector n obeying the linear equation

    dn/dt = h x n + gamma * h x (h x n)

where h(k, t) is the pseudo-magnetic field of the two-band Hamiltonian.
Momenta decouple, so whole grids are integrated as one vectorized batch.
All arithmetic is written component-wise on flat arrays, which keeps a
single-momentum run bit-identical to the same momentum inside a grid.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

NORM_TOL = 1e-8
# hard ceiling on dt * max(|h|, gamma |h|^2) for the explicit RK4 stepper
RK4_STEP_LIMIT = 0.1
# default safety target used when dt is chosen automatically
RK4_STEP_TARGET = 0.05


# ---------------------------------------------------------------------------
# Field models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearizedDirac:
    """Dirac cone with a linearly ramped mass: h = (kx, ky, t/tau)."""

    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def mass(self, t: float) -> float:
        return t / self.tau

    def components(self, kx, ky, t):
        kx = np.asarray(kx, dtype=float)
        ky = np.asarray(ky, dtype=float)
        hz = np.full(np.broadcast(kx, ky).shape, t / self.tau)
        return kx * 1.0, ky * 1.0, hz

    def components_at_mass(self, kx, ky, m):
        kx = np.asarray(kx, dtype=float)
        ky = np.asarray(ky, dtype=float)
        return kx * 1.0, ky * 1.0, np.full(np.broadcast(kx, ky).shape, float(m))

    def derivatives(self, kx, ky, t):
        """Analytic (dh/dkx, dh/dky), each a component triple."""
        shape = np.broadcast(np.asarray(kx), np.asarray(ky)).shape
        one, zero = np.ones(shape), np.zeros(shape)
        return (one, zero, zero), (zero, one, zero)


@dataclass(frozen=True)
class LatticeBloch:
    """Square-lattice two-band field, scale * (sin kx, sin ky, m - 2 + cos kx + cos ky).

    The mass follows m(t) = t / tau, so the gap closes at k = 0 when t = 0.
    ``scale`` rescales the whole field; a lattice Hamiltonian whose Bloch
    matrix is h . sigma evolves like a pseudo-spin in the field 2h, hence
    ``scale=2`` when comparing against the real-space projector pipeline.
    """

    tau: float
    scale: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def mass(self, t: float) -> float:
        return t / self.tau

    def components_at_mass(self, kx, ky, m):
        kx = np.asarray(kx, dtype=float)
        ky = np.asarray(ky, dtype=float)
        s = self.scale
        return (s * np.sin(kx), s * np.sin(ky),
                s * (m - 2.0 + np.cos(kx) + np.cos(ky)))

    def components(self, kx, ky, t):
        return self.components_at_mass(kx, ky, t / self.tau)

    def derivatives(self, kx, ky, t):
        kx = np.asarray(kx, dtype=float)
        ky = np.asarray(ky, dtype=float)
        s = self.scale
        zero = np.zeros(np.broadcast(kx, ky).shape)
        dx = (s * np.cos(kx) + zero, zero, -s * np.sin(kx) + zero)
        dy = (zero, s * np.cos(ky) + zero, -s * np.sin(ky) + zero)
        return dx, dy


@dataclass(frozen=True)
class ConstantField:
    """Time-independent uniform field; used for dephasing checks."""

    h: tuple[float, float, float]
    tau: float = 1.0

    def mass(self, t: float) -> float:
        return self.h[2]

    def components(self, kx, ky, t):
        shape = np.broadcast(np.asarray(kx), np.asarray(ky)).shape
        if not shape:
            return tuple(np.float64(c) for c in self.h)
        return tuple(np.full(shape, float(c)) for c in self.h)

    def components_at_mass(self, kx, ky, m):
        return self.components(kx, ky, 0.0)

    def derivatives(self, kx, ky, t):
        shape = np.broadcast(np.asarray(kx), np.asarray(ky)).shape
        zero = np.zeros(shape)
        return (zero, zero, zero), (zero, zero, zero)


FieldModel = Union[LinearizedDirac, LatticeBloch, ConstantField]


def field_at(model: FieldModel, k: Sequence[float], t: float) -> np.ndarray:
    """Pseudo-magnetic field h_k(t) as a length-3 array."""
    hx, hy, hz = model.components(float(k[0]), float(k[1]), t)
    return np.array([float(hx), float(hy), float(hz)])


# ---------------------------------------------------------------------------
# Schedule and grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuenchSchedule:
    """Quench time, dephasing rate and integration window.

    ``method`` is ``"rk4"`` (classical fixed-step Runge-Kutta) or
    ``"exponential"`` (exact precession-plus-dephasing step for the field
    frozen at the step midpoint; unconditionally stable, second order).
    The RK4 stability bound depends on the field magnitude, so it is
    checked against the actual momenta when integration starts.
    """

    tau: float
    gamma: float
    t0: float
    tf: float
    dt: float
    method: str = "rk4"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if not (self.t0 < 0 < self.tf):
            raise ValueError(f"window must satisfy t0 < 0 < tf, got [{self.t0}, {self.tf}]")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.method not in ("rk4", "exponential"):
            raise ValueError(f"unknown integration method {self.method!r}")

    @classmethod
    def default_window(cls, tau: float) -> tuple[float, float]:
        s = math.sqrt(tau)
        return -5.0 * s, 5.0 * s

    @classmethod
    def for_quench(cls, model: FieldModel, k_points, gamma: float, *,
                   t0: float | None = None, tf: float | None = None,
                   method: str = "auto") -> "QuenchSchedule":
        """Build a schedule with dt chosen from the field magnitude over the window.

        ``k_points`` is anything accepted by :func:`_as_points` (a grid or an
        (M, 2) array). ``method="auto"`` switches to the exponential stepper
        once dephasing dominates precession (gamma * max|h| > 1).
        """
        tau = model.tau
        if t0 is None or tf is None:
            d0, df = cls.default_window(tau)
            t0 = d0 if t0 is None else t0
            tf = df if tf is None else tf
        kx, ky = _as_points(k_points)
        hmax = _max_field(model, kx, ky, t0, tf)
        if method == "auto":
            method = "exponential" if gamma * hmax > 1.0 else "rk4"
        if method == "rk4":
            rate = max(hmax, gamma * hmax * hmax, 1e-12)
            dt = RK4_STEP_TARGET / rate
        else:
            dt = freeze_out_time(model, gamma) / 100.0
            # precession across a step stays well resolved as well
            dt = min(dt, 0.5 / max(hmax, 1e-12))
        return cls(tau=tau, gamma=gamma, t0=t0, tf=tf, dt=dt, method=method)


def freeze_out_time(model: FieldModel, gamma: float) -> float:
    """Predicted freeze-out time: min(tau^1/2, gamma^-1/3 tau^2/3), in model units.

    For a scaled lattice field the quench time and rate are first mapped to
    the unit-field equation (t' = s t, tau' = s tau, gamma' = s gamma).
    """
    s = getattr(model, "scale", 1.0)
    tau_u, gamma_u = s * model.tau, s * gamma
    tbar = math.sqrt(tau_u)
    if gamma_u > 0:
        tbar = min(tbar, gamma_u ** (-1.0 / 3.0) * tau_u ** (2.0 / 3.0))
    return tbar / s


@dataclass(frozen=True)
class MomentumGrid:
    """Momentum sampling.

    ``kind="square"``: uniform grid with spacing k_max / (n // 2) and integer
    offsets -n//2 .. n - 1 - n//2, so k = 0 is always a sample (for even n
    the grid reaches -k_max on one side and k_max - dk on the other).
    ``kind="brillouin"``: the L x L allowed momenta 2 pi j / L of a periodic
    lattice, j = 0 .. L-1.
    """

    kind: str
    n: int
    k_max: float = math.pi

    def __post_init__(self):
        if self.kind not in ("square", "brillouin"):
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if self.n < 2:
            raise ValueError("grid needs at least 2 points per axis")
        if self.kind == "square" and not self.k_max > 0:
            raise ValueError("k_max must be positive")

    @classmethod
    def square(cls, k_max: float, n: int = 128) -> "MomentumGrid":
        return cls("square", int(n), float(k_max))

    @classmethod
    def brillouin(cls, L: int) -> "MomentumGrid":
        return cls("brillouin", int(L), math.pi)

    @classmethod
    def default_linearized(cls, tau: float, gamma: float, n: int = 128) -> "MomentumGrid":
        """k_max = 8 * min(tau^-1/2, (gamma tau)^-1/3), resolving the smaller scale."""
        kbar = tau ** -0.5
        if gamma > 0:
            kbar = min(kbar, (gamma * tau) ** (-1.0 / 3.0))
        return cls.square(8.0 * kbar, n)

    @property
    def periodic(self) -> bool:
        return self.kind == "brillouin"

    @property
    def spacing(self) -> float:
        if self.kind == "brillouin":
            return 2.0 * math.pi / self.n
        return self.k_max / (self.n // 2)

    @property
    def cell_area(self) -> float:
        return self.spacing ** 2

    def axis(self) -> np.ndarray:
        if self.kind == "brillouin":
            return self.spacing * np.arange(self.n)
        return self.spacing * (np.arange(self.n) - self.n // 2)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """(kx, ky) arrays of shape (n, n), first index along kx."""
        a = self.axis()
        return np.meshgrid(a, a, indexing="ij")

    def origin_index(self) -> tuple[int, int]:
        i = 0 if self.kind == "brillouin" else self.n // 2
        return i, i


def _as_points(k_points) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(k_points, MomentumGrid):
        kx, ky = k_points.mesh()
        return kx.ravel(), ky.ravel()
    pts = np.atleast_2d(np.asarray(k_points, dtype=float))
    return np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1])


def _max_field(model: FieldModel, kx, ky, t0: float, tf: float) -> float:
    # |h|^2 is convex in t for both models, so the window endpoints bound it
    best = 0.0
    for t in (t0, tf):
        hx, hy, hz = model.components(kx, ky, t)
        best = max(best, float(np.sqrt(np.max(hx * hx + hy * hy + hz * hz))))
    return best


# ---------------------------------------------------------------------------
# Right-hand side and steppers
# ---------------------------------------------------------------------------

def _rhs(nx, ny, nz, hx, hy, hz, gamma):
    # c = h x n
    cx = hy * nz - hz * ny
    cy = hz * nx - hx * nz
    cz = hx * ny - hy * nx
    # h x (h x n)
    dx = hy * cz - hz * cy
    dy = hz * cx - hx * cz
    dz = hx * cy - hy * cx
    return cx + gamma * dx, cy + gamma * dy, cz + gamma * dz


def bloch_rhs(n, h, gamma: float) -> np.ndarray:
    """Instantaneous dn/dt = h x n + gamma h x (h x n) for one momentum."""
    n = np.asarray(n, dtype=float)
    h = np.asarray(h, dtype=float)
    return np.array(_rhs(n[0], n[1], n[2], h[0], h[1], h[2], gamma))


def _rk4_step(n, model, kx, ky, t, dt, gamma):
    nx, ny, nz = n
    h1 = model.components(kx, ky, t)
    h2 = model.components(kx, ky, t + 0.5 * dt)
    h3 = model.components(kx, ky, t + dt)
    a = _rhs(nx, ny, nz, *h1, gamma)
    b = _rhs(nx + 0.5 * dt * a[0], ny + 0.5 * dt * a[1], nz + 0.5 * dt * a[2], *h2, gamma)
    c = _rhs(nx + 0.5 * dt * b[0], ny + 0.5 * dt * b[1], nz + 0.5 * dt * b[2], *h2, gamma)
    d = _rhs(nx + dt * c[0], ny + dt * c[1], nz + dt * c[2], *h3, gamma)
    w = dt / 6.0
    return (nx + w * (a[0] + 2.0 * b[0] + 2.0 * c[0] + d[0]),
            ny + w * (a[1] + 2.0 * b[1] + 2.0 * c[1] + d[1]),
            nz + w * (a[2] + 2.0 * b[2] + 2.0 * c[2] + d[2]))


def _exp_step(n, model, kx, ky, t, dt, gamma):
    """Exact solution for h frozen at the midpoint: rotate the part of n
    perpendicular to h by |h| dt and damp it by exp(-gamma |h|^2 dt)."""
    nx, ny, nz = n
    hx, hy, hz = model.components(kx, ky, t + 0.5 * dt)
    h2 = hx * hx + hy * hy + hz * hz
    hn = np.sqrt(h2)
    inv = np.where(hn > 0, 1.0 / np.where(hn > 0, hn, 1.0), 0.0)
    ux, uy, uz = hx * inv, hy * inv, hz * inv
    par = ux * nx + uy * ny + uz * nz
    px, py, pz = nx - par * ux, ny - par * uy, nz - par * uz
    c = np.cos(hn * dt)
    s = np.sin(hn * dt)
    damp = np.exp(-gamma * h2 * dt)
    # u x p
    qx = uy * pz - uz * py
    qy = uz * px - ux * pz
    qz = ux * py - uy * px
    return (par * ux + damp * (c * px + s * qx),
            par * uy + damp * (c * py + s * qy),
            par * uz + damp * (c * pz + s * qz))


def _stepper(method: str):
    return _rk4_step if method == "rk4" else _exp_step


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

class DegenerateFieldError(ValueError):
    """Raised when the initial equilibrium direction -h/|h| does not exist."""


def _initial_state(model, kx, ky, t0):
    hx, hy, hz = model.components(kx, ky, t0)
    hn = np.sqrt(hx * hx + hy * hy + hz * hz)
    bad = np.flatnonzero(hn == 0)
    if bad.size:
        i = int(bad[0])
        raise DegenerateFieldError(
            f"undefined initial equilibrium direction at k=({kx[i]}, {ky[i]})")
    return -hx / hn, -hy / hn, -hz / hn


def _check_step(model, kx, ky, sched: QuenchSchedule):
    if sched.method != "rk4":
        return
    hmax = _max_field(model, kx, ky, sched.t0, sched.tf)
    load = sched.dt * max(hmax, sched.gamma * hmax * hmax)
    if load >= RK4_STEP_LIMIT:
        raise ValueError(
            f"RK4 step too large: dt*max(|h|, gamma|h|^2) = {load:.3g} >= {RK4_STEP_LIMIT}")


def _segments(sched: QuenchSchedule, snapshots) -> list[float]:
    times = [float(t) for t in snapshots]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("snapshot times must be non-decreasing")
    if times and (times[0] < sched.t0 or times[-1] > sched.tf):
        raise ValueError("snapshot times must lie inside [t0, tf]")
    return times


def iter_states(model: FieldModel, k_points, sched: QuenchSchedule,
                snapshots: Sequence[float] | None = None,
                n0=None) -> Iterator[tuple[float, np.ndarray]]:
    """Yield (t, n) at each snapshot; n has shape (M, 3) for M momenta.

    The window between consecutive snapshots is split into
    ceil(length / dt) equal steps, so every snapshot is hit exactly.
    ``n0`` overrides the ground-state start with an explicit (M, 3) or (3,)
    initial spin.
    """
    if snapshots is None:
        snapshots = [sched.tf]
    times = _segments(sched, snapshots)
    kx, ky = _as_points(k_points)
    _check_step(model, kx, ky, sched)
    step = _stepper(sched.method)
    if n0 is None:
        n = _initial_state(model, kx, ky, sched.t0)
    else:
        start = np.broadcast_to(np.asarray(n0, dtype=float), (kx.size, 3))
        n = tuple(np.ascontiguousarray(start[:, i]) for i in range(3))
    # a single momentum runs on numpy scalars: same arithmetic, far less
    # per-operation overhead than length-1 arrays
    scalar = kx.size == 1
    if scalar:
        kx, ky = kx[0], ky[0]
        n = tuple(c[0] for c in n)
    t = sched.t0
    for target in times:
        span = target - t
        if span > 0:
            nsteps = max(1, math.ceil(span / sched.dt - 1e-9))
            h = span / nsteps
            for i in range(nsteps):
                n = step(n, model, kx, ky, t + i * h, h, sched.gamma)
            t = target
        yield t, (np.array(n, dtype=float)[None, :] if scalar else np.stack(n, axis=-1))


def integrate_trajectory(model: FieldModel, k: Sequence[float], sched: QuenchSchedule,
                         snapshots: Sequence[float] | None = None, n0=None) -> np.ndarray:
    """Pseudo-spin at one momentum, sampled at ``snapshots``; shape (len, 3).

    Starts from the instantaneous ground state n(t0) = -h/|h| unless ``n0``
    is given.
    """
    pts = np.array([[float(k[0]), float(k[1])]])
    return np.array([n[0] for _, n in iter_states(model, pts, sched, snapshots, n0)])


@dataclass
class GridEvolution:
    grid: MomentumGrid
    times: np.ndarray
    n: np.ndarray  # (snapshots, n, n, 3)


def evolve_grid(model: FieldModel, grid: MomentumGrid, sched: QuenchSchedule,
                snapshots: Sequence[float] | None = None) -> GridEvolution:
    """Evolve every momentum of ``grid``; each result matches
    :func:`integrate_trajectory` for that momentum bit for bit."""
    kx, ky = grid.mesh()
    pts = np.stack([kx.ravel(), ky.ravel()], axis=1)
    try:
        out = list(iter_states(model, pts, sched, snapshots))
    except DegenerateFieldError as exc:
        raise DegenerateFieldError(f"{exc} (grid {grid.kind}, n={grid.n})") from exc
    times = np.array([t for t, _ in out])
    n = np.stack([s.reshape(grid.n, grid.n, 3) for _, s in out])
    return GridEvolution(grid=grid, times=times, n=n)


def step_halving_error(model: FieldModel, k_points, sched: QuenchSchedule,
                       snapshots: Sequence[float] | None = None) -> float:
    """Max |n_dt - n_dt/2| over momenta and snapshots (convergence check)."""
    fine = QuenchSchedule(sched.tau, sched.gamma, sched.t0, sched.tf, sched.dt / 2, sched.method)
    a = [n for _, n in iter_states(model, k_points, sched, snapshots)]
    b = [n for _, n in iter_states(model, k_points, fine, snapshots)]
    return max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))


def two_level_coherence(delta: float, gamma: float, t: float) -> float:
    """Analytic decay exp(-gamma delta^2 t) of the off-diagonal density-matrix
    element between two levels split by ``delta``."""
    if delta < 0 or gamma < 0 or t < 0:
        raise ValueError("delta, gamma and t must be non-negative")
    return math.exp(-gamma * delta * delta * t)


def write_snapshots_csv(path, evolution: GridEvolution) -> None:
    """One row per (t, kx, ky, nx, ny, nz), 17 significant digits."""
    kx, ky = evolution.grid.mesh()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "k_x", "k_y", "n_x", "n_y", "n_z"])
        for t, n in zip(evolution.times, evolution.n):
            for i in range(evolution.grid.n):
                for j in range(evolution.grid.n):
                    w.writerow([_fmt(t), _fmt(kx[i, j]), _fmt(ky[i, j]),
                                _fmt(n[i, j, 0]), _fmt(n[i, j, 1]), _fmt(n[i, j, 2])])


def _fmt(x) -> str:
    return format(float(x), ".17g")
