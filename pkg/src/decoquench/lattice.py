"""Disordered two-orbital Chern lattice and single-particle projector dynamics.

The Hamiltonian lives on an L x L torus with two orbitals per site, basis
index 2 (x L + y) + orbital. Hopping along direction mu from r to r + e_mu is
the block t_r (sigma_z + i sigma_mu) / 2 with t_r = 1 + delta t_r, and the
on-site term is (m - 2) sigma_z. In the clean limit the Bloch matrix is
h(k) . sigma with h = (sin kx, sin ky, m - 2 + cos kx + cos ky).

The occupied-state projector P obeys

    dP/dt = -i [H, P] - gamma [H, [H, P]].
"""
from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .dynamics import LatticeBloch, QuenchSchedule, RK4_STEP_LIMIT, RK4_STEP_TARGET, _fmt, freeze_out_time

_SZ = np.array([[1, 0], [0, -1]], dtype=complex)
_SX = np.array([[0, 1], [1, 0]], dtype=complex)
_SY = np.array([[0, -1j], [1j, 0]], dtype=complex)

GAP_TOL = 1e-12
XI_THRESHOLD = 0.05


class GaplessError(ValueError):
    pass


class DegenerateFieldError(ValueError):
    pass


class CensoredError(ValueError):
    """The autocorrelation never drops below threshold inside the box."""


@dataclass(frozen=True)
class DisorderRealization:
    """Bond disorder t_r = 1 + delta t_r with delta t_r uniform in [-delta_t, delta_t]."""

    L: int
    seed: int
    delta_t: float = 0.1

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("lattice needs L >= 2")
        if self.delta_t < 0:
            raise ValueError("disorder amplitude must be non-negative")

    @property
    def bond_shifts(self) -> np.ndarray:
        """Shape (L, L, 2): shift of the bond leaving site (x, y) along x and y."""
        rng = np.random.default_rng(self.seed)
        return rng.uniform(-self.delta_t, self.delta_t, size=(self.L, self.L, 2))


@dataclass
class LatticeHamiltonian:
    """H(m) = hopping + (m - 2) D with D = identity x sigma_z; stored sparse."""

    hopping: sp.csr_matrix
    m: float
    L: int

    @property
    def dim(self) -> int:
        return 2 * self.L * self.L

    def onsite(self) -> sp.csr_matrix:
        return sp.kron(sp.identity(self.L * self.L, format="csr"), sp.csr_matrix(_SZ), format="csr")

    def sparse(self, m: float | None = None) -> sp.csr_matrix:
        m = self.m if m is None else m
        return (self.hopping + (m - 2.0) * self.onsite()).tocsr()

    def dense(self, m: float | None = None) -> np.ndarray:
        return self.sparse(m).toarray()

    def at_mass(self, m: float) -> "LatticeHamiltonian":
        return LatticeHamiltonian(self.hopping, m, self.L)

    def norm_bound(self, m: float | None = None) -> float:
        """Max absolute row sum, an upper bound on the spectral norm."""
        return float(np.max(np.abs(self.sparse(m)).sum(axis=1)))


def _site(x, y, L):
    return (x % L) * L + (y % L)


def build_bhz(real: DisorderRealization, m: float) -> LatticeHamiltonian:
    """Disordered lattice Hamiltonian at mass m, Hermitian by construction."""
    L = real.L
    shifts = real.bond_shifts
    x, y = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    src = _site(x, y, L).ravel()
    rows, cols, vals = [], [], []
    for mu, (dx, dy), sig in ((0, (1, 0), _SX), (1, (0, 1), _SY)):
        dst = _site(x + dx, y + dy, L).ravel()
        amp = 1.0 + shifts[..., mu].ravel()
        block = 0.5 * (_SZ + 1j * sig)
        for a in range(2):
            for b in range(2):
                if block[a, b] != 0:
                    rows.append(2 * dst + a)
                    cols.append(2 * src + b)
                    vals.append(amp * block[a, b])
    n = 2 * L * L
    fwd = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(n, n))
    # A + A^dagger is exactly Hermitian entry by entry
    hop = (fwd + fwd.conj().T).tocsr()
    hop.sum_duplicates()
    return LatticeHamiltonian(hop, float(m), L)


def clean_spectrum(L: int, m: float) -> np.ndarray:
    """Sorted {+-|h(k)|} over the allowed momenta, for comparison."""
    kx, ky = np.meshgrid(2 * np.pi * np.arange(L) / L, 2 * np.pi * np.arange(L) / L, indexing="ij")
    hn = np.sqrt(np.sin(kx) ** 2 + np.sin(ky) ** 2 + (m - 2 + np.cos(kx) + np.cos(ky)) ** 2).ravel()
    return np.sort(np.concatenate([-hn, hn]))


def _band_projector(H: np.ndarray, sign: int) -> np.ndarray:
    E, V = np.linalg.eigh(H)
    if np.min(np.abs(E)) <= GAP_TOL:
        raise GaplessError("gapless initial Hamiltonian: eigenvalue at the Fermi level")
    W = V[:, E < 0] if sign < 0 else V[:, E > 0]
    return W @ W.conj().T


def ground_projector(H: LatticeHamiltonian) -> np.ndarray:
    """Projector onto the negative-energy states (half filling)."""
    return _band_projector(H.dense(), -1)


def excited_projector(H: LatticeHamiltonian) -> np.ndarray:
    return _band_projector(H.dense(), +1)


def lattice_schedule(tau: float, gamma: float, *, method: str = "exponential",
                     dt: float | None = None, L: int | None = None,
                     steps_per_freeze: float = 20.0) -> QuenchSchedule:
    """Window m: -0.5 -> +0.5, i.e. t in [-tau/2, tau/2].

    Exponential stepping uses dt = t_freeze / steps_per_freeze, where the
    freeze-out time is that of a pseudo-spin in the field 2h. RK4 needs ``L``
    to bound the Hamiltonian norm.
    """
    if dt is None:
        if method == "exponential":
            dt = freeze_out_time(LatticeBloch(tau, scale=2.0), gamma) / steps_per_freeze
        else:
            if L is None:
                raise ValueError("RK4 step selection needs the lattice size")
            hb = build_bhz(DisorderRealization(L, 0, 0.1), 0.5).norm_bound(-0.5)
            dt = RK4_STEP_TARGET / (hb + gamma * hb * hb)
    dt = min(dt, tau / 2)
    return QuenchSchedule(tau, gamma, -0.5 * tau, 0.5 * tau, dt, method)


def _hermitize(P):
    return 0.5 * (P + P.conj().T)


def _rhs(Hs, P, gamma):
    X = Hs @ P
    C = X - X.conj().T  # [H, P]
    Y = Hs @ C
    D = Y + Y.conj().T  # [H, [H, P]], using C^dagger = -C
    return -1j * C - gamma * D


def _rk4_step(P, ham, tau, t, dt, gamma):
    H1 = ham.sparse(t / tau)
    H2 = ham.sparse((t + 0.5 * dt) / tau)
    H3 = ham.sparse((t + dt) / tau)
    a = _rhs(H1, P, gamma)
    b = _rhs(H2, P + 0.5 * dt * a, gamma)
    c = _rhs(H2, P + 0.5 * dt * b, gamma)
    d = _rhs(H3, P + dt * c, gamma)
    return P + (dt / 6.0) * (a + 2.0 * b + 2.0 * c + d)


def _exp_step(P, ham, tau, t, dt, gamma):
    # exact propagation with H frozen at the step midpoint, in its eigenbasis
    E, V = sla.eigh(ham.dense((t + 0.5 * dt) / tau), driver="evr")
    w = E[:, None] - E[None, :]
    Pt = V.conj().T @ P @ V
    Pt *= np.exp((-1j * w - gamma * w * w) * dt)
    return V @ Pt @ V.conj().T


def evolve_projector(P0: np.ndarray, real: DisorderRealization | LatticeHamiltonian,
                     sched: QuenchSchedule, snapshots=None):
    """Evolve P under m(t) = t / tau from sched.t0 to each snapshot time.

    Returns the final projector, or a list of (t, P) when ``snapshots`` is
    given. P is re-symmetrized after every step. ``real`` may also be a
    prebuilt Hamiltonian, whose mass is then ignored.
    """
    ham = real if isinstance(real, LatticeHamiltonian) else build_bhz(real, sched.t0 / sched.tau)
    if sched.method == "rk4":
        hb = max(ham.norm_bound(sched.t0 / sched.tau), ham.norm_bound(sched.tf / sched.tau))
        load = sched.dt * (hb + sched.gamma * hb * hb)
        if load >= RK4_STEP_LIMIT:
            raise ValueError(f"RK4 step too large: dt*(|H| + gamma |H|^2) = {load:.3g} "
                             f">= {RK4_STEP_LIMIT}")
        step = _rk4_step
    else:
        step = _exp_step
    times = [sched.tf] if snapshots is None else [float(s) for s in snapshots]
    if any(b < a for a, b in zip(times, times[1:])) or times[0] < sched.t0 or times[-1] > sched.tf:
        raise ValueError("snapshot times must be non-decreasing inside [t0, tf]")
    P = np.array(P0, dtype=complex)
    t = sched.t0
    out = []
    for target in times:
        span = target - t
        if span > 0:
            nsteps = max(1, math.ceil(span / sched.dt - 1e-9))
            h = span / nsteps
            for i in range(nsteps):
                P = _hermitize(step(P, ham, sched.tau, t + i * h, h, sched.gamma))
            t = target
        out.append((t, P.copy()))
    return out[-1][1] if snapshots is None else out


def static_dephasing(P0: np.ndarray, H: np.ndarray, gamma: float, t: float) -> np.ndarray:
    """Closed form for static H: P_mn(t) = P_mn(0) exp((i(E_n - E_m) - gamma (E_m - E_n)^2) t)
    in the eigenbasis of H."""
    E, V = np.linalg.eigh(H)
    w = E[:, None] - E[None, :]
    Pt = V.conj().T @ P0 @ V * np.exp((-1j * w - gamma * w * w) * t)
    return V @ Pt @ V.conj().T


def evolve_static(P0: np.ndarray, H: np.ndarray, gamma: float, t: float, dt: float,
                  method: str = "rk4") -> np.ndarray:
    """Integrate with a time-independent dense H (used to check the steppers)."""
    Hs = sp.csr_matrix(H)
    nsteps = max(1, math.ceil(t / dt - 1e-9))
    h = t / nsteps
    P = np.array(P0, dtype=complex)
    if method == "exponential":
        E, V = np.linalg.eigh(H)
        w = E[:, None] - E[None, :]
        f = np.exp((-1j * w - gamma * w * w) * h)
        for _ in range(nsteps):
            P = _hermitize(V @ ((V.conj().T @ P @ V) * f) @ V.conj().T)
        return P
    for _ in range(nsteps):
        a = _rhs(Hs, P, gamma)
        b = _rhs(Hs, P + 0.5 * h * a, gamma)
        c = _rhs(Hs, P + 0.5 * h * b, gamma)
        d = _rhs(Hs, P + h * c, gamma)
        P = _hermitize(P + (h / 6.0) * (a + 2.0 * b + 2.0 * c + d))
    return P


# ---------------------------------------------------------------------------
# Real-space analysis
# ---------------------------------------------------------------------------

def spatial_excitation_density(P: np.ndarray, Hf: LatticeHamiltonian) -> np.ndarray:
    """f_ex(r) = sum_orbital <r s| P_ex P |r s>, shape (L, L)."""
    Pex = excited_projector(Hf)
    diag = np.real(np.einsum("ij,ji->i", Pex, P))
    return diag.reshape(Hf.L * Hf.L, 2).sum(axis=1).reshape(Hf.L, Hf.L)


def _integer_distance_bins(L: int):
    # displacement (dx, dy) -> exact integer minimum-image length, or -1
    d = np.minimum(np.arange(L), L - np.arange(L))
    d2 = d[:, None] ** 2 + d[None, :] ** 2
    r = np.floor(np.sqrt(d2) + 0.5).astype(int)
    return np.where(r * r == d2, r, -1)


def autocorrelation(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pair-averaged autocorrelation of the fluctuations of f on an L x L torus.

    A(r) = <df(x) df(x')>_{|x - x'| = r} / <df^2>, where the average runs over
    all ordered site pairs whose minimum-image distance is exactly r. Returns
    (r, A) for r = 0 .. L // 2.
    """
    f = np.asarray(f, dtype=float)
    L = f.shape[0]
    if f.shape != (L, L):
        raise ValueError("field must be square")
    df = f - f.mean()
    var = float(np.mean(df * df))
    if var <= (1e-10 * max(1.0, abs(float(f.mean())))) ** 2:
        raise DegenerateFieldError("degenerate field — no fluctuations")
    F = np.fft.fft2(df)
    corr = np.real(np.fft.ifft2(F * np.conj(F))) / (L * L)  # mean over x of df(x) df(x + d)
    bins = _integer_distance_bins(L)
    r_max = L // 2
    keep = (bins >= 0) & (bins <= r_max)
    counts = np.bincount(bins[keep], minlength=r_max + 1)
    sums = np.bincount(bins[keep], weights=corr[keep], minlength=r_max + 1)
    r = np.arange(r_max + 1)
    A = sums / (counts * var)
    A[0] = 1.0
    return r.astype(float), A


def correlation_length(r, A, eps: float = XI_THRESHOLD) -> float:
    """First r with A(r) <= eps, linearly interpolated between bins."""
    r = np.asarray(r, dtype=float)
    A = np.asarray(A, dtype=float)
    idx = np.flatnonzero(A <= eps)
    if idx.size == 0:
        raise CensoredError("correlation length exceeds box — increase L")
    i = int(idx[0])
    if i == 0:
        return 0.0
    return float(r[i - 1] + (r[i] - r[i - 1]) * (A[i - 1] - eps) / (A[i - 1] - A[i]))


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

@dataclass
class SeedRecord:
    seed: int
    xi: float | None
    f_ex: np.ndarray
    r: np.ndarray | None = None
    A: np.ndarray | None = None

    @property
    def censored(self) -> bool:
        return self.xi is None


@dataclass
class EnsembleResult:
    tau: float
    gamma: float
    xi_mean: float
    xi_se: float
    n_used: int
    n_censored: int
    records: list = field(default_factory=list)


def run_seed(L: int, delta_t: float, seed: int, sched: QuenchSchedule) -> SeedRecord:
    """Quench one realization from its ground state at m(t0) and analyze f_ex at tf."""
    real = DisorderRealization(L, seed, delta_t)
    ham = build_bhz(real, sched.t0 / sched.tau)
    P = evolve_projector(ground_projector(ham), ham, sched)
    f = spatial_excitation_density(P, ham.at_mass(sched.tf / sched.tau))
    r, A = autocorrelation(f)
    try:
        xi = correlation_length(r, A)
    except CensoredError:
        xi = None
    return SeedRecord(seed, xi, f, r, A)


def run_disorder_ensemble(L: int, delta_t: float, seeds, sched: QuenchSchedule,
                          gamma: float | None = None, workers: int = 1) -> EnsembleResult:
    """Disorder-averaged correlation length over ``seeds``.

    ``gamma`` overrides the schedule's rate. Seeds whose autocorrelation never
    reaches threshold are censored: excluded from the mean and counted.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("ensemble needs at least 2 seeds")
    if gamma is not None:
        sched = QuenchSchedule(sched.tau, gamma, sched.t0, sched.tf, sched.dt, sched.method)
    args = [(L, delta_t, s, sched) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_seed, *zip(*args)))
    else:
        records = [run_seed(*a) for a in args]
    xs = np.array([r.xi for r in records if not r.censored])
    n_cens = len(records) - xs.size
    if n_cens:
        warnings.warn(f"{n_cens} of {len(records)} seeds censored (correlation length exceeds box)")
    mean = float(np.mean(xs)) if xs.size else math.nan
    se = float(np.std(xs, ddof=1) / math.sqrt(xs.size)) if xs.size > 1 else math.nan
    return EnsembleResult(sched.tau, sched.gamma, mean, se, int(xs.size), n_cens, records)


def write_field_csv(path, f: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "f_ex"])
        for x in range(f.shape[0]):
            for y in range(f.shape[1]):
                w.writerow([x, y, _fmt(f[x, y])])


def write_autocorrelation_csv(path, r, A) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "A"])
        for a, b in zip(r, A):
            w.writerow([_fmt(a), _fmt(b)])


def write_ensemble_summary_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau", "gamma", "xi_mean", "xi_se", "n_used", "n_censored"])
        for e in results:
            w.writerow([_fmt(e.tau), _fmt(e.gamma), _fmt(e.xi_mean), _fmt(e.xi_se),
                        e.n_used, e.n_censored])
