import math
import warnings

import numpy as np
import pytest

from decoquench.dynamics import QuenchSchedule
from decoquench.lattice import (CensoredError, DegenerateFieldError, DisorderRealization, GaplessError,
                                autocorrelation, build_bhz, clean_spectrum, correlation_length,
                                evolve_projector, evolve_static, excited_projector, ground_projector,
                                lattice_schedule, run_disorder_ensemble, spatial_excitation_density,
                                static_dephasing, write_autocorrelation_csv, write_ensemble_summary_csv,
                                write_field_csv)


def test_bond_shifts_bounded_and_reproducible():
    r = DisorderRealization(10, 123, 0.1)
    b = r.bond_shifts
    assert b.shape == (10, 10, 2)
    assert np.all(np.abs(b) <= 0.1)
    assert np.array_equal(b, DisorderRealization(10, 123, 0.1).bond_shifts)
    assert not np.array_equal(b, DisorderRealization(10, 124, 0.1).bond_shifts)


def test_clean_gap_closes_at_zero_mass():
    E = np.linalg.eigvalsh(build_bhz(DisorderRealization(16, 0, 0.0), 0.0).dense())
    assert np.min(np.abs(E)) < 1e-12


@pytest.mark.parametrize("m", [-0.5, 0.5, 1.3])
def test_clean_spectrum_matches_bloch_form(m):
    E = np.linalg.eigvalsh(build_bhz(DisorderRealization(16, 0, 0.0), m).dense())
    assert np.max(np.abs(np.sort(E) - clean_spectrum(16, m))) < 1e-10


def test_disordered_hamiltonian_exactly_hermitian():
    for seed in (0, 7, 99):
        H = build_bhz(DisorderRealization(8, seed, 0.1), -0.3).dense()
        assert np.max(np.abs(H - H.conj().T)) == 0


def test_ground_projector_properties():
    ham = build_bhz(DisorderRealization(8, 1, 0.1), -0.5)
    H = ham.dense()
    P = ground_projector(ham)
    assert np.max(np.abs(P @ P - P)) < 1e-10
    assert np.trace(P).real == pytest.approx(64, abs=1e-10)
    assert np.max(np.abs(H @ P - P @ H)) < 1e-10
    E = np.linalg.eigvalsh(H)
    assert np.trace(H @ P).real == pytest.approx(E[E < 0].sum(), abs=1e-8)


def test_gapless_raises():
    with pytest.raises(GaplessError, match="gapless initial Hamiltonian"):
        ground_projector(build_bhz(DisorderRealization(8, 0, 0.0), 0.0))


def test_excitation_density_extremes():
    ham = build_bhz(DisorderRealization(6, 2, 0.1), 0.5)
    assert np.max(np.abs(spatial_excitation_density(ground_projector(ham), ham))) < 1e-10
    f = spatial_excitation_density(excited_projector(ham), ham)
    assert f.sum() == pytest.approx(36, abs=1e-10)
    assert np.all(f > -1e-10) and np.all(f < 2 + 1e-10)


@pytest.mark.parametrize("method,dt", [("rk4", 0.005), ("exponential", 0.5)])
def test_static_fixed_point(method, dt):
    ham = build_bhz(DisorderRealization(4, 3, 0.1), -0.5)
    P0 = ground_projector(ham)
    P = evolve_static(P0, ham.dense(), 0.5, 2.0, dt, method)
    assert np.max(np.abs(P - P0)) < 1e-8


def _generic_projector(dim, rank, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    Q, _ = np.linalg.qr(A)
    return Q[:, :rank] @ Q[:, :rank].conj().T


def test_static_dephasing_oracle_dim8():
    ham = build_bhz(DisorderRealization(2, 5, 0.1), 0.3)
    H = ham.dense()
    assert H.shape == (8, 8)
    P0 = _generic_projector(8, 4, 11)
    gamma = 0.2
    hn = np.linalg.norm(H, 2)
    t = 1.0 / (gamma * hn ** 2)
    exact = static_dephasing(P0, H, gamma, t)
    rate = hn + gamma * hn ** 2
    num = evolve_static(P0, H, gamma, t, 0.02 / rate, "rk4")
    assert np.max(np.abs(num - exact)) < 1e-6
    assert np.max(np.abs(evolve_static(P0, H, gamma, t, 0.3, "exponential") - exact)) < 1e-10


def test_static_dephasing_formula_elementwise():
    H = build_bhz(DisorderRealization(2, 1, 0.1), -0.4).dense()
    P0 = _generic_projector(8, 3, 2)
    E, V = np.linalg.eigh(H)
    gamma, t = 0.3, 0.7
    Pt = V.conj().T @ static_dephasing(P0, H, gamma, t) @ V
    P0t = V.conj().T @ P0 @ V
    m, n = 1, 6
    expect = P0t[m, n] * np.exp((1j * (E[n] - E[m]) - gamma * (E[m] - E[n]) ** 2) * t)
    assert Pt[m, n] == pytest.approx(expect, abs=1e-12)


def test_purity_non_increasing_static():
    H = build_bhz(DisorderRealization(3, 4, 0.1), 0.2).dense()
    P = _generic_projector(18, 9, 3)
    pur = []
    for _ in range(6):
        P = evolve_static(P, H, 0.3, 0.5, 0.01, "rk4")
        pur.append(np.trace(P @ P).real)
    assert all(b <= a + 1e-12 for a, b in zip(pur, pur[1:]))


@pytest.mark.parametrize("method", ["rk4", "exponential"])
@pytest.mark.parametrize("gamma", [0.0, 0.5])
def test_quench_invariants_small(method, gamma):
    L = 4
    s = lattice_schedule(4.0, gamma, method=method, L=L)
    ham = build_bhz(DisorderRealization(L, 0, 0.1), -0.5)
    P0 = ground_projector(ham)
    ev0 = np.linalg.eigvalsh(P0)
    for _, P in evolve_projector(P0, ham, s, [-1.0, 0.0, 2.0]):
        assert abs(np.trace(P).real - L * L) / (L * L) < 1e-8
        assert np.max(np.abs(P - P.conj().T)) < 1e-10
        ev = np.linalg.eigvalsh(P)
        assert ev.min() > -1e-6 and ev.max() < 1 + 1e-6
        if gamma == 0:
            assert np.max(np.abs(ev - ev0)) < 1e-8


def test_rk4_and_exponential_agree():
    L = 4
    ham = build_bhz(DisorderRealization(L, 1, 0.1), -0.5)
    P0 = ground_projector(ham)
    a = evolve_projector(P0, ham, lattice_schedule(4.0, 0.3, method="rk4", L=L))
    b = evolve_projector(P0, ham, QuenchSchedule(4.0, 0.3, -2.0, 2.0, 0.002, "exponential"))
    assert np.max(np.abs(a - b)) < 1e-4


def test_rk4_step_guard():
    ham = build_bhz(DisorderRealization(4, 1, 0.1), -0.5)
    with pytest.raises(ValueError, match="step too large"):
        evolve_projector(ground_projector(ham), ham, QuenchSchedule(4.0, 1.0, -2.0, 2.0, 0.1, "rk4"))


def test_adiabatic_quench_leaves_few_excitations():
    L = 12
    s = lattice_schedule(1e4, 0.0, steps_per_freeze=4)
    ham = build_bhz(DisorderRealization(L, 0, 0.1), -0.5)
    P = evolve_projector(ground_projector(ham), ham, s)
    f = spatial_excitation_density(P, ham.at_mass(0.5))
    assert f.mean() < 0.05


def test_autocorrelation_examples():
    L = 10
    x, y = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    chk = np.where((x + y) % 2 == 0, 1.0, -1.0)
    r, A = autocorrelation(chk)
    assert A[0] == 1.0
    assert A[1] == pytest.approx(-1.0)
    assert r[-1] == L // 2
    with pytest.raises(DegenerateFieldError, match="degenerate field"):
        autocorrelation(np.full((L, L), 0.3))


def test_autocorrelation_iid_bound():
    L = 30
    worst = 0.0
    for seed in range(40):
        _, A = autocorrelation(np.random.default_rng(seed).normal(size=(L, L)))
        worst = max(worst, np.max(np.abs(A[1:])))
    assert worst < 3 / L


def test_autocorrelation_matches_direct_sum():
    L = 6
    f = np.random.default_rng(0).normal(size=(L, L))
    r, A = autocorrelation(f)
    df = f - f.mean()
    num = {int(k): [0.0, 0] for k in r}
    for x in range(L):
        for y in range(L):
            for u in range(L):
                for v in range(L):
                    dx, dy = min(abs(x - u), L - abs(x - u)), min(abs(y - v), L - abs(y - v))
                    d = math.isqrt(dx * dx + dy * dy)
                    if d * d == dx * dx + dy * dy and d in num:
                        num[d][0] += df[x, y] * df[u, v]
                        num[d][1] += 1
    var = np.mean(df * df)
    for k in r:
        s, c = num[int(k)]
        assert A[int(k)] == pytest.approx(s / c / var, abs=1e-12)


def test_correlation_length_examples():
    r = np.arange(0, 11, dtype=float)
    assert correlation_length(r, np.maximum(0, 1 - r / 4)) == pytest.approx(3.8)
    r = np.arange(0, 16, dtype=float)
    assert correlation_length(r, np.exp(-r / 3)) == pytest.approx(3 * math.log(20), abs=0.05)
    fine = np.linspace(0, 15, 3001)
    assert correlation_length(fine, np.exp(-fine / 3)) == pytest.approx(3 * math.log(20), abs=1e-4)
    with pytest.raises(CensoredError, match="correlation length exceeds box"):
        correlation_length(r, np.ones_like(r))


def test_ensemble_identical_seeds():
    s = lattice_schedule(2.0, 0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        e = run_disorder_ensemble(6, 0.1, [3, 3], s)
    a, b = e.records
    assert np.array_equal(a.f_ex, b.f_ex)
    assert a.xi == b.xi
    if e.n_used == 2:
        assert e.xi_se == 0


def test_ensemble_clean_is_degenerate():
    s = lattice_schedule(2.0, 0.0)
    with pytest.raises(DegenerateFieldError):
        run_disorder_ensemble(6, 0.0, [1, 2], s)


def test_ensemble_needs_two_seeds():
    with pytest.raises(ValueError):
        run_disorder_ensemble(6, 0.1, [1], lattice_schedule(2.0, 0.0))


def test_csv_outputs(tmp_path):
    f = np.arange(6.0).reshape(2, 3)
    write_field_csv(tmp_path / "f.csv", f)
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "x,y,f_ex" and lines[-1] == "1,2,5"
    write_autocorrelation_csv(tmp_path / "a.csv", [0.0, 1.0], [1.0, 0.25])
    assert (tmp_path / "a.csv").read_text().splitlines() == ["r,A", "0,1", "1,0.25"]
    s = lattice_schedule(2.0, 0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        e = run_disorder_ensemble(4, 0.1, [0, 1], s)
    write_ensemble_summary_csv(tmp_path / "e.csv", [e])
    head = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert head == "tau,gamma,xi_mean,xi_se,n_used,n_censored"
