import dataclasses

import numpy as np
import pytest

from semiclab.grid import GridError, GridSpec, WaveField
from semiclab.phasespace import flow_many, free_particle, harmonic_oscillator, quartic_oscillator
from semiclab.propagators import (BranchTrackingError, GridPropagator, TimeStepError, TransportedSymbol,
                                  egorov_evolve, eigenfunction_diagnostics, fio_samples, frozen_fio_apply,
                                  grid_propagate, husimi_peak, measure_pushforward_check, thawed_fio_apply)
from semiclab.propagators import _continuous_sqrt
from semiclab.symbols import FunctionSymbol
from semiclab.wavepackets import render, standard_packet

H = 1 / 16
GRID = GridSpec.uniform(-4.0, 4.0, 256)


def rel(a, b):
    return np.linalg.norm(a.samples - b.samples) / np.linalg.norm(b.samples)


def bump(c=(0.3, 0.2), s=0.35):
    return FunctionSymbol(lambda x, xi: np.exp(-((x[..., 0] - c[0]) ** 2 + (xi[..., 0] - c[1]) ** 2) / s ** 2),
                          real=True, name="bump")


def test_free_evolution_matches_dispersed_gaussian():
    q, p, t = -1.0, 0.8, 1.5
    psi0 = render(standard_packet(q, p, H), GRID)
    x = GRID.axis()
    exact = (np.pi * H) ** -0.25 * (1 + 1j * t) ** -0.5 * np.exp(
        -(x - q - p * t) ** 2 / (2 * H * (1 + 1j * t)) + 1j * p * (x - q) / H - 1j * p * p * t / (2 * H))
    for method in ("eigen", "split"):
        U = GridPropagator.for_hamiltonian(free_particle(), GRID, H, method=method)
        out = grid_propagate(U, psi0, t)
        assert np.sqrt(np.sum(np.abs(out.samples - exact) ** 2) * GRID.cell) <= 1e-8


def test_zero_time_is_identity():
    psi0 = render(standard_packet(0.2, 0.1, H), GRID)
    U = GridPropagator.for_hamiltonian(quartic_oscillator(), GRID, H, method="split")
    assert grid_propagate(U, psi0, 0.0) is psi0


def test_harmonic_period_returns_initial_state():
    psi0 = render(standard_packet(0.9, -0.5, H), GRID)
    U = GridPropagator.for_hamiltonian(harmonic_oscillator(), GRID, H, method="eigen")
    out = U.propagate(psi0, 2 * np.pi)
    fidelity = abs(np.vdot(out.samples, psi0.samples) * GRID.cell)
    assert fidelity >= 1 - 1e-6


def test_split_step_unitarity_and_second_order():
    psi0 = render(standard_packet(0.7, 0.3, H), GRID)
    ham = quartic_oscillator()
    limit = GridPropagator.for_hamiltonian(ham, GRID, H, method="split").max_stable_dt()
    dts = [limit, limit / 2, limit / 4]
    outs = [GridPropagator.for_hamiltonian(ham, GRID, H, "split", dt).propagate(psi0, 0.5) for dt in dts]
    for out in outs:
        assert abs(out.norm() - psi0.norm()) <= 1e-10
    ref = GridPropagator.for_hamiltonian(ham, GRID, H, "eigen").propagate(psi0, 0.5)
    errs = [rel(o, ref) for o in outs]
    assert 3.0 < errs[0] / errs[1] < 5.0 and 3.0 < errs[1] / errs[2] < 5.0


def test_split_step_rejects_large_steps():
    psi0 = render(standard_packet(0.0, 0.0, H), GRID)
    U = GridPropagator.for_hamiltonian(free_particle(), GRID, H, "split", dt=1.0)
    with pytest.raises(TimeStepError) as info:
        U.propagate(psi0, 1.0)
    assert info.value.suggested_dt == pytest.approx(U.max_stable_dt())


def test_grid_propagator_needs_static_potential():
    from semiclab.phasespace import polynomial_hamiltonian

    with pytest.raises(GridError):
        GridPropagator.for_hamiltonian(polynomial_hamiltonian({(1, 1): 1.0}), GRID, H)


def test_eigen_and_split_agree_for_matrix_potentials():
    def V(x):
        v = np.zeros(x.shape[:-1] + (2, 2))
        v[..., 0, 0] = 0.5 * x[..., 0] ** 2
        v[..., 1, 1] = 0.5 * x[..., 0] ** 2 + 0.2
        v[..., 0, 1] = v[..., 1, 0] = 0.1 * x[..., 0]
        return v

    g = GridSpec.uniform(-4.0, 4.0, 256)
    h = 1 / 8
    u = render(standard_packet(0.5, 0.0, h), g).samples
    psi0 = WaveField(g, h, np.stack([u, 0 * u]), n_components=2)
    a = GridPropagator(g, h, V, method="eigen").propagate(psi0, 1.0)
    b = GridPropagator(g, h, V, dt=GridPropagator(g, h, V).max_stable_dt() / 4).propagate(psi0, 1.0)
    assert rel(b, a) < 1e-3
    assert abs(a.norm() - psi0.norm()) < 1e-10


FIO_H = 2.0 ** -6
FIO_GRID = GridSpec.uniform(-3.0, 3.0, 512)


def test_fio_zero_time_is_identity():
    psi = render(standard_packet(1.0, 0.0, FIO_H), FIO_GRID)
    ham = quartic_oscillator()
    assert rel(thawed_fio_apply(ham, psi, 0.0), psi) <= 1e-6
    assert rel(frozen_fio_apply(ham, psi, 0.0), psi) <= 1e-6


def test_fio_exact_for_free_particle_and_prefactor_branch():
    h = 2.0 ** -5
    g = GridSpec.uniform(-3.0, 3.0, 512)
    psi = render(standard_packet(1.0, 0.0, h), g)
    ham = free_particle()
    exact = GridPropagator.for_hamiltonian(ham, g, h).propagate(psi, 1.0)
    ens = fio_samples(psi)
    ens_f = dataclasses.replace(ens)
    assert rel(thawed_fio_apply(ham, psi, 1.0, quadrature=ens), exact) <= 1e-8
    assert rel(frozen_fio_apply(ham, psi, 1.0, quadrature=ens_f), exact) <= 1e-8
    times = np.linspace(0.0, 1.0, ens_f.prefactor.shape[0])
    k_exact = 2 ** -0.5 * np.sqrt(2 - 1j * times)
    np.testing.assert_allclose(ens_f.prefactor, np.broadcast_to(k_exact[:, None], ens_f.prefactor.shape),
                               atol=1e-9)


def test_thawed_and_frozen_close_for_quartic():
    h = 2.0 ** -5
    g = GridSpec.uniform(-3.0, 3.0, 512)
    psi = render(standard_packet(1.0, 0.0, h), g)
    ham = quartic_oscillator()
    exact = GridPropagator.for_hamiltonian(ham, g, h).propagate(psi, 1.0)
    a = thawed_fio_apply(ham, psi, 1.0)
    b = frozen_fio_apply(ham, psi, 1.0)
    assert rel(a, exact) < 0.1 and rel(b, exact) < 0.1
    assert rel(a, b) < 0.1


def test_stratified_quadrature_is_seeded():
    psi = render(standard_packet(0.0, 0.0, 2.0 ** -4), GridSpec.uniform(-3.0, 3.0, 256))
    a = fio_samples(psi, method="stratified", seed=3)
    b = fio_samples(psi, method="stratified", seed=3)
    c = fio_samples(psi, method="stratified", seed=4)
    np.testing.assert_array_equal(a.points, b.points)
    assert not np.array_equal(a.points, c.points)
    assert abs(a.meta["mass_deficit"]) < 0.05


def test_branch_tracking_refuses_coarse_sampling():
    z = np.exp(1j * np.array([0.0, 0.2, 2.5]))[:, None]
    with pytest.raises(BranchTrackingError):
        _continuous_sqrt(z)
    w = np.exp(1j * np.linspace(0, 4 * np.pi, 200))[:, None]
    r = _continuous_sqrt(w)
    np.testing.assert_allclose(r[-1, 0], np.exp(2j * np.pi), atol=1e-12)


def test_transported_symbol_matches_direct_flow():
    ham = harmonic_oscillator()
    a = bump()
    T = TransportedSymbol(ham, a, 0.0, 0.8, (-3.0, 3.0), (-3.0, 3.0), spacing=0.02)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2.0, 2.0, (50, 2))
    end = flow_many(ham, pts, 0.0, 0.8)["z"]
    np.testing.assert_allclose(T(pts[:, :1], pts[:, 1:]), a(end[:, :1], end[:, 1:]), atol=1e-6)
    outside = np.array([[3.5, 0.1]])
    end = flow_many(ham, outside, 0.0, 0.8)["z"]
    np.testing.assert_allclose(T(outside[:, :1], outside[:, 1:]), a(end[:, :1], end[:, 1:]), atol=1e-12)


def test_egorov_equal_times_and_quadratic_exactness():
    g = GridSpec.uniform(-3.0, 3.0, 128)
    h = 1 / 16
    _, _, r = egorov_evolve(quartic_oscillator(), bump(), 0.4, 0.4, g, h)
    assert r <= 1e-10
    # tables cover the coarse band so no node is flowed outside them
    box = ((-4.0, 4.0), (-4.5, 4.5))
    harm = TransportedSymbol(harmonic_oscillator(), bump(), 0.0, 1.0, *box, spacing=0.02)
    quart = TransportedSymbol(quartic_oscillator(), bump(), 0.0, 1.0, *box, spacing=0.02)
    coarse = egorov_evolve(harmonic_oscillator(), bump(), 0.0, 1.0, g, h, transported=harm)[2]
    fine = egorov_evolve(harmonic_oscillator(), bump(), 0.0, 1.0, g.refined(), h, transported=harm)[2]
    quartic = egorov_evolve(quartic_oscillator(), bump(), 0.0, 1.0, g, h, transported=quart)[2]
    assert fine < coarse
    assert fine < 1e-2 * quartic


def test_pushforward_examples():
    g = GridSpec.uniform(-4.0, 4.0, 256)
    psi = render(standard_packet(0.0, 1.0, H), g)
    assert measure_pushforward_check(free_particle(), psi, 0.0) == 0.0
    out = GridPropagator.for_hamiltonian(free_particle(), g, H).propagate(psi, 1.0)
    np.testing.assert_allclose(husimi_peak(out), [1.0, 1.0], atol=0.1)
    z0 = np.array([1.0, 0.5])
    psi = render(standard_packet(*z0, H), g)
    out = GridPropagator.for_hamiltonian(harmonic_oscillator(), g, H).propagate(psi, np.pi)
    np.testing.assert_allclose(husimi_peak(out), -z0, atol=0.1)


def test_pushforward_discrepancy_shrinks_with_h():
    vals = []
    for h in (2.0 ** -3, 2.0 ** -5):
        g = GridSpec.uniform(-4.0, 4.0, 512)
        psi = render(standard_packet(1.0, 0.0, h), g)
        vals.append(measure_pushforward_check(quartic_oscillator(), psi, 1.0))
    assert vals[1] < vals[0]


def test_eigenfunction_diagnostics_examples():
    g = GridSpec.uniform(-4.0, 4.0, 256)
    h = 1 / 16
    V = lambda x: x[..., 0] ** 2
    rep = eigenfunction_diagnostics(V, g, h, energy=h, delta=4 * np.sqrt(h))
    assert abs(rep["eigenvalues"][0] - h) < 1e-8
    assert rep["fractions"][0] >= 0.95
    assert eigenfunction_diagnostics(V, g, h, energy=h, delta=1e6)["fractions"][0] == pytest.approx(1.0)
    torus = GridSpec.uniform(0.0, 2 * np.pi, 256)
    h = 1 / 32
    rep = eigenfunction_diagnostics(lambda x: np.zeros(x.shape[:-1]), torus, h, 1.0, delta=4 * np.sqrt(h))
    assert abs(rep["eigenvalues"][0] - 1.0) < 1e-10
    assert rep["fractions"][0] >= 0.95
    with pytest.raises(GridError):
        eigenfunction_diagnostics(V, g, h, energy=1e4, delta=0.1)
