import csv

import numpy as np
import pytest

from semiclab.grid import GridSpec
from semiclab.multilevel import (CrossingProximityError, HopEnsemble, HopState, MatrixPotential,
                                 TangentialPassageError, TimeWindow, adiabatic_egorov_check, band_packet,
                                 band_populations, band_vectors, eigen_structure, hopping_observable,
                                 hopping_simulate, lz_rate, parallel_transport, wigner_ensemble)
from semiclab.phasespace import PhasePoint
from semiclab.symbols import MatrixSymbol

CONE = MatrixPotential.conical()


def constant_potential():
    return MatrixPotential(lambda x: np.stack([np.ones(np.shape(x)[:-1]), np.zeros(np.shape(x)[:-1])], -1),
                           lambda x: np.zeros(np.shape(x)[:-1] + (2, 1)), d=1, name="constant")


def test_eigenvalues_match_direct_eigensolve():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 2))
    lp, lm = CONE.eigenvalues(x)
    direct = np.linalg.eigvalsh(CONE.matrix(x))
    np.testing.assert_allclose(direct[:, 1], lp, atol=1e-12)
    np.testing.assert_allclose(direct[:, 0], lm, atol=1e-12)
    np.testing.assert_allclose(np.trace(CONE.matrix(x), axis1=-2, axis2=-1), 0.0, atol=1e-15)


def test_eigen_structure_diagonal_case():
    es = eigen_structure(CONE, np.array([1.0, 0.0]))
    assert es.lam_plus == pytest.approx(1.0) and es.lam_minus == pytest.approx(-1.0)
    np.testing.assert_allclose(es.P_plus, np.diag([1.0, 0.0]), atol=1e-15)


def test_projector_identities():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 2))
    es = eigen_structure(CONE, x)
    V = CONE.matrix(x)
    I = np.eye(2)
    np.testing.assert_allclose(es.P_plus + es.P_minus, np.broadcast_to(I, V.shape), atol=1e-12)
    np.testing.assert_allclose(es.P_plus @ es.P_plus, es.P_plus, atol=1e-12)
    np.testing.assert_allclose(es.P_plus @ es.P_minus, 0.0, atol=1e-12)
    np.testing.assert_allclose(V @ es.P_plus, es.lam_plus[:, None, None] * es.P_plus, atol=1e-12)
    np.testing.assert_allclose(V @ es.P_minus, es.lam_minus[:, None, None] * es.P_minus, atol=1e-12)


def test_crossing_proximity_is_refused():
    with pytest.raises(CrossingProximityError):
        eigen_structure(CONE, np.array([1e-8, 0.0]))


def test_band_vectors_are_eigenvectors():
    x = np.array([[0.3, -0.8], [-1.0, 0.2]])
    for band in (1, -1):
        v = band_vectors(CONE, x, band)
        lam = band * np.linalg.norm(x, axis=-1)
        np.testing.assert_allclose(np.einsum("nij,nj->ni", CONE.matrix(x), v), lam[:, None] * v, atol=1e-12)


def test_parallel_transport_constant_potential_is_identity():
    fr = parallel_transport(constant_potential(), PhasePoint(0.0, 1.0), band=1, times=np.linspace(0, 2, 5))
    np.testing.assert_allclose(fr.R, np.broadcast_to(np.eye(2), fr.R.shape), atol=1e-12)


def test_parallel_transport_loop_gives_sign_flip():
    def loop(t):
        return np.array([np.cos(t), np.sin(t)]), np.array([-np.sin(t), np.cos(t)])

    times = np.linspace(0, 2 * np.pi, 41)
    for band in (1, -1):
        fr = parallel_transport(CONE, loop, band=band, times=times)
        v0 = band_vectors(CONE, np.array([1.0, 0.0]), band)
        np.testing.assert_allclose(fr.R[-1] @ v0, -v0, atol=1e-8)
        assert fr.orthogonality_defect() <= 1e-10
        assert fr.band_defect(CONE) <= 1e-8


def test_parallel_transport_along_band_flow():
    fr = parallel_transport(CONE, PhasePoint([1.0, 0.5], [0.2, 0.3]), band=-1, times=np.linspace(0, 1.5, 16))
    assert fr.orthogonality_defect() <= 1e-10
    assert fr.band_defect(CONE) <= 1e-8


def test_lz_rate_examples():
    h = 0.05
    assert lz_rate(CONE, PhasePoint([0.0, 0.0], [0.0, 1.0]), h) == 1.0
    delta, v = 0.2, 1.5
    assert lz_rate(CONE, PhasePoint([delta, 0.0], [0.0, v]), h) == pytest.approx(
        np.exp(-np.pi * delta ** 2 / (h * v)), rel=1e-14)
    rates = [lz_rate(CONE, PhasePoint([d, 0.0], [0.0, v]), h) for d in (0.05, 0.1, 0.2, 0.4)]
    assert all(a > b for a, b in zip(rates, rates[1:]))
    with pytest.raises(TangentialPassageError):
        lz_rate(CONE, PhasePoint([0.5, 0.0], [0.0, 0.0]), h)


def test_hop_state_validation():
    with pytest.raises(ValueError):
        HopState(PhasePoint([0.0, 0.0], [0.0, 1.0]), 0, 0.5)
    with pytest.raises(ValueError):
        HopState(PhasePoint([0.0, 0.0], [0.0, 1.0]), 1, 1.5)


def test_no_crossing_keeps_band_and_weight():
    ens = HopEnsemble.from_states([HopState(PhasePoint([1.0, 0.0], [1.0, 0.0]), -1, 1.0)])
    out = hopping_simulate(CONE, ens, 1.0, 0.05)
    assert out.size == 1 and out.band[0] == -1 and out.weight[0] == 1.0


def test_single_passage_matches_landau_zener():
    h, v, delta = 0.02, 3.0, 0.15
    # launched just before the hopping surface so the band force barely bends the path
    ens = HopEnsemble.from_states([HopState(PhasePoint([delta, -0.1], [0.0, v]), -1, 1.0)])
    out = hopping_simulate(CONE, ens, 0.1, h)
    assert out.size == 2
    assert abs(out.total_weight() - 1.0) <= 1e-12
    expected = np.exp(-np.pi * delta ** 2 / (h * v))
    assert abs(out.populations()[1] - expected) <= 0.1 * expected


def test_split_mode_conserves_weight_and_threads_do_not_matter():
    h = 0.02
    ens = wigner_ensemble([0.1, -1.5], [0.0, 3.0], h, band=-1, nodes=3)
    a = hopping_simulate(CONE, ens, 1.0, h, chunk=16)
    b = hopping_simulate(CONE, ens, 1.0, h, chunk=16, threads=3)
    assert abs(a.total_weight() - 1.0) <= 1e-12
    for name in ("z", "band", "weight", "phase", "branch_id"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_monte_carlo_agrees_with_splitting():
    h = 0.02
    ens = wigner_ensemble([0.1, -1.5], [0.0, 3.0], h, band=-1, nodes=3)
    split = hopping_simulate(CONE, ens, 1.0, h)
    mc = hopping_simulate(CONE, ens, 1.0, h, mode="mc", seed=7)
    again = hopping_simulate(CONE, ens, 1.0, h, mode="mc", seed=7)
    np.testing.assert_array_equal(mc.band, again.band)
    assert abs(mc.total_weight() - 1.0) <= 1e-12
    # per-root transition probabilities from the splitting tree
    T = np.array([split.weight[(split.root == r) & (split.band == 1)].sum() / ens.weight[r]
                  for r in range(ens.size)])
    sigma = np.sqrt(np.sum(ens.weight ** 2 * T * (1 - T)))
    assert abs(mc.populations()[1] - split.populations()[1]) <= 3 * sigma + 1e-12


def test_hopping_observable_examples(tmp_path):
    h = 0.02
    ens = wigner_ensemble([0.1, -1.5], [0.0, 3.0], h, band=-1, nodes=2)
    out = hopping_simulate(CONE, ens, 1.0, h)
    assert hopping_observable(out, 1.0, 1.0) == pytest.approx(1.0, abs=1e-12)
    pops = out.populations()
    assert hopping_observable(out, 1.0, 0.0) == pytest.approx(pops[1], abs=1e-15)
    assert hopping_observable(out, 0.0, 1.0) == pytest.approx(pops[-1], abs=1e-15)
    assert hopping_observable(out, lambda x, xi: xi[:, 1], 0.0) > 0
    path = tmp_path / "ens.csv"
    out.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["branch_id", "t", "x1", "x2", "xi1", "xi2", "band", "weight", "S"]
    assert len(rows) == out.size + 1


def test_band_packet_populations():
    h = 0.05
    g = GridSpec.uniform(-2.0, 2.0, 128, d=2)
    psi = band_packet(CONE, g, [0.8, 0.6], [0.0, 0.0], h, band=-1)
    pops = band_populations(CONE, psi)
    assert pops[-1] == pytest.approx(1.0, abs=1e-6)
    assert abs(pops[1]) < 1e-10


def test_adiabatic_zero_symbol_gives_zero():
    Vp = MatrixPotential.rotating(rho=0.5, k=2.0)
    a = MatrixSymbol(lambda x, xi: np.zeros(x.shape[:-1] + (2, 2)), 2, d=1)
    g = GridSpec.uniform(-np.pi, np.pi, 64)
    assert adiabatic_egorov_check(Vp, a, TimeWindow(), 1 / 16, g) == 0.0


def test_adiabatic_constant_potential_decouples():
    # with V = diag(1, -1) the upper band evolves by the free flow, so the
    # residual is that of the scalar Egorov theorem for a quadratic symbol
    Vp = constant_potential()

    def fa(x, xi):
        s = np.exp(-((x[..., 0] - 0.2) ** 2 + xi[..., 0] ** 2) / 0.3)
        return s[..., None, None] * np.diag([1.0, 0.0])

    a = MatrixSymbol(fa, 2, d=1)
    g = GridSpec.uniform(-np.pi, np.pi, 128)
    r = adiabatic_egorov_check(Vp, a, TimeWindow(0.5, 0.1, 12), 1 / 16, g)
    assert r < 1e-6


def test_adiabatic_refuses_gap_closure():
    Vp = MatrixPotential(lambda x: np.stack([x[..., 0], np.zeros(x.shape[:-1])], -1),
                         lambda x: np.ones(x.shape[:-1] + (2, 1)) * np.array([[1.0], [0.0]]), d=1)
    a = MatrixSymbol(lambda x, xi: np.ones(x.shape[:-1] + (2, 2)), 2, d=1)
    g = GridSpec.uniform(-1.0, 1.0, 32)
    with pytest.raises(CrossingProximityError):
        adiabatic_egorov_check(Vp, a, TimeWindow(), 1 / 16, g)
