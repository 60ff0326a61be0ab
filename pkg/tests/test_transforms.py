import warnings

import numpy as np
import pytest

from semiclab.grid import GridError, GridSpec, WaveField, load_phasefield, load_wavefield, save_phasefield, \
    save_wavefield
from semiclab.transforms import (AliasingError, CoverageWarning, PhaseGrid, bargmann, bargmann_synthesis,
                                 h_fourier, h_oscillation_tail, husimi, inverse_h_fourier, moments,
                                 sobolev_ladder, sobolev_norm, spectral_momentum_mean, wigner)
from semiclab.wavepackets import GaussianPacket, PhasePoint, SiegelMatrix, render, standard_packet

H = 1 / 16
GRID = GridSpec.uniform(-4.0, 4.0, 256)


def coherent(q, p, h=H, grid=GRID):
    return render(standard_packet(q, p, h), grid)


def test_h_fourier_is_unitary_and_invertible():
    f = coherent(0.3, 0.5)
    fh = h_fourier(f)
    assert abs(fh.norm() - f.norm()) < 1e-10
    back = inverse_h_fourier(fh, GRID)
    assert np.linalg.norm(back.samples - f.samples) / np.linalg.norm(f.samples) < 1e-12


def test_h_fourier_of_coherent_state():
    q, p = 0.4, -0.6
    x = GRID.axis()
    f = WaveField(GRID, H, np.exp(1j * p * q / (2 * H)) * coherent(q, p).samples)
    fh = h_fourier(f)
    xi = fh.grid.axis()
    # rotated packet centred at J z = (p, -q)
    expected = np.exp(-1j * p * q / (2 * H)) * (np.pi * H) ** -0.25 \
        * np.exp(-(xi - p) ** 2 / (2 * H) - 1j * q * (xi - p) / H)
    assert np.max(np.abs(fh.samples - expected)) < 1e-10
    assert x.size == xi.size


def test_h_fourier_flags_aliasing():
    x = GRID.axis()
    f = WaveField(GRID, H, np.exp(1j * 4.5 * x / H) * np.exp(-x ** 2))
    with pytest.raises(AliasingError):
        h_fourier(f)


def test_spectral_and_fourier_momentum_agree():
    f = coherent(-0.2, 0.7)
    fh = h_fourier(f)
    mean_fourier = float(np.sum(fh.grid.axis() * np.abs(fh.samples) ** 2) * fh.grid.cell)
    assert abs(mean_fourier - spectral_momentum_mean(f)) < 1e-8


def test_moments_of_coherent_state():
    m = moments(coherent(0.3, 0.5))
    np.testing.assert_allclose(m.mean_x, [0.3], atol=1e-8)
    np.testing.assert_allclose(m.mean_xi, [0.5], atol=1e-8)
    np.testing.assert_allclose(m.dev_x, [np.sqrt(H / 2)], atol=1e-8)
    np.testing.assert_allclose(m.dev_xi, [np.sqrt(H / 2)], atol=1e-8)


def test_moments_translation_covariance():
    a = moments(coherent(0.0, 0.2))
    b = moments(coherent(0.75, 0.2))
    np.testing.assert_allclose(b.mean_x - a.mean_x, [0.75], atol=1e-10)
    np.testing.assert_allclose(b.dev_x, a.dev_x, atol=1e-10)
    np.testing.assert_allclose(b.dev_xi, a.dev_xi, atol=1e-10)


def test_moments_reject_unnormalized_fields():
    f = coherent(0.0, 0.0)
    with pytest.raises(GridError):
        moments(f.with_samples(2 * f.samples))


def test_uncertainty_for_squeezed_packet():
    pkt = GaussianPacket(PhasePoint(0.1, 0.2), SiegelMatrix([[0.5 + 0.25j]]), H)
    f = render(pkt, GRID)
    m = moments(f)
    assert m.uncertainty_products()[0] >= H / 2 - 1e-8


def test_wigner_of_coherent_state():
    q, p = 0.3, 0.5
    W = wigner(coherent(q, p))
    x, xi = W.axes()
    exact = (np.pi * H) ** -1 * np.exp(-((x[:, None] - q) ** 2 + (xi[None, :] - p) ** 2) / H)
    assert np.max(np.abs(W.values - exact)) / exact.max() < 1e-4
    assert abs(W.total() - 1.0) < 1e-6


def test_wigner_marginals():
    f = WaveField(GRID, H, coherent(-0.5, 0.3).samples + 0.6 * coherent(0.8, -0.4).samples).normalized()
    W = wigner(f)
    np.testing.assert_allclose(W.marginal_x(), np.abs(f.samples) ** 2, atol=1e-6)
    xi = W.xi_axes[0]
    fh = h_fourier(f)
    # the natural Wigner momentum axis is twice as fine; compare on the shared nodes
    pick = np.arange(0, xi.size, 2)
    np.testing.assert_allclose(xi[pick], fh.grid.axis(), atol=1e-12)
    np.testing.assert_allclose(W.marginal_xi()[pick], np.abs(fh.samples) ** 2, atol=1e-6)


def test_wigner_explicit_axes_match_natural_axes():
    f = coherent(0.2, -0.3)
    W = wigner(f)
    sel = np.arange(200, 320, 7)
    Wd = wigner(f, xi_axes=[W.xi_axes[0][sel]])
    np.testing.assert_allclose(Wd.values, W.values[:, sel], atol=1e-10)


def test_bargmann_of_coherent_state_and_isometry():
    q0, p0 = 0.2, -0.1
    f = coherent(q0, p0)
    B = bargmann(f)
    assert abs(B.meta["mass_deficit"]) < 1e-3
    pts = B.meta["zgrid"].points()
    expected = (2 * np.pi * H) ** -0.5 * np.exp(-((pts[:, 0] - q0) ** 2 + (pts[:, 1] - p0) ** 2) / (4 * H))
    np.testing.assert_allclose(np.abs(B.values).ravel(), expected, atol=1e-10)


def test_bargmann_inversion():
    f = WaveField(GRID, H, coherent(-0.4, 0.2).samples - 0.7j * coherent(0.5, -0.3).samples).normalized()
    B = bargmann(f)
    back = bargmann_synthesis(B, GRID)
    assert np.linalg.norm(back.samples - f.samples) / np.linalg.norm(f.samples) < 1e-3


def test_bargmann_warns_on_small_phase_grid():
    f = coherent(0.0, 0.0)
    small = PhaseGrid.box([0.0, 0.0], 0.2, np.sqrt(H) / 2)
    with pytest.warns(CoverageWarning):
        bargmann(f, small)


def test_husimi_is_nonnegative_with_unit_mass():
    f = WaveField(GRID, H, coherent(-0.3, 0.0).samples + coherent(0.3, 0.0).samples).normalized()
    Q = husimi(f)
    assert Q.values.min() >= 0
    zg = Q.meta["zgrid"]
    assert abs(Q.values.sum() * zg.cell() - 1.0) < 1e-3


def test_oscillation_tail_examples():
    g = GridSpec.uniform(0.0, 2 * np.pi, 64)
    h = 1 / 8
    const = WaveField(g, h, np.full(64, 1 / np.sqrt(2 * np.pi)))
    assert h_oscillation_tail(const, 0.1) < 1e-25
    wave = WaveField(g, h, np.exp(1j * g.axis() / h) / np.sqrt(2 * np.pi))
    assert h_oscillation_tail(wave, 1.5) < 1e-25
    assert abs(h_oscillation_tail(wave, 0.5) - 1.0) < 1e-12
    f = coherent(0.0, 1.0)
    assert h_oscillation_tail(f, 2.0) < np.exp(-1 / H)


def test_oscillation_tail_decreases_in_radius():
    f = coherent(0.1, 0.4)
    tails = [h_oscillation_tail(f, R) for R in np.linspace(0, 1.5, 16)]
    assert all(a >= b for a, b in zip(tails, tails[1:]))


def test_sobolev_norms():
    assert sobolev_ladder(2.5) == [0.0, 1.0, 2.0, 2.5]
    with pytest.raises(ValueError):
        sobolev_ladder(-1)
    f = coherent(0.3, 0.0)
    assert abs(sobolev_norm(f, 0) - f.norm()) < 1e-12
    g = GridSpec.uniform(0.0, 2 * np.pi, 64)
    wave = WaveField(g, 1 / 8, np.exp(8j * g.axis()) / np.sqrt(2 * np.pi))
    for s in (0.5, 1.0, 2.5):
        assert abs(sobolev_norm(wave, s) - 2 ** (s / 2)) < 1e-12


def test_sobolev_norm_of_packet_bounded_in_h():
    vals = []
    for h in (2.0 ** -4, 2.0 ** -6, 2.0 ** -8):
        grid = GridSpec.uniform(-2.0, 2.0, 1024)
        vals.append(sobolev_norm(coherent(0.0, 0.0, h, grid), 2))
    # <xi>^2 moments of the packet: 1 + 2 <xi^2> + <xi^4> with <xi^2> = h/2
    assert max(vals) < np.sqrt(1 + 2 * 2.0 ** -5 + 3 * 2.0 ** -10) + 1e-10


def test_wavefield_serialization_round_trip(tmp_path):
    f = coherent(0.1, 0.2)
    save_wavefield(tmp_path / "f.bin", f)
    g = load_wavefield(tmp_path / "f.bin")
    assert g.grid == f.grid and g.h == f.h
    np.testing.assert_array_equal(g.samples, f.samples)
    W = wigner(f)
    save_phasefield(tmp_path / "w.bin", W)
    W2 = load_phasefield(tmp_path / "w.bin")
    np.testing.assert_array_equal(W2.values, W.values)


def test_boundary_check():
    x = GRID.axis()
    with pytest.raises(GridError):
        WaveField.from_function(GRID, H, lambda x: np.exp(-x ** 2 / 20))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        WaveField.from_function(GRID, H, lambda x: np.exp(-2 * x ** 2))
    assert x[0] == -4.0
