import csv
import warnings

import numpy as np
import pytest

from semiclab.grid import GridSpec, load_matrix
from semiclab.quantization import (BandLimitWarning, EllipticityError, GaussianFunction, PlateauFunction,
                                   ScalarFunction, anti_wick, calculus_residual_commutator,
                                   calculus_residual_product, calderon_vaillancourt_bound,
                                   fit_garding_constant, function_of_operator, garding_min_eig,
                                   helffer_sjostrand, hilbert_schmidt_check, left_quantize, operator_norm,
                                   parametrix_residual, probe_basis, quantize, trace_formula_check,
                                   weyl_quantize, write_spectrum_csv)
from semiclab.symbols import FunctionSymbol, GaussianBump, PolynomialSymbol, ProductSymbol, constant, \
    poisson_bracket
from semiclab.wavepackets import render, standard_packet

X = PolynomialSymbol({(1, 0): 1.0})
XI = PolynomialSymbol({(0, 1): 1.0})
SMALL = GridSpec.uniform(-2.0, 2.0, 64)
H = 1 / 16
# phase box large enough for interior coherent-state probes
PROBE_GRID = GridSpec.uniform(-2.5, 2.5, 128)
PROBE_H = 1 / 32


@pytest.fixture(autouse=True)
def _quiet_band_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BandLimitWarning)
        yield


@pytest.fixture(scope="module")
def probes():
    return probe_basis(PROBE_GRID, PROBE_H)


def test_position_symbol_is_multiplication():
    M = weyl_quantize(X, SMALL, H).matrix
    np.testing.assert_array_equal(M, np.diag(SMALL.axis()))


def test_momentum_symbol_is_spectral_derivative():
    M = weyl_quantize(XI, SMALL, H).matrix
    k = SMALL.wavenumbers()
    eye = np.eye(SMALL.size)
    hD = np.fft.ifft(H * k[:, None] * np.fft.fft(eye, axis=0), axis=0)
    assert np.max(np.abs(M - hD)) <= 1e-8


def test_real_symbols_give_hermitian_operators():
    a = FunctionSymbol(lambda x, xi: np.exp(-x[..., 0] ** 2 - (xi[..., 0] - 0.3) ** 2) * (1 + x[..., 0]),
                       real=True)
    assert weyl_quantize(a, SMALL, H).hermitian_defect() <= 1e-10


def test_imaginary_part_gives_anti_hermitian_part():
    a = GaussianBump([0.1, 0.2], 0.4)
    b = GaussianBump([-0.3, 0.0], 0.5)
    A = weyl_quantize(a, SMALL, H).matrix
    B = weyl_quantize(b, SMALL, H).matrix
    C = weyl_quantize(FunctionSymbol(lambda x, xi: a(x, xi) + 1j * b(x, xi)), SMALL, H).matrix
    np.testing.assert_allclose(0.5 * (C - C.conj().T), 1j * B, atol=1e-12)
    np.testing.assert_allclose(0.5 * (C + C.conj().T), A, atol=1e-12)


def test_left_quantization_examples(probes):
    a = FunctionSymbol(lambda x, xi: np.exp(-x[..., 0] ** 2), real=True)
    np.testing.assert_allclose(left_quantize(a, SMALL, H).matrix, weyl_quantize(a, SMALL, H).matrix, atol=1e-12)
    np.testing.assert_allclose(left_quantize(XI, SMALL, H).matrix, weyl_quantize(XI, SMALL, H).matrix,
                               atol=1e-12)
    xxi = PolynomialSymbol({(1, 1): 1.0})
    W = weyl_quantize(xxi, PROBE_GRID, PROBE_H).matrix
    L = left_quantize(xxi, PROBE_GRID, PROBE_H).matrix
    eye = np.eye(PROBE_GRID.size)
    assert operator_norm(W - L - (PROBE_H / 2j) * eye, probes) < 1e-10
    assert abs(operator_norm(W - L, probes) - PROBE_H / 2) < 1e-10


def test_quantize_rejects_bad_arguments():
    with pytest.raises(ValueError):
        quantize(X, SMALL, H, kind="anti")
    with pytest.raises(ValueError):
        quantize(X, SMALL, 0.0)


def test_band_limit_warning():
    a = FunctionSymbol(lambda x, xi: np.exp(-x[..., 0] ** 2) * np.cos(xi[..., 0]), class_order=0)
    with warnings.catch_warnings():
        warnings.simplefilter("error", BandLimitWarning)
        with pytest.raises(BandLimitWarning):
            weyl_quantize(a, SMALL, H)
        weyl_quantize(GaussianBump([0.0, 0.0], 0.4), SMALL, H)


def test_taper_only_touches_the_top_octave():
    b = GaussianBump([0.0, 0.0], 0.4)
    grid = SMALL.refined()
    plain = weyl_quantize(b, grid, H).matrix
    tapered = weyl_quantize(b, grid, H, taper=True).matrix
    assert np.max(np.abs(plain - tapered)) < 1e-8


def test_poisson_bracket_of_coordinates():
    x = np.array([[0.3], [1.2]])
    xi = np.array([[-0.5], [2.0]])
    np.testing.assert_allclose(poisson_bracket(XI, X)(x, xi), [1.0, 1.0])
    np.testing.assert_allclose(poisson_bracket(X, XI)(x, xi), [-1.0, -1.0])


def test_linear_symbols_are_exact(probes):
    assert calculus_residual_product(X, XI, PROBE_GRID, PROBE_H, probes) <= 1e-10
    assert calculus_residual_commutator(XI, X, PROBE_GRID, PROBE_H, probes) <= 1e-10


def test_self_commutator_vanishes():
    a = GaussianBump([0.1, -0.2], 0.4)
    assert calculus_residual_commutator(a, a, SMALL, H) < 1e-12
    assert calculus_residual_product(a, a, SMALL, H) > 0


def test_product_residual_is_second_order():
    a = GaussianBump([0.1, 0.0, ], 0.5)
    b = GaussianBump([-0.2, 0.25], 0.5)
    grid = GridSpec.uniform(-3.5, 3.5, 256)
    coarse = calculus_residual_product(a, b, grid, 1 / 16)
    fine = calculus_residual_product(a, b, grid.refined(), 1 / 32)
    assert 2.5 < coarse / fine < 5.0


def test_garding_examples():
    assert abs(garding_min_eig(constant(1.0), SMALL, H) - 1.0) < 1e-12
    a = PolynomialSymbol({(2, 0): 1.0, (0, 2): 1.0})
    b = ProductSymbol(a, GaussianBump([0.0, 0.0], 0.5))
    lam = [garding_min_eig(b, GridSpec.uniform(-2.5, 2.5, n), h) for n, h in ((64, 1 / 16), (128, 1 / 32))]
    assert all(-0.5 * h < l for l, h in zip(lam, (1 / 16, 1 / 32)))
    with pytest.raises(ValueError):
        garding_min_eig(FunctionSymbol(lambda x, xi: 1j * x[..., 0], real=False), SMALL, H)


def test_fit_garding_constant():
    hs = [2.0 ** -k for k in range(4, 9)]
    fit = fit_garding_constant(hs, [-0.1 * h for h in hs])
    assert fit["stable"] and abs(fit["C"] - 0.1) < 1e-12
    fit = fit_garding_constant(hs, [-0.1 * h ** 0.5 for h in hs])
    assert not fit["stable"]
    fit = fit_garding_constant(hs, [0.1] * 5)
    assert fit["stable"] and fit["C"] == 0.0


def test_parametrix_examples():
    p = FunctionSymbol(lambda x, xi: 1 + xi[..., 0] ** 2, class_order=2, real=True)
    assert parametrix_residual(p, SMALL, H) <= 1e-10
    pv = FunctionSymbol(lambda x, xi: 1 + xi[..., 0] ** 2 + 0.3 * np.exp(-x[..., 0] ** 2 / 0.2),
                        class_order=2, real=True)
    r1 = parametrix_residual(pv, SMALL, H)
    r2 = parametrix_residual(pv, SMALL.refined(), H)
    assert abs(r2 / r1 - 1) < 0.05


def test_parametrix_rejects_non_elliptic_symbols():
    p = FunctionSymbol(lambda x, xi: xi[..., 0] ** 2 - 1, class_order=2, real=True)
    with pytest.raises(EllipticityError):
        parametrix_residual(p, SMALL, H)


def test_function_of_operator_examples():
    A = weyl_quantize(GaussianBump([0.0, 0.0], 0.5), SMALL, H)
    same = function_of_operator(A, lambda t: t)
    assert np.max(np.abs(same.matrix - 0.5 * (A.matrix + A.matrix.conj().T))) <= 1e-10
    one = function_of_operator(A, np.ones_like)
    assert np.max(np.abs(one.matrix - np.eye(SMALL.size))) <= 1e-10
    with pytest.raises(ValueError):
        function_of_operator(weyl_quantize(FunctionSymbol(lambda x, xi: 1j * x[..., 0]), SMALL, H), np.exp)


def test_scalar_function_derivatives():
    F = GaussianFunction(0.3, 0.2)
    G = ScalarFunction(F)
    t = np.linspace(-0.2, 0.8, 7)
    for k in (1, 2, 3):
        np.testing.assert_allclose(G.derivative(k, t), F.derivative(k, t), atol=1e-3 * 5 ** k)
    P = PlateauFunction(0.0, 1.0, 0.1)
    np.testing.assert_allclose(P(np.array([-0.2, 0.5, 1.2])), [0.0, 1.0, 0.0])


def test_helffer_sjostrand_examples():
    A = weyl_quantize(GaussianBump([0.1, 0.0], 0.5), SMALL, H)
    zero = helffer_sjostrand(A, ScalarFunction(np.zeros_like, derivs=lambda k, t: np.zeros_like(t),
                                               support=(-1.0, 2.0)))
    assert np.max(np.abs(zero.matrix)) == 0.0
    F = GaussianFunction(0.6, 0.15)
    exact = function_of_operator(A, F).matrix
    fine = helffer_sjostrand(A, F, order=3, nx=200, ny=60)
    coarse = helffer_sjostrand(A, F, order=3, nx=100, ny=30)
    err_fine = operator_norm(fine.matrix - exact)
    err_coarse = operator_norm(coarse.matrix - exact)
    assert err_fine <= 1e-4
    assert err_coarse >= 2 * err_fine
    with pytest.raises(ValueError):
        helffer_sjostrand(A, F, order=1)


def test_trace_formula_examples():
    grid = GridSpec.uniform(-2.0, 2.0, 1024)
    h = 1 / 256
    osc = PolynomialSymbol({(2, 0): 0.5, (0, 2): 0.5})
    lhs, rhs = trace_formula_check(osc, np.zeros_like, grid, h)
    assert lhs == 0.0 and rhs == 0.0
    lhs, rhs = trace_formula_check(osc, PlateauFunction(0.0, 1.0, 0.1), grid, h)
    assert abs(lhs / rhs - 1) <= 0.05
    # eigenvalues h (n + 1/2) below the plateau edge, plus the ramp
    assert 1 / h - 5 < lhs < 1.1 / h + 5


def test_hilbert_schmidt_identity():
    hs, l2 = hilbert_schmidt_check(GaussianBump([0.1, 0.2], 0.5), SMALL, H)
    assert abs(hs / l2 - 1) < 0.01


def test_anti_wick_of_constant_is_identity_on_probes(probes):
    AW = anti_wick(constant(1.0), PROBE_GRID, PROBE_H)
    eye = np.eye(PROBE_GRID.size)
    assert operator_norm(AW.matrix - eye, probes) < 1e-6


def test_anti_wick_expectation_is_gaussian_smoothing():
    a = FunctionSymbol(lambda x, xi: np.exp(-x[..., 0] ** 2), real=True)
    grid = GridSpec.uniform(-3.0, 3.0, 128)
    AW = anti_wick(a, grid, H)
    for q in (-0.4, 0.0, 0.5):
        g = render(standard_packet(q, 0.0, H), grid, points_per_width=4)
        val = np.vdot(g.samples, AW.matrix @ g.samples) * grid.cell
        # coherent state and anti-Wick window each contribute variance h / 2
        exact = (1 + 2 * H) ** -0.5 * np.exp(-q ** 2 / (1 + 2 * H))
        assert abs(val - exact) < 1e-8


def test_operator_norm_bounded_by_derivative_sums():
    for s in (0.3, 0.5, 1.0):
        b = GaussianBump([0.1, 0.2], s)
        assert weyl_quantize(b, SMALL, H).norm() <= calderon_vaillancourt_bound(b, SMALL, H)


def test_operator_export(tmp_path):
    A = weyl_quantize(GaussianBump([0.0, 0.0], 0.5), SMALL, H)
    A.save(tmp_path / "a.bin")
    np.testing.assert_array_equal(load_matrix(tmp_path / "a.bin"), A.matrix)
    write_spectrum_csv(tmp_path / "s.csv", A.eigvalsh())
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["index", "eigenvalue"] and len(rows) == SMALL.size + 1
