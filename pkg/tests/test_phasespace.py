import numpy as np
import pytest

from semiclab.phasespace import (IntegrationError, PhasePoint, cosine_potential, flow, flow_many,
                                 free_particle, hamiltonian_vector_field, harmonic_oscillator,
                                 polynomial_hamiltonian, quartic_oscillator, symplectic_form,
                                 symplectic_matrix)


def test_phase_point_requires_equal_lengths():
    with pytest.raises(ValueError):
        PhasePoint([0.0, 1.0], [0.0])
    z = PhasePoint.from_vector([1.0, 2.0, 3.0, 4.0])
    assert z.d == 2
    np.testing.assert_array_equal(z.vector(), [1, 2, 3, 4])


def test_symplectic_matrix_squares_to_minus_identity():
    for d in (1, 2, 3):
        J = symplectic_matrix(d)
        np.testing.assert_array_equal(J @ J, -np.eye(2 * d))


def test_symplectic_form_values():
    # J (1, 0) = (0, -1), dotted with (0, 1)
    assert symplectic_form([1.0, 0.0], [0.0, 1.0]) == -1.0
    z = np.array([0.3, -1.2, 0.7, 2.0])
    assert symplectic_form(z, z) == 0.0
    with pytest.raises(ValueError):
        symplectic_form([1.0, 0.0], [1.0, 0.0, 0.0, 0.0])


def test_vector_field_examples():
    np.testing.assert_allclose(hamiltonian_vector_field(free_particle(), 0.0, [0.4, 1.5]), [1.5, 0.0])
    ham = polynomial_hamiltonian({(1, 1): 1.0})
    np.testing.assert_allclose(hamiltonian_vector_field(ham, 0.0, PhasePoint(1.0, 1.0)), [1.0, -1.0])


def test_vector_field_is_divergence_free():
    rng = np.random.default_rng(1)
    coeffs = {(i, j): rng.normal() for i in range(4) for j in range(4) if i + j <= 4}
    ham = polynomial_hamiltonian(coeffs)
    eps = 1e-5
    for z in rng.uniform(-1, 1, (5, 2)):
        div = 0.0
        for i in range(2):
            e = np.zeros(2)
            e[i] = eps
            div += (ham.vector_field(0.0, z + e)[i] - ham.vector_field(0.0, z - e)[i]) / (2 * eps)
        assert abs(div) < 1e-7


@pytest.mark.parametrize("ham", [harmonic_oscillator(2, 1.3), quartic_oscillator(2), cosine_potential(2),
                                 polynomial_hamiltonian({(3, 0, 1, 0): 0.5, (0, 2, 0, 2): -0.2,
                                                         (1, 1, 0, 1): 0.7}, d=2)])
def test_derivatives_match_finite_differences(ham):
    rng = np.random.default_rng(2)
    step = 1e-4
    for z in rng.uniform(-1, 1, (4, 4)):
        g = ham.gradient(0.0, z)
        H = ham.hessian(0.0, z)
        np.testing.assert_allclose(H, H.T, atol=1e-14)
        for i in range(4):
            e = np.zeros(4)
            e[i] = step
            fd = (ham.value(0.0, z + e) - ham.value(0.0, z - e)) / (2 * step)
            assert abs(fd - g[i]) <= 1e-5 * max(1.0, abs(g[i]))
            fd2 = (ham.gradient(0.0, z + e) - ham.gradient(0.0, z - e)) / (2 * step)
            np.testing.assert_allclose(fd2, H[:, i], rtol=1e-5, atol=1e-5)


def test_free_flow_is_straight_line():
    fd = flow(free_particle(), PhasePoint(0.2, 1.5), 0.0, 2.0)
    np.testing.assert_allclose(fd.endpoint.vector(), [0.2 + 3.0, 1.5], atol=1e-12)
    np.testing.assert_allclose(fd.jacobian, [[1.0, 2.0], [0.0, 1.0]], atol=1e-12)
    # S = int (xi^2 - xi^2/2) dt
    assert abs(fd.action - 0.5 * 1.5 ** 2 * 2.0) < 1e-10


def test_flow_identity_at_equal_times():
    fd = flow(quartic_oscillator(), PhasePoint(0.7, -0.3), 1.0, 1.0)
    np.testing.assert_array_equal(fd.endpoint.vector(), [0.7, -0.3])
    np.testing.assert_array_equal(fd.jacobian, np.eye(2))
    assert fd.action == 0.0


def test_harmonic_flow_full_period():
    fd = flow(harmonic_oscillator(), PhasePoint(0.8, -0.4), 0.0, 2 * np.pi)
    np.testing.assert_allclose(fd.endpoint.vector(), [0.8, -0.4], atol=1e-8)
    np.testing.assert_allclose(fd.jacobian, np.eye(2), atol=1e-8)
    assert abs(fd.action) < 1e-8


def test_flow_is_symplectic_and_conserves_energy():
    tol = 1e-10
    ham = quartic_oscillator(2)
    z0 = np.array([0.5, -0.3, 0.2, 0.9])
    fd = flow(ham, z0, 0.0, 2.0, tol)
    assert fd.symplectic_defect() <= 10 * tol
    assert abs(ham.value(0.0, fd.endpoint.vector()) - ham.value(0.0, z0)) <= 10 * tol * 2.0


def test_flow_preserves_symplectic_form():
    rng = np.random.default_rng(3)
    fd = flow(quartic_oscillator(), PhasePoint(1.0, 0.2), 0.0, 1.5)
    F = fd.jacobian
    for _ in range(5):
        z, zp = rng.normal(size=2), rng.normal(size=2)
        assert abs(symplectic_form(F @ z, F @ zp) - symplectic_form(z, zp)) < 1e-8


def test_group_law():
    ham = quartic_oscillator()
    z0 = np.array([0.6, 0.4])
    direct = flow(ham, z0, 0.0, 1.7)
    first = flow(ham, z0, 0.0, 0.6)
    second = flow(ham, first.endpoint, 0.6, 1.7)
    np.testing.assert_allclose(second.endpoint.vector(), direct.endpoint.vector(), atol=1e-9)
    np.testing.assert_allclose(second.jacobian @ first.jacobian, direct.jacobian, atol=1e-8)
    assert abs(first.action + second.action - direct.action) < 1e-9


def test_backward_flow_inverts_forward_flow():
    ham = cosine_potential()
    fwd = flow(ham, PhasePoint(0.3, 1.1), 0.0, 1.2)
    back = flow(ham, fwd.endpoint, 1.2, 0.0)
    np.testing.assert_allclose(back.endpoint.vector(), [0.3, 1.1], atol=1e-9)


def test_time_dependent_hamiltonian():
    # p = (1 + t) xi^2 / 2 gives x(t) = x0 + xi0 (t + t^2 / 2)
    ham = polynomial_hamiltonian({(0, 2): 0.5}, t_coeff=lambda t: 1.0 + t)
    fd = flow(ham, PhasePoint(0.0, 1.0), 0.0, 2.0)
    np.testing.assert_allclose(fd.endpoint.vector(), [4.0, 1.0], atol=1e-10)


def test_flow_many_output_times():
    ham = harmonic_oscillator()
    z0 = np.array([[1.0, 0.0], [0.0, 2.0]])
    ts = np.linspace(0, np.pi, 5)
    r = flow_many(ham, z0, 0.0, ts)
    assert r["z"].shape == (5, 2, 2)
    exact = np.stack([np.cos(ts), -np.sin(ts)], -1)
    np.testing.assert_allclose(r["z"][:, 0, :], exact, atol=1e-9)


def test_blow_up_raises_integration_error():
    ham = polynomial_hamiltonian({(0, 2): 0.5, (4, 0): -1.0})
    with pytest.raises(IntegrationError) as info:
        flow(ham, PhasePoint(1.0, 0.0), 0.0, 5.0)
    assert 0.0 < info.value.last_time < 5.0


def test_flow_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        flow(free_particle(), PhasePoint(0.0, 1.0), 0.0, 1.0, tol=0.0)
