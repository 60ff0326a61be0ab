"""Classical side: Hamiltonians, flows with Jacobian blocks and actions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "IntegrationError", "PhasePoint", "Hamiltonian", "FlowData",
    "symplectic_matrix", "symplectic_form", "hamiltonian_vector_field",
    "flow", "flow_many", "dopri_integrate",
    "free_particle", "harmonic_oscillator", "quartic_oscillator",
    "cosine_potential", "polynomial_hamiltonian", "potential_hamiltonian",
]


class IntegrationError(RuntimeError):
    """Adaptive step size underflow; ``last_time`` is the last accepted time."""

    def __init__(self, message, last_time):
        super().__init__(f"{message} (last valid time {last_time!r})")
        self.last_time = last_time


@dataclass(frozen=True)
class PhasePoint:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float)).copy()
        p = np.atleast_1d(np.asarray(self.p, dtype=float)).copy()
        if q.shape != p.shape or q.ndim != 1:
            raise ValueError("q and p must be vectors of equal length")
        q.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @classmethod
    def from_vector(cls, z) -> "PhasePoint":
        z = np.asarray(z, dtype=float)
        d = z.size // 2
        return cls(z[:d], z[d:])

    @property
    def d(self) -> int:
        return self.q.size

    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])


def symplectic_matrix(d: int) -> np.ndarray:
    """``J = [[0, Id], [-Id, 0]]``."""
    J = np.zeros((2 * d, 2 * d))
    J[:d, d:] = np.eye(d)
    J[d:, :d] = -np.eye(d)
    return J


def symplectic_form(z, zp) -> float:
    """``omega(z, z') = J z . z'``."""
    z = z.vector() if isinstance(z, PhasePoint) else np.asarray(z, dtype=float)
    zp = zp.vector() if isinstance(zp, PhasePoint) else np.asarray(zp, dtype=float)
    if z.shape != zp.shape or z.size % 2:
        raise ValueError("phase points of mismatched dimension")
    return float(symplectic_matrix(z.size // 2) @ z @ zp)


@dataclass(frozen=True)
class Hamiltonian:
    """Smooth real function on ``R x R^{2d}`` with hand-coded derivatives.

    ``value``, ``gradient`` and ``hessian`` take ``(t, z)`` with ``z`` of
    shape ``(..., 2d)`` and return arrays of shape ``(...)``, ``(..., 2d)``
    and ``(..., 2d, 2d)``.
    """

    d: int
    value: Callable
    gradient: Callable
    hessian: Callable
    name: str = "custom"
    time_dependent: bool = False
    # sup-norm bounds C_N on derivatives of order N >= 2; metadata only
    subquadratic_bound: dict = field(default_factory=dict)
    potential: Callable | None = None
    mass: float = 1.0

    def vector_field(self, t, z):
        g = self.gradient(t, z)
        d = self.d
        return np.concatenate([g[..., d:], -g[..., :d]], axis=-1)


def hamiltonian_vector_field(ham: Hamiltonian, t: float, z) -> np.ndarray:
    z = z.vector() if isinstance(z, PhasePoint) else np.asarray(z, dtype=float)
    return ham.vector_field(t, z)


# ---------------------------------------------------------------------------
# built-in families


def potential_hamiltonian(d, V, dV, d2V, name="potential", mass=1.0, **meta) -> Hamiltonian:
    """``|xi|^2 / (2 mass) + V(x)`` from a potential and its derivatives.

    ``V(x)`` maps ``(..., d)`` to ``(...)``, ``dV`` to ``(..., d)`` and
    ``d2V`` to ``(..., d, d)``.
    """

    def value(t, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * np.sum(z[..., d:] ** 2, axis=-1) / mass + V(z[..., :d])

    def gradient(t, z):
        z = np.asarray(z, dtype=float)
        return np.concatenate([dV(z[..., :d]), z[..., d:] / mass], axis=-1)

    def hessian(t, z):
        z = np.asarray(z, dtype=float)
        H = np.zeros(z.shape[:-1] + (2 * d, 2 * d))
        H[..., :d, :d] = d2V(z[..., :d])
        H[..., d:, d:] = np.eye(d) / mass
        return H

    return Hamiltonian(d, value, gradient, hessian, name=name, potential=V, mass=mass, **meta)


def free_particle(d: int = 1) -> Hamiltonian:
    return potential_hamiltonian(
        d,
        lambda x: np.zeros(x.shape[:-1]),
        lambda x: np.zeros_like(x),
        lambda x: np.zeros(x.shape + (x.shape[-1],)),
        name="free",
        subquadratic_bound={2: 1.0},
    )


def harmonic_oscillator(d: int = 1, omega: float = 1.0) -> Hamiltonian:
    """``(|xi|^2 + omega^2 |x|^2) / 2``."""
    w2 = omega * omega
    return potential_hamiltonian(
        d,
        lambda x: 0.5 * w2 * np.sum(x * x, axis=-1),
        lambda x: w2 * x,
        lambda x: w2 * np.broadcast_to(np.eye(x.shape[-1]), x.shape + (x.shape[-1],)).copy(),
        name="harmonic",
        subquadratic_bound={2: max(1.0, w2)},
    )


def quartic_oscillator(d: int = 1) -> Hamiltonian:
    """``|xi|^2/2 + sum_j (x_j^4/4 + x_j^2/2)``."""

    def d2V(x):
        return (3 * x * x + 1)[..., :, None] * np.eye(x.shape[-1])

    return potential_hamiltonian(
        d,
        lambda x: np.sum(x ** 4 / 4 + x ** 2 / 2, axis=-1),
        lambda x: x ** 3 + x,
        d2V,
        name="quartic",
    )


def cosine_potential(d: int = 1, strength: float = 1.0, period: float = 2 * np.pi) -> Hamiltonian:
    """``|xi|^2/2 + strength * sum_j (1 - cos(k x_j))`` with ``k = 2 pi / period``."""
    k = 2 * np.pi / period

    def d2V(x):
        return (strength * k * k * np.cos(k * x))[..., :, None] * np.eye(x.shape[-1])

    return potential_hamiltonian(
        d,
        lambda x: strength * np.sum(1 - np.cos(k * x), axis=-1),
        lambda x: strength * k * np.sin(k * x),
        d2V,
        name="cosine",
        subquadratic_bound={2: max(1.0, strength * k * k)},
    )


def polynomial_hamiltonian(coeffs: dict, d: int = 1, t_coeff: Callable | None = None) -> Hamiltonian:
    """Polynomial ``sum_c c * z^alpha`` over multi-indices ``alpha`` in ``N^{2d}``.

    ``coeffs`` maps exponent tuples of length ``2d`` to real coefficients.
    ``t_coeff``, if given, multiplies the whole polynomial by ``t_coeff(t)``.
    """
    terms = [(np.array(k, dtype=int), float(c)) for k, c in coeffs.items()]
    for k, _ in terms:
        if k.size != 2 * d:
            raise ValueError("exponent tuples must have length 2d")
    scale = t_coeff if t_coeff is not None else (lambda t: 1.0)

    def mono(z, k):
        return np.prod(z ** k, axis=-1)

    def dmono(z, k, i):
        if k[i] == 0:
            return np.zeros(z.shape[:-1])
        k2 = k.copy()
        k2[i] -= 1
        return k[i] * mono(z, k2)

    def d2mono(z, k, i, j):
        if k[i] == 0:
            return np.zeros(z.shape[:-1])
        k2 = k.copy()
        k2[i] -= 1
        c = k[i]
        if k2[j] == 0:
            return np.zeros(z.shape[:-1])
        c *= k2[j]
        k2[j] -= 1
        return c * mono(z, k2)

    def value(t, z):
        z = np.asarray(z, dtype=float)
        return scale(t) * sum(c * mono(z, k) for k, c in terms)

    def gradient(t, z):
        z = np.asarray(z, dtype=float)
        g = np.zeros(z.shape)
        for k, c in terms:
            for i in range(2 * d):
                g[..., i] += c * dmono(z, k, i)
        return scale(t) * g

    def hessian(t, z):
        z = np.asarray(z, dtype=float)
        H = np.zeros(z.shape + (2 * d,))
        for k, c in terms:
            for i in range(2 * d):
                for j in range(2 * d):
                    H[..., i, j] += c * d2mono(z, k, i, j)
        return scale(t) * H

    return Hamiltonian(d, value, gradient, hessian, name="polynomial",
                       time_dependent=t_coeff is not None)


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_B4 = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def _dopri_step(rhs, t, y, dt):
    k = [rhs(t, y)]
    for i in range(1, 7):
        yi = y + dt * sum(a * ki for a, ki in zip(_A[i], k) if a != 0)
        k.append(rhs(t + _C[i] * dt, yi))
    y5 = y + dt * sum(b * ki for b, ki in zip(_B5, k) if b != 0)
    err = dt * sum(e * ki for e, ki in zip(_B5 - _B4, k) if e != 0)
    return y5, err


def dopri_integrate(rhs, y0, t0, t1, tol, t_eval=None, dt0=None, callback=None):
    """Integrate ``y' = rhs(t, y)`` with error per unit time below ``tol``.

    The error test uses the max norm over the whole state array, so a batch
    of trajectories shares one step sequence. ``t_eval`` are output times
    (monotone in the direction of integration); the integrator lands on
    each of them exactly. ``callback(t_old, y_old, t_new, y_new)`` is called
    after every accepted step.
    Returns the list of states at ``t_eval`` (or the final state).
    """
    y = np.array(y0, dtype=float)
    t = float(t0)
    if t1 == t0:
        return [y.copy() for _ in t_eval] if t_eval is not None else y
    direction = 1.0 if t1 > t0 else -1.0
    stops = list(t_eval) if t_eval is not None else [t1]
    out = []
    span = abs(t1 - t0)
    dt = direction * (dt0 if dt0 else min(0.05, span))
    while stops and direction * (stops[0] - t) <= 0:
        out.append(y.copy())
        stops.pop(0)
    while stops:
        target = stops[0]
        if direction * (t + dt - target) > 0:
            dt = target - t
        y_new, err = _dopri_step(rhs, t, y, dt)
        scale = 1.0 + np.abs(y)
        e = np.max(np.abs(err) / scale) if err.size else 0.0
        allowed = tol * abs(dt)
        if e <= allowed:
            if not np.all(np.isfinite(y_new)):
                raise IntegrationError("non-finite state", t)
            t_old, y_old = t, y
            t = target if abs(t + dt - target) <= 1e-14 * max(1.0, abs(target)) else t + dt
            y = y_new
            if callback is not None:
                y = callback(t_old, y_old, t, y)
            while stops and direction * (stops[0] - t) <= 1e-14 * max(1.0, abs(t)):
                out.append(y.copy())
                stops.pop(0)
            fac = 5.0 if e == 0 else min(5.0, 0.9 * (allowed / e) ** 0.25)
            dt = direction * abs(dt) * fac
        else:
            fac = 0.9 * (allowed / e) ** 0.25 if np.isfinite(e) else 0.1
            dt = dt * max(0.1, fac)
        if abs(dt) < 1e-13 * max(1.0, abs(t)):
            raise IntegrationError("step size underflow", t)
    return out if t_eval is not None else out[-1]


# ---------------------------------------------------------------------------
# flows


@dataclass(frozen=True)
class FlowData:
    """Endpoint, Jacobian blocks and action of ``Phi^{t,s}`` at one point."""

    endpoint: PhasePoint
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    action: float
    times: tuple[float, float]

    @property
    def jacobian(self) -> np.ndarray:
        return np.block([[self.A, self.B], [self.C, self.D]])

    def symplectic_defect(self) -> float:
        F = self.jacobian
        J = symplectic_matrix(self.A.shape[0])
        return float(np.max(np.abs(F.T @ J @ F - J)))


def _extended_rhs(ham: Hamiltonian, n_pts: int, jacobian: bool, action: bool):
    d = ham.d
    m = 2 * d
    J = symplectic_matrix(d)

    def rhs(t, y):
        Y = y.reshape(n_pts, -1)
        z = Y[:, :m]
        g = ham.gradient(t, z)
        dz = np.concatenate([g[:, d:], -g[:, :d]], axis=1)
        parts = [dz]
        off = m
        if jacobian:
            F = Y[:, off:off + m * m].reshape(n_pts, m, m)
            H = ham.hessian(t, z)
            dF = np.einsum("ij,njk,nkl->nil", J, H, F)
            parts.append(dF.reshape(n_pts, -1))
            off += m * m
        if action:
            # xi . dx/dt - p
            dS = np.sum(z[:, d:] * g[:, d:], axis=1) - ham.value(t, z)
            parts.append(dS[:, None])
        return np.concatenate(parts, axis=1).ravel()

    return rhs


def flow_many(ham: Hamiltonian, z0, s: float, t, tol: float = 1e-10,
              jacobian: bool = False, action: bool = False):
    """Flow a batch of points ``z0`` of shape ``(N, 2d)`` from ``s`` to ``t``.

    ``t`` may be a scalar or a monotone sequence of output times. Returns a
    dict with ``z`` (shape ``(len(t), N, 2d)`` or ``(N, 2d)``) and, on
    request, ``F`` and ``S``.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    n_pts, m = z0.shape
    if m != 2 * ham.d:
        raise ValueError("points do not match the Hamiltonian dimension")
    parts = [z0]
    if jacobian:
        parts.append(np.broadcast_to(np.eye(m).ravel(), (n_pts, m * m)))
    if action:
        parts.append(np.zeros((n_pts, 1)))
    y0 = np.concatenate(parts, axis=1).ravel()
    rhs = _extended_rhs(ham, n_pts, jacobian, action)
    scalar_t = np.ndim(t) == 0
    times = [float(t)] if scalar_t else [float(x) for x in t]
    t_end = times[-1] if abs(times[-1] - s) >= abs(times[0] - s) else times[0]
    states = dopri_integrate(rhs, y0, s, t_end, tol, t_eval=times)
    Y = np.stack([st.reshape(n_pts, -1) for st in states])
    res = {"z": Y[:, :, :m]}
    off = m
    if jacobian:
        res["F"] = Y[:, :, off:off + m * m].reshape(len(times), n_pts, m, m)
        off += m * m
    if action:
        res["S"] = Y[:, :, off]
    if scalar_t:
        res = {k: v[0] for k, v in res.items()}
    return res


def flow(ham: Hamiltonian, z0, s: float, t: float, tol: float = 1e-10) -> FlowData:
    """Endpoint, Jacobian blocks and action of the flow from ``s`` to ``t``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    z0v = z0.vector() if isinstance(z0, PhasePoint) else np.asarray(z0, dtype=float)
    d = ham.d
    r = flow_many(ham, z0v[None, :], s, t, tol, jacobian=True, action=True)
    F = r["F"][0]
    return FlowData(
        PhasePoint.from_vector(r["z"][0]),
        F[:d, :d].copy(), F[:d, d:].copy(), F[d:, :d].copy(), F[d:, d:].copy(),
        float(r["S"][0]), (float(s), float(t)),
    )
