"""Gaussian wave packets with Siegel covariances and the thawed propagation law."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .grid import GridError, GridSpec, WaveField
from .phasespace import FlowData, Hamiltonian, PhasePoint, flow

__all__ = [
    "SiegelError", "ThawedStepError", "SiegelMatrix", "GaussianPacket",
    "render", "standard_packet", "packet_values", "thawed_step", "thawed_propagate",
    "packet_propagate",
]


class SiegelError(ValueError):
    """Matrix is not symmetric with positive-definite imaginary part."""


class ThawedStepError(ArithmeticError):
    """``A + B Gamma`` is too ill-conditioned; split the time step."""


@dataclass(frozen=True)
class SiegelMatrix:
    """Complex symmetric ``d x d`` matrix with ``Im Gamma`` positive definite."""

    gamma: np.ndarray

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.gamma, dtype=complex))
        if g.shape[0] != g.shape[1]:
            raise SiegelError("Gamma must be square")
        scale = max(1.0, float(np.max(np.abs(g))))
        if np.max(np.abs(g - g.T)) > 1e-12 * scale:
            raise SiegelError("Gamma must be symmetric")
        try:
            np.linalg.cholesky(g.imag)
        except np.linalg.LinAlgError:
            raise SiegelError("Im Gamma must be positive definite") from None
        g = 0.5 * (g + g.T)
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    @classmethod
    def identity(cls, d: int = 1) -> "SiegelMatrix":
        return cls(1j * np.eye(d))

    @property
    def d(self) -> int:
        return self.gamma.shape[0]

    def normalization(self) -> float:
        """``c_Gamma = pi^{-d/4} det^{1/4}(Im Gamma)`` via the Cholesky factor."""
        L = np.linalg.cholesky(self.gamma.imag)
        return float(np.pi ** (-self.d / 4) * np.prod(np.diag(L)) ** 0.5)

    def position_widths(self, h: float) -> np.ndarray:
        """Standard deviations of ``|g|^2`` per axis."""
        return np.sqrt(0.5 * h * np.diag(np.linalg.inv(self.gamma.imag)))

    def momentum_widths(self, h: float) -> np.ndarray:
        m = (-np.linalg.inv(self.gamma)).imag
        return np.sqrt(0.5 * h * np.diag(np.linalg.inv(m)))


@dataclass(frozen=True)
class GaussianPacket:
    """``amplitude * e^{i phase} * h^{-d/4} c_Gamma exp(i/(2h) (x-q).Gamma(x-q) + i p.(x-q)/h)``.

    The phase is kept as an unreduced real number so that phases add
    exactly along compositions.
    """

    z: PhasePoint
    gamma: SiegelMatrix
    h: float
    phase: float = 0.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.z.d != self.gamma.d:
            raise SiegelError("packet centre and covariance dimensions differ")
        if not 0 < self.h <= 1:
            raise GridError("h must lie in (0, 1]")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")

    @property
    def d(self) -> int:
        return self.z.d

    def to_dict(self) -> dict:
        return {
            "q": self.z.q.tolist(), "p": self.z.p.tolist(),
            "gamma_re": self.gamma.gamma.real.tolist(), "gamma_im": self.gamma.gamma.imag.tolist(),
            "h": self.h, "phase": self.phase, "amplitude": self.amplitude,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianPacket":
        g = np.asarray(data["gamma_re"], dtype=float) + 1j * np.asarray(data["gamma_im"], dtype=float)
        return cls(PhasePoint(data["q"], data["p"]), SiegelMatrix(g), float(data["h"]),
                   float(data.get("phase", 0.0)), float(data.get("amplitude", 1.0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GaussianPacket":
        return cls.from_dict(json.loads(text))


def standard_packet(q, p, h: float) -> GaussianPacket:
    """The coherent state ``g^h_z`` (``Gamma = i Id``)."""
    z = PhasePoint(q, p)
    return GaussianPacket(z, SiegelMatrix.identity(z.d), h)


def packet_values(points: np.ndarray, q, p, gamma: np.ndarray, h: float, prefactor=1.0) -> np.ndarray:
    """Evaluate ``prefactor * h^{-d/4} exp(i/(2h) y.Gamma y + i p.y/h)``, ``y = x - q``."""
    y = np.asarray(points, dtype=float) - np.asarray(q, dtype=float)
    quad = np.einsum("...i,ij,...j->...", y, gamma, y)
    lin = y @ np.asarray(p, dtype=float)
    d = gamma.shape[0]
    return prefactor * h ** (-d / 4) * np.exp(1j * (0.5 * quad + lin) / h)


def _check_grid(pkt: GaussianPacket, grid: GridSpec, points_per_width: float, margin: float) -> None:
    if grid.d != pkt.d:
        raise GridError("grid and packet dimensions differ")
    sx = pkt.gamma.position_widths(pkt.h) * np.sqrt(2)
    sp = pkt.gamma.momentum_widths(pkt.h) * np.sqrt(2)
    for j in range(grid.d):
        a, b = grid.box[j]
        q = pkt.z.q[j]
        if q - margin * sx[j] < a or q + margin * sx[j] > b:
            raise GridError(f"packet centre {q} too close to the box edge on axis {j}")
        if grid.dx[j] > np.sqrt(pkt.h) / points_per_width:
            raise GridError(f"grid spacing {grid.dx[j]:.3g} does not resolve sqrt(h) on axis {j}")
        if abs(pkt.z.p[j]) + margin * sp[j] > grid.xi_max(pkt.h, j):
            raise GridError(f"packet momentum exceeds the grid band on axis {j}")


def render(pkt: GaussianPacket, grid: GridSpec, points_per_width: float = 8.0,
           margin: float = 6.0, check: bool = True) -> WaveField:
    """Sample the packet on ``grid``.

    With ``check`` the grid must put ``points_per_width`` samples per
    ``sqrt(h)``, keep ``margin`` widths between the centre and the box edge,
    and contain the momentum profile inside the band.
    """
    if check:
        _check_grid(pkt, grid, points_per_width, margin)
    pref = pkt.amplitude * np.exp(1j * pkt.phase) * pkt.gamma.normalization()
    vals = packet_values(grid.points(), pkt.z.q, pkt.z.p, pkt.gamma.gamma, pkt.h, pref)
    return WaveField(grid, pkt.h, vals.reshape(grid.n))


def thawed_step(pkt: GaussianPacket, fd: FlowData, cond_max: float = 1e12) -> GaussianPacket:
    """Transport a packet along a linearised flow.

    ``Gamma -> (C + D Gamma)(A + B Gamma)^{-1}``, centre to the flow
    endpoint, and phase increased by ``S/h - arg det(A + B Gamma)/2`` with
    the principal argument (steps must not wind ``det`` around zero).
    """
    G = pkt.gamma.gamma
    M = fd.A + fd.B @ G
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > cond_max:
        raise ThawedStepError(f"A + B Gamma has condition number {cond:.3g}; split the step")
    G_new = (fd.C + fd.D @ G) @ np.linalg.inv(M)
    if np.max(np.abs(G_new - G_new.T)) > 1e-8 * max(1.0, float(np.max(np.abs(G_new)))):
        raise SiegelError("propagated covariance lost symmetry; flow is not symplectic")
    maslov = -0.5 * np.angle(np.linalg.det(M))
    return GaussianPacket(fd.endpoint, SiegelMatrix(0.5 * (G_new + G_new.T)), pkt.h,
                          pkt.phase + fd.action / pkt.h + maslov, pkt.amplitude)


def thawed_propagate(ham: Hamiltonian, pkt: GaussianPacket, s: float, t: float,
                     tol: float = 1e-10, max_arg_step: float = np.pi / 4) -> GaussianPacket:
    """Compose :func:`thawed_step` over sub-intervals, halving them until each
    step changes ``arg det(A + B Gamma)`` by less than ``max_arg_step``."""
    if t == s:
        return pkt
    out = pkt
    stack = [(s, t)]
    while stack:
        a, b = stack.pop()
        fd = flow(ham, out.z, a, b, tol)
        M = fd.A + fd.B @ out.gamma.gamma
        if abs(np.angle(np.linalg.det(M))) > max_arg_step and abs(b - a) > 1e-6:
            mid = 0.5 * (a + b)
            stack.extend([(mid, b), (a, mid)])
            continue
        out = thawed_step(out, fd)
    return out


def packet_propagate(ham: Hamiltonian, pkt: GaussianPacket, s: float, t: float,
                     grid: GridSpec | None = None, oracle=None, tol: float = 1e-10):
    """Thawed propagation of one packet, optionally scored against a grid propagator.

    Returns ``(packet, error)`` where ``error`` is the L2 distance between
    the rendered thawed packet and ``oracle`` applied to the rendered
    initial packet (``None`` without a grid).
    """
    out = thawed_propagate(ham, pkt, s, t, tol)
    if grid is None:
        return out, None
    psi0 = render(pkt, grid)
    if oracle is None:
        from .propagators import GridPropagator

        oracle = GridPropagator.for_hamiltonian(ham, grid, pkt.h, method="eigen")
    exact = oracle.propagate(psi0, t - s)
    approx = render(out, grid, check=False)
    diff = exact.with_samples(exact.samples - approx.samples)
    return out, diff.norm()
