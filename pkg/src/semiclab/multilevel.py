"""Two-level matrix potentials: eigenprojectors, parallel transport, adiabatic
Egorov check, Landau-Zener rates and the surface-hopping process."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .grid import GridError, GridSpec, WaveField
from .phasespace import Hamiltonian, PhasePoint, dopri_integrate
from .propagators import GridPropagator
from .quantization import operator_norm, weyl_quantize
from .symbols import MatrixSymbol, Symbol

logger = logging.getLogger(__name__)

__all__ = [
    "CrossingProximityError", "TangentialPassageError", "MatrixPotential", "EigenStructure",
    "eigen_structure", "TransportFrame", "parallel_transport", "band_hamiltonian",
    "TimeWindow", "AdiabaticTransport", "adiabatic_egorov_check", "lz_rate", "HopState",
    "HopEnsemble", "wigner_ensemble", "hopping_simulate", "hopping_observable",
    "band_vectors", "band_packet", "band_populations", "lz_grid_population", "ensemble_grid",
]

GAP_FLOOR = 1e-6
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]])
SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]])


class CrossingProximityError(ValueError):
    """The gap ``2|w(x)|`` is below the configured floor."""


class TangentialPassageError(ArithmeticError):
    """``dw(x) xi`` vanishes where a transition rate is required."""


# ---------------------------------------------------------------------------
# potential and eigenstructure


@dataclass(frozen=True)
class MatrixPotential:
    """``V(x) = [[w1, w2], [w2, -w1]]``.

    ``w`` maps ``(..., d)`` to ``(..., 2)`` and ``dw`` maps ``(..., d)`` to
    the Jacobian ``(..., 2, d)``.
    """

    w: object
    dw: object
    d: int = 2
    name: str = "custom"

    @classmethod
    def conical(cls) -> "MatrixPotential":
        """Linear conical crossing ``w(x) = x`` (``d = 2``)."""
        return cls(lambda x: np.asarray(x, dtype=float)[..., :2].copy(),
                   lambda x: np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2)).copy(),
                   2, "conical")

    @classmethod
    def rotating(cls, rho: float = 0.5, k: float = 1.0, bump: float = 0.0, width: float = 1.0
                 ) -> "MatrixPotential":
        """``d = 1`` gapped model ``w(x) = r(x) (cos kx, sin kx)`` with
        ``r(x) = rho + bump * exp(-x^2 / width^2)``; the gap is at least ``2 rho``."""

        def r(x):
            return rho + bump * np.exp(-x ** 2 / width ** 2)

        def dr(x):
            return -2 * x / width ** 2 * bump * np.exp(-x ** 2 / width ** 2)

        def w(x):
            x = np.asarray(x, dtype=float)[..., 0]
            return np.stack([r(x) * np.cos(k * x), r(x) * np.sin(k * x)], -1)

        def dw(x):
            x = np.asarray(x, dtype=float)[..., 0]
            c, s = np.cos(k * x), np.sin(k * x)
            return np.stack([dr(x) * c - k * r(x) * s, dr(x) * s + k * r(x) * c], -1)[..., None]

        return cls(w, dw, 1, "rotating")

    def values(self, x) -> np.ndarray:
        return np.asarray(self.w(np.asarray(x, dtype=float)), dtype=float)

    def matrix(self, x) -> np.ndarray:
        wv = self.values(x)
        return wv[..., 0, None, None] * SIGMA_Z + wv[..., 1, None, None] * SIGMA_X

    def eigenvalues(self, x) -> tuple[np.ndarray, np.ndarray]:
        r = np.linalg.norm(self.values(x), axis=-1)
        return r, -r

    def gap(self, x) -> np.ndarray:
        return 2 * np.linalg.norm(self.values(x), axis=-1)


@dataclass(frozen=True)
class EigenStructure:
    lam_plus: np.ndarray
    lam_minus: np.ndarray
    P_plus: np.ndarray
    P_minus: np.ndarray


def _unit(Vp: MatrixPotential, x, gap_floor: float):
    wv = Vp.values(x)
    r = np.linalg.norm(wv, axis=-1)
    if np.any(r < gap_floor):
        raise CrossingProximityError(f"|w(x)| = {float(np.min(r)):.2e} below the gap floor {gap_floor:.0e}")
    return wv / r[..., None], r


def _projector(n: np.ndarray, band: int) -> np.ndarray:
    return 0.5 * (np.eye(2) + band * (n[..., 0, None, None] * SIGMA_Z + n[..., 1, None, None] * SIGMA_X))


def eigen_structure(Vp: MatrixPotential, x, gap_floor: float = GAP_FLOOR) -> EigenStructure:
    """Eigenvalues ``+-|w|`` and projectors ``(Id +- V/|w|)/2``."""
    n, r = _unit(Vp, x, gap_floor)
    return EigenStructure(r, -r, _projector(n, 1), _projector(n, -1))


def band_vectors(Vp: MatrixPotential, x, band: int) -> np.ndarray:
    """Unit eigenvectors ``(cos(phi/2), sin(phi/2))`` (band +1) or
    ``(-sin(phi/2), cos(phi/2))`` (band -1), ``phi = arg(w1 + i w2)``;
    continuous away from ``{w2 = 0, w1 < 0}``."""
    wv = Vp.values(x)
    phi = np.arctan2(wv[..., 1], wv[..., 0])
    c, s = np.cos(phi / 2), np.sin(phi / 2)
    return np.stack([c, s], -1) if band == 1 else np.stack([-s, c], -1)


# ---------------------------------------------------------------------------
# band flows and parallel transport


def _grad_norm(Vp: MatrixPotential, x):
    """``|w|`` and its gradient ``dw^T w / |w|``."""
    wv = Vp.values(x)
    r = np.linalg.norm(wv, axis=-1)
    J = np.asarray(Vp.dw(x), dtype=float)
    g = np.einsum("...ij,...i->...j", J, wv) / np.maximum(r, 1e-300)[..., None]
    return r, g


def band_hamiltonian(Vp: MatrixPotential, band: int, fd_step: float = 1e-5) -> Hamiltonian:
    """Scalar Hamiltonian ``|xi|^2/2 + band * |w(x)|`` (hessian by central differences)."""
    d = Vp.d

    def value(t, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * np.sum(z[..., d:] ** 2, -1) + band * _grad_norm(Vp, z[..., :d])[0]

    def gradient(t, z):
        z = np.asarray(z, dtype=float)
        return np.concatenate([band * _grad_norm(Vp, z[..., :d])[1], z[..., d:]], -1)

    def hessian(t, z):
        z = np.asarray(z, dtype=float)
        H = np.zeros(z.shape[:-1] + (2 * d, 2 * d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = fd_step
            gp = _grad_norm(Vp, z[..., :d] + e)[1]
            gm = _grad_norm(Vp, z[..., :d] - e)[1]
            H[..., :d, j] = band * (gp - gm) / (2 * fd_step)
        H[..., :d, :d] = 0.5 * (H[..., :d, :d] + np.swapaxes(H[..., :d, :d], -1, -2))
        H[..., d:, d:] = np.eye(d)
        return H

    return Hamiltonian(d, value, gradient, hessian, name=f"{Vp.name}-band{band:+d}")


def _generator(Vp: MatrixPotential, x, v, band: int, gap_floor: float) -> np.ndarray:
    """``F = [v . grad Pi, Pi]`` for the band projector ``Pi``."""
    n, r = _unit(Vp, x, gap_floor)
    J = np.asarray(Vp.dw(x), dtype=float)
    dwv = np.einsum("...ij,...j->...i", J, v)
    dn = (dwv - n * np.sum(n * dwv, -1)[..., None]) / r[..., None]
    P = _projector(n, band)
    dP = 0.5 * band * (dn[..., 0, None, None] * SIGMA_Z + dn[..., 1, None, None] * SIGMA_X)
    return dP @ P - P @ dP


@dataclass
class TransportFrame:
    """Parallel-transport matrices ``R(t)`` sampled along a path."""

    times: np.ndarray
    R: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    band: int

    def orthogonality_defect(self) -> float:
        I = np.eye(2)
        return float(np.max(np.abs(np.swapaxes(self.R, -1, -2) @ self.R - I)))

    def band_defect(self, Vp: MatrixPotential) -> float:
        """``max_t ||(Id - Pi(x_t)) R(t) Pi(x_0)||``."""
        P = eigen_structure(Vp, self.x, gap_floor=0.0)
        Pb = P.P_plus if self.band == 1 else P.P_minus
        leak = (np.eye(2) - Pb) @ self.R @ Pb[0]
        return float(np.max(np.linalg.norm(leak, ord=2, axis=(-2, -1))))


def parallel_transport(Vp: MatrixPotential, path, band: int = 1, times=None,
                       gap_floor: float = GAP_FLOOR, tol: float = 1e-11) -> TransportFrame:
    """Solve ``dR/dt = F(x, xi) R``, ``R(0) = Id``.

    ``path`` is either a phase point ``(x0, xi0)`` (the band flow of
    ``|xi|^2/2 + band |w|`` is integrated jointly with ``R``) or a callable
    ``t -> (x(t), x'(t))`` describing a prescribed curve.
    """
    d = Vp.d
    times = np.asarray(times if times is not None else [0.0, 1.0], dtype=float)
    if callable(path):
        def rhs(t, y):
            x, v = path(t)
            F = _generator(Vp, np.asarray(x, float), np.asarray(v, float), band, gap_floor)
            return (F @ y.reshape(2, 2)).ravel()

        states = dopri_integrate(rhs, np.eye(2).ravel(), times[0], times[-1], tol, t_eval=times)
        R = np.array([s.reshape(2, 2) for s in states])
        pts = [path(t) for t in times]
        x = np.array([np.asarray(p[0], float) for p in pts])
        xi = np.array([np.asarray(p[1], float) for p in pts])
        return TransportFrame(times, R, x, xi, band)

    z0 = path.vector() if isinstance(path, PhasePoint) else np.asarray(path, dtype=float)

    def rhs(t, y):
        x, xi = y[:d], y[d:2 * d]
        _, g = _grad_norm(Vp, x)
        F = _generator(Vp, x, xi, band, gap_floor)
        return np.concatenate([xi, -band * g, (F @ y[2 * d:].reshape(2, 2)).ravel()])

    y0 = np.concatenate([z0, np.eye(2).ravel()])
    states = np.array(dopri_integrate(rhs, y0, times[0], times[-1], tol, t_eval=times))
    return TransportFrame(times, states[:, 2 * d:].reshape(-1, 2, 2), states[:, :d], states[:, d:2 * d], band)


# ---------------------------------------------------------------------------
# adiabatic Egorov


@dataclass(frozen=True)
class TimeWindow:
    """Normalized Gaussian weight ``theta(t)`` with centre ``t0`` and width ``tau``."""

    t0: float = 1.0
    tau: float = 0.2
    nodes: int = 16

    def quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        u, w = np.polynomial.hermite_e.hermegauss(self.nodes)
        return self.t0 + self.tau * u, w / np.sqrt(2 * np.pi)

    def fourier(self, omega: np.ndarray) -> np.ndarray:
        """``int theta(t) exp(i omega t) dt``."""
        return np.exp(1j * omega * self.t0 - 0.5 * (omega * self.tau) ** 2)


class AdiabaticTransport(Symbol):
    """``int theta(t) Pi L^t(R(-t) a R(-t)^*) Pi dt`` tabulated on a classical
    grid (``d = 1``) and interpolated per component by quintic splines.

    Uses ``R(-t, Phi^t z) = R(t, z)^T`` so that only forward band flows
    from the table nodes are needed.
    """

    def __init__(self, Vp: MatrixPotential, a: Symbol, theta: TimeWindow, q_range, p_range,
                 band: int = 1, spacing: float = 0.01, gap_floor: float = GAP_FLOOR,
                 tol: float = 1e-9, support_tol: float = 1e-14):
        if Vp.d != 1:
            raise GridError("tabulated adiabatic transport is implemented for d = 1")
        super().__init__(d=1, n_components=2, real=True, name="adiabatic-transport")
        self.Vp, self.a, self.theta, self.band = Vp, a, theta, band
        qs = np.arange(q_range[0], q_range[1] + spacing / 2, spacing)
        ps = np.arange(p_range[0], p_range[1] + spacing / 2, spacing)
        Q, P = np.meshgrid(qs, ps, indexing="ij")
        Z = np.stack([Q.ravel(), P.ravel()], -1)
        ham = band_hamiltonian(Vp, band)
        av = np.max(np.abs(a(Z[:, :1], Z[:, 1:])), axis=(-2, -1))
        live = av > support_tol * max(av.max(), 1e-300)
        E = ham.value(0.0, Z)
        keep = np.zeros(Z.shape[0], dtype=bool)
        if live.any():
            lo, hi = E[live].min(), E[live].max()
            pad = 0.02 * (hi - lo) + 1e-9
            keep = (E >= lo - pad) & (E <= hi + pad)
        ts, ws = theta.quadrature()
        order = np.argsort(ts)
        vals = np.zeros((Z.shape[0], 2, 2))
        idx = np.flatnonzero(keep)
        for c in range(0, idx.size, 4096):
            sel = idx[c:c + 4096]
            vals[sel] = self._transport(Z[sel], ts[order], ws[order], gap_floor, tol)
        self.n_flowed = int(idx.size)
        self.splines = [[RectBivariateSpline(qs, ps, vals[:, i, j].reshape(Q.shape), kx=5, ky=5)
                         for j in range(2)] for i in range(2)]

    def _transport(self, Z, ts, ws, gap_floor, tol):
        Vp, band = self.Vp, self.band
        m = Z.shape[0]

        def rhs(t, y):
            Y = y.reshape(m, 6)
            x, xi = Y[:, :1], Y[:, 1:2]
            _, g = _grad_norm(Vp, x)
            F = _generator(Vp, x, xi, band, gap_floor)
            dR = F @ Y[:, 2:].reshape(m, 2, 2)
            return np.concatenate([xi, -band * g, dR.reshape(m, 4)], 1).ravel()

        y0 = np.concatenate([Z, np.broadcast_to(np.eye(2).ravel(), (m, 4))], 1).ravel()
        fwd = ts >= 0
        out = np.zeros((m, 2, 2))
        for mask in (fwd, ~fwd):
            if not mask.any():
                continue
            tt = ts[mask] if mask is fwd else ts[mask][::-1]
            ww = ws[mask] if mask is fwd else ws[mask][::-1]
            states = dopri_integrate(rhs, y0, 0.0, tt[-1], tol, t_eval=list(tt))
            for st, w in zip(states, ww):
                Y = st.reshape(m, 6)
                R = Y[:, 2:].reshape(m, 2, 2)
                at = np.asarray(self.a(Y[:, :1], Y[:, 1:2]), dtype=float)
                out += w * (np.swapaxes(R, -1, -2) @ at @ R)
        n, _ = _unit(Vp, Z[:, :1], gap_floor)
        P = _projector(n, band)
        return P @ out @ P

    def _value(self, x, xi):
        xq = x[..., 0].ravel()
        xp = xi[..., 0].ravel()
        out = np.empty((xq.size, 2, 2))
        for i in range(2):
            for j in range(2):
                out[:, i, j] = self.splines[i][j].ev(xq, xp)
        return out.reshape(x.shape[:-1] + (2, 2))


def _two_level_hamiltonian(Vp: MatrixPotential, grid: GridSpec, h: float) -> GridPropagator:
    return GridPropagator(grid, h, Vp.matrix, method="eigen")


def adiabatic_egorov_check(Vp: MatrixPotential, a: Symbol, theta: TimeWindow, h: float,
                           grid: GridSpec, band: int = 1, transport: AdiabaticTransport | None = None,
                           gap_floor: float = GAP_FLOOR) -> float:
    """Operator norm of the time-averaged difference between the quantum
    evolution of ``Op(Pi a Pi)`` and the quantized adiabatic transport.

    The quantum side is exact in the eigenbasis of the two-component grid
    Hamiltonian, ``int theta(t) e^{i(E_j - E_k)t/h} dt`` being available in
    closed form for the Gaussian window.
    """
    if grid.d != 1 or Vp.d != 1:
        raise GridError("adiabatic check implemented for d = 1")
    pts = np.concatenate([grid.points(), grid.points() + grid.dx[0] / 2])
    _unit(Vp, pts, gap_floor)  # global gap on the grid

    def paP(x, xi):
        n, _ = _unit(Vp, x, gap_floor)
        P = _projector(n, band)
        return P @ np.asarray(a(x, xi), dtype=float) @ P

    A = weyl_quantize(MatrixSymbol(paP, 2, d=1), grid, h).matrix
    if not np.any(A):
        return 0.0
    prop = _two_level_hamiltonian(Vp, grid, h)
    w, V = prop.eigensystem()
    Ae = V.T @ A @ V
    Ae *= theta.fourier((w[:, None] - w[None, :]) / h)
    avg = V @ Ae @ V.T
    if transport is None:
        (lo, hi), = grid.box
        xm = 1.5 * grid.xi_max(h)
        pad = 0.25 * (hi - lo)
        transport = AdiabaticTransport(Vp, a, theta, (lo - pad, hi + pad), (-xm, xm), band, gap_floor=gap_floor)
    T = weyl_quantize(transport, grid, h).matrix
    return operator_norm(avg - T)


# ---------------------------------------------------------------------------
# Landau-Zener and hopping


def lz_rate(Vp: MatrixPotential, z, h: float) -> float:
    """``T = exp(-(pi/h) |w(x)|^2 / |dw(x) xi|)``."""
    zv = z.vector() if isinstance(z, PhasePoint) else np.asarray(z, dtype=float)
    d = Vp.d
    x, xi = zv[:d], zv[d:]
    wv = Vp.values(x)
    den = np.linalg.norm(np.asarray(Vp.dw(x), float) @ xi)
    if den == 0:
        raise TangentialPassageError("dw(x) xi = 0: transition rate undefined")
    return float(np.exp(-np.pi / h * float(wv @ wv) / den))


def _rates(Vp: MatrixPotential, z, h: float) -> np.ndarray:
    d = Vp.d
    x, xi = z[:, :d], z[:, d:]
    wv = Vp.values(x)
    den = np.linalg.norm(np.einsum("nij,nj->ni", np.asarray(Vp.dw(x), float), xi), axis=-1)
    if np.any(den == 0):
        raise TangentialPassageError("dw(x) xi = 0 at a hopping point")
    return np.exp(-np.pi / h * np.sum(wv * wv, -1) / den)


def _sigma(Vp: MatrixPotential, z) -> np.ndarray:
    """``w(x) . dw(x) xi``; its zero set is the hopping surface."""
    d = Vp.d
    x, xi = z[..., :d], z[..., d:]
    return np.sum(Vp.values(x) * np.einsum("...ij,...j->...i", np.asarray(Vp.dw(x), float), xi), -1)


@dataclass(frozen=True)
class HopState:
    z: PhasePoint
    band: int
    weight: float
    phase: float = 0.0

    def __post_init__(self):
        if self.band not in (1, -1):
            raise ValueError("band must be +1 or -1")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("weight must lie in [0, 1]")


@dataclass
class HopEnsemble:
    """Weighted trajectories on the extended phase space ``R^{2d} x {+1, -1}``."""

    z: np.ndarray
    band: np.ndarray
    weight: np.ndarray
    phase: np.ndarray
    branch_id: np.ndarray
    t: float = 0.0
    root: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float))
        m = self.z.shape[0]
        self.band = np.asarray(self.band, dtype=int).reshape(m)
        self.weight = np.asarray(self.weight, dtype=float).reshape(m)
        self.phase = np.asarray(self.phase, dtype=float).reshape(m)
        self.branch_id = np.asarray(self.branch_id, dtype=np.int64).reshape(m)
        self.root = np.arange(m) if self.root is None else np.asarray(self.root, dtype=np.int64).reshape(m)
        if not np.all(np.isin(self.band, (1, -1))):
            raise ValueError("bands must be +1 or -1")

    @classmethod
    def from_states(cls, states) -> "HopEnsemble":
        states = list(states)
        return cls(np.array([s.z.vector() for s in states]), [s.band for s in states],
                   [s.weight for s in states], [s.phase for s in states], np.arange(len(states)))

    @property
    def size(self) -> int:
        return self.z.shape[0]

    def total_weight(self) -> float:
        return float(np.sum(self.weight))

    def populations(self) -> dict:
        return {1: float(self.weight[self.band == 1].sum()), -1: float(self.weight[self.band == -1].sum())}

    def states(self) -> list[HopState]:
        d = self.z.shape[1] // 2
        return [HopState(PhasePoint(zz[:d], zz[d:]), int(b), float(min(1.0, w)), float(s))
                for zz, b, w, s in zip(self.z, self.band, self.weight, self.phase)]

    def to_csv(self, path) -> None:
        """Columns ``branch_id, t, x1.., xi1.., band, weight, S``."""
        d = self.z.shape[1] // 2
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["branch_id", "t"] + [f"x{j + 1}" for j in range(d)]
                        + [f"xi{j + 1}" for j in range(d)] + ["band", "weight", "S"])
            for k in range(self.size):
                wr.writerow([int(self.branch_id[k]), repr(self.t)] + [repr(float(v)) for v in self.z[k]]
                            + [int(self.band[k]), repr(float(self.weight[k])), repr(float(self.phase[k]))])


def wigner_ensemble(q, p, h: float, band: int = -1, nodes=6) -> HopEnsemble:
    """Tensor Gauss-Hermite quadrature of the Wigner density of the standard
    packet ``g^h_{(q,p)}`` (a Gaussian with variance ``h/2`` per coordinate).

    ``nodes`` is one count for all coordinates or one per coordinate in the
    order ``(q_1..q_d, p_1..p_d)``.
    """
    z0 = np.concatenate([np.atleast_1d(q), np.atleast_1d(p)]).astype(float)
    m = z0.size
    counts = [int(nodes)] * m if np.ndim(nodes) == 0 else [int(c) for c in nodes]
    if len(counts) != m:
        raise ValueError("one node count per phase-space coordinate expected")
    rules = [np.polynomial.hermite_e.hermegauss(c) for c in counts]
    mesh = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wm = np.meshgrid(*[r[1] / np.sqrt(2 * np.pi) for r in rules], indexing="ij")
    pts = z0 + np.sqrt(h / 2) * np.stack([g.ravel() for g in mesh], -1)
    wt = np.prod(np.stack([g.ravel() for g in wm], -1), axis=-1)
    wt = wt / wt.sum()
    n = pts.shape[0]
    return HopEnsemble(pts, np.full(n, band), wt, np.zeros(n), np.arange(n))


def _band_rhs(Vp: MatrixPotential, bands: np.ndarray, scale: np.ndarray):
    """Band flows in rescaled time: ``dy/ds = T_i f_i(y)``; state ``(z, S)``."""
    d = Vp.d
    m = bands.size

    def rhs(s, y):
        Y = y.reshape(m, 2 * d + 1)
        x, xi = Y[:, :d], Y[:, d:2 * d]
        r, g = _grad_norm(Vp, x)
        dxi = -bands[:, None] * g
        dS = 0.5 * np.sum(xi * xi, -1) - bands * r
        out = np.concatenate([xi, dxi, dS[:, None]], 1) * scale[:, None]
        return out.ravel()

    return rhs


def _integrate(Vp, z, S, bands, durations, samples, tol):
    """Flow every trajectory for its own duration; returns states at ``samples``
    fractions of the duration (shape ``(len(samples), m, 2d+1)``)."""
    m = z.shape[0]
    y0 = np.concatenate([z, S[:, None]], 1).ravel()
    rhs = _band_rhs(Vp, bands, durations)
    st = dopri_integrate(rhs, y0, 0.0, 1.0, tol, t_eval=list(samples))
    return np.array([s.reshape(m, -1) for s in st])


def _locate(Vp, y_left, bands, durations, s_left, s_right, sign_left, tol, iters=48):
    """Bisection for the sign change of ``sigma`` in rescaled time; returns the
    state just past the crossing and its rescaled time."""
    d = Vp.d
    a = s_left.copy()
    b = s_right.copy()
    ya = y_left.copy()
    for _ in range(iters):
        mid = 0.5 * (a + b)
        ym = _integrate(Vp, ya[:, :2 * d], ya[:, 2 * d], bands, durations * (mid - a), [1.0], tol)[0]
        sm = _sigma(Vp, ym[:, :2 * d])
        same = np.sign(sm) == sign_left
        a = np.where(same, mid, a)
        ya = np.where(same[:, None], ym, ya)
        b = np.where(same, b, mid)
    yb = _integrate(Vp, ya[:, :2 * d], ya[:, 2 * d], bands, durations * (b - a), [1.0], tol)[0]
    return yb, b


def _simulate_chunk(Vp, ens: HopEnsemble, t_final, h, seed, mode, dt_sample, max_branches, prune,
                    tol, gap_floor):
    d = Vp.d
    t0 = ens.t
    z, band, weight, S = ens.z.copy(), ens.band.copy(), ens.weight.copy(), ens.phase.copy()
    root, bid = ens.root.copy(), ens.branch_id.copy()
    start = np.full(z.shape[0], t0)
    skip_first = np.zeros(z.shape[0], dtype=bool)
    hops = np.zeros(z.shape[0], dtype=int)
    done_z, done = [], []
    next_id = int(bid.max()) + 1 if bid.size else 0
    branches = {int(r): 1 for r in np.unique(root)}
    generation = 0
    while z.shape[0]:
        dur = t_final - start
        K = max(2, int(np.ceil(np.max(np.abs(dur)) / dt_sample)))
        samples = np.linspace(0.0, 1.0, K + 1)
        Y = _integrate(Vp, z, S, band, dur, samples, tol)
        sig = _sigma(Vp, Y[:, :, :2 * d])
        sg = np.sign(sig)
        change = sg[1:] != sg[:-1]
        change &= (sg[1:] != 0) | (sg[:-1] != 0)
        change[0] &= ~skip_first
        has = change.any(axis=0)
        k = np.argmax(change, axis=0)
        # trajectories with no crossing finish
        fin = ~has
        done_z.append((Y[-1][fin], band[fin], weight[fin], root[fin], bid[fin]))
        if not has.any():
            break
        idx = np.flatnonzero(has)
        kk = k[idx]
        yl = Y[kk, idx]
        sl = samples[kk]
        sr = samples[kk + 1]
        ystar, sstar = _locate(Vp, yl, band[idx], dur[idx], sl, sr, sg[kk, idx], tol)
        zs = ystar[:, :2 * d]
        tstar = start[idx] + sstar * dur[idx]
        T = _rates(Vp, zs, h)
        w = weight[idx]
        new = {k_: [] for k_ in ("z", "S", "band", "weight", "root", "bid", "start")}

        def push(i, b, wt, branch):
            new["z"].append(zs[i])
            new["S"].append(ystar[i, 2 * d])
            new["band"].append(b)
            new["weight"].append(wt)
            new["root"].append(root[idx[i]])
            new["bid"].append(branch)
            new["start"].append(tstar[i])

        for i in range(idx.size):
            b0 = band[idx[i]]
            r = int(root[idx[i]])
            if mode == "split":
                stay, jump = w[i] * (1 - T[i]), w[i] * T[i]
                if jump < prune:
                    push(i, b0, w[i], bid[idx[i]])
                elif stay < prune:
                    push(i, -b0, w[i], bid[idx[i]])
                else:
                    branches[r] += 1
                    if branches[r] > max_branches:
                        raise RuntimeError(f"trajectory {r} exceeded {max_branches} branches; use mode='mc'")
                    push(i, b0, stay, bid[idx[i]])
                    push(i, -b0, jump, next_id)
                    next_id += 1
            else:
                rng = np.random.default_rng([seed, r, int(hops[idx[i]])])
                push(i, -b0 if rng.random() < T[i] else b0, w[i], bid[idx[i]])
        m = len(new["z"])
        z = np.array(new["z"]).reshape(m, 2 * d)
        S = np.array(new["S"], dtype=float)
        band = np.array(new["band"], dtype=int)
        weight = np.array(new["weight"], dtype=float)
        root = np.array(new["root"], dtype=np.int64)
        bid = np.array(new["bid"], dtype=np.int64)
        start = np.array(new["start"], dtype=float)
        skip_first = np.ones(m, dtype=bool)
        hops = np.zeros(m, dtype=int) + generation + 1
        generation += 1
    zz = np.concatenate([p[0] for p in done_z]) if done_z else np.zeros((0, 2 * d + 1))
    return (zz[:, :2 * d], np.concatenate([p[1] for p in done_z]), np.concatenate([p[2] for p in done_z]),
            zz[:, 2 * d], np.concatenate([p[3] for p in done_z]), np.concatenate([p[4] for p in done_z]))


def hopping_simulate(Vp: MatrixPotential, initial: HopEnsemble, t_final: float, h: float, seed: int = 0,
                     mode: str = "split", dt_sample: float = 0.01, max_branches: int = 2 ** 12,
                     prune: float = 1e-10, threads: int = 1, chunk: int = 64, tol: float = 1e-9,
                     gap_floor: float = GAP_FLOOR) -> HopEnsemble:
    """Landau-Zener surface hopping.

    Every trajectory follows the band flow of ``|xi|^2/2 + band |w(x)|``.
    Crossings of ``{w . dw xi = 0}`` are located by bisection; there the
    state either branches with weights ``(1 - T, T)`` (``mode='split'``) or
    switches band with probability ``T`` (``mode='mc'``, generator seeded by
    ``(seed, root, generation)``). Branches keep position, momentum and the
    accumulated action. Roots are processed in fixed chunks and results are
    concatenated in chunk order, so the output does not depend on
    ``threads``.
    """
    if mode not in ("split", "mc"):
        raise ValueError("mode must be 'split' or 'mc'")
    if t_final < initial.t:
        raise ValueError("t_final precedes the ensemble time")
    m = initial.size
    parts = [slice(s, min(s + chunk, m)) for s in range(0, m, chunk)]

    def work(sl):
        sub = HopEnsemble(initial.z[sl], initial.band[sl], initial.weight[sl], initial.phase[sl],
                          initial.branch_id[sl], initial.t, initial.root[sl])
        return _simulate_chunk(Vp, sub, t_final, h, seed, mode, dt_sample, max_branches, prune, tol, gap_floor)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            res = list(pool.map(work, parts))
    else:
        res = [work(p) for p in parts]
    cols = [np.concatenate([r[i] for r in res]) for i in range(6)]
    z, band, weight, S, root, bid = cols
    order = np.lexsort((bid, root))
    out = HopEnsemble(z[order], band[order], weight[order], S[order], bid[order], t_final, root[order])
    out.meta = {"mode": mode, "seed": seed, "h": h}
    return out


def hopping_observable(final: HopEnsemble, a_plus, a_minus) -> float:
    """Weighted average of ``a_band(z)``; ``a_plus``/``a_minus`` are callables
    of ``(x, xi)`` or constants."""
    d = final.z.shape[1] // 2
    x, xi = final.z[:, :d], final.z[:, d:]

    def ev(a, mask):
        if not mask.any():
            return np.zeros(0)
        if callable(a):
            return np.asarray(a(x[mask], xi[mask]), dtype=float).reshape(-1)
        return np.full(int(mask.sum()), float(a))

    plus = final.band == 1
    minus = ~plus
    return float(np.sum(final.weight[plus] * ev(a_plus, plus)) + np.sum(final.weight[minus] * ev(a_minus, minus)))


# ---------------------------------------------------------------------------
# grid oracle


def band_packet(Vp: MatrixPotential, grid: GridSpec, q, p, h: float, band: int = -1) -> WaveField:
    """Standard packet at ``(q, p)`` times the band eigenvector field (two components)."""
    x = grid.points()
    y = x - np.asarray(q, dtype=float)
    d = grid.d
    g = (np.pi * h) ** (-d / 4) * np.exp(-np.sum(y * y, -1) / (2 * h) + 1j * (y @ np.asarray(p, float)) / h)
    v = band_vectors(Vp, x, band)
    samples = np.stack([g * v[:, 0], g * v[:, 1]]).reshape((2,) + tuple(grid.n))
    return WaveField(grid, h, samples, n_components=2)


def band_populations(Vp: MatrixPotential, psi: WaveField, gap_floor: float = GAP_FLOOR) -> dict:
    """``<Pi_+- psi, psi>``; points with ``|w|`` below ``gap_floor`` split evenly."""
    x = psi.grid.points()
    wv = Vp.values(x)
    r = np.linalg.norm(wv, axis=-1)
    n = np.where((r > gap_floor)[:, None], wv / np.maximum(r, 1e-300)[:, None], 0.0)
    u = psi.samples.reshape(2, -1).T
    Pp = _projector(n, 1)
    plus = np.real(np.einsum("ni,nij,nj->", u.conj(), Pp, u)) * psi.grid.cell
    total = float(np.sum(np.abs(u) ** 2) * psi.grid.cell)
    return {1: float(plus), -1: total - float(plus)}


def lz_grid_population(Vp: MatrixPotential, psi0: WaveField, t: float, dt: float | None = None) -> dict:
    """Band populations after split-step evolution of the two-level equation."""
    U = GridPropagator(psi0.grid, psi0.h, Vp.matrix, dt=dt, method="split")
    return band_populations(Vp, U.propagate(psi0, t))


def ensemble_grid(ensembles, h: float, margin: float = 8.0, band_margin: float = 8.0) -> GridSpec:
    """Periodic grid covering the position and momentum extents of classical
    ensembles, widened by ``margin * sqrt(h/2)``.

    The spacing per axis is ``pi h / xi_max`` with ``xi_max`` the momentum
    extent; the box is then enlarged to a power-of-two sample count so the
    band is not inflated.
    """
    z = np.concatenate([e.z for e in ensembles])
    d = z.shape[1] // 2
    pad = margin * np.sqrt(h / 2)
    box, n = [], []
    for j in range(d):
        lo, hi = z[:, j].min() - pad, z[:, j].max() + pad
        xm = np.max(np.abs(z[:, d + j])) + band_margin * np.sqrt(h / 2)
        dx = np.pi * h / xm
        k = 8
        while k * dx < hi - lo:
            k *= 2
        c = 0.5 * (lo + hi)
        box.append((c - k * dx / 2, c + k * dx / 2))
        n.append(k)
    return GridSpec(tuple(box), tuple(n))
