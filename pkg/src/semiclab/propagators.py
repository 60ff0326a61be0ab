"""Grid propagator (reference solution), thawed and frozen Gaussian
integral propagators, Egorov evolution, and transport diagnostics."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.spatial import cKDTree
from scipy.stats import wasserstein_distance

from .grid import GridError, GridSpec, WaveField
from .phasespace import Hamiltonian, flow_many
from .quantization import BandLimitWarning, GridOperator, operator_norm, weyl_quantize
from .symbols import FunctionSymbol, Symbol
from .transforms import PhaseGrid, bargmann, husimi
from .wavepackets import packet_values

logger = logging.getLogger(__name__)

__all__ = [
    "TimeStepError", "BranchTrackingError", "GridPropagator", "grid_propagate",
    "FioEnsemble", "fio_samples", "thawed_fio_apply", "frozen_fio_apply",
    "TransportedSymbol", "egorov_evolve", "measure_pushforward_check", "husimi_peak",
    "eigenfunction_diagnostics",
]

CHUNK = 256


class TimeStepError(ValueError):
    """Split-step time step too large for the momentum band."""

    def __init__(self, msg, suggested_dt):
        super().__init__(msg)
        self.suggested_dt = suggested_dt


class BranchTrackingError(ArithmeticError):
    """A square-root prefactor jumped by pi/2 or more between stored times."""


# ---------------------------------------------------------------------------
# grid propagator


@dataclass
class GridPropagator:
    """``exp(-i t P / h)`` for ``P = |hD|^2 / (2 mass) + V(x)`` on a periodic grid.

    ``potential`` returns scalars (shape ``(...)``) or Hermitian matrices
    (shape ``(..., N, N)``) for multi-component fields, whose samples then
    have a leading component axis. ``method='split'`` is Strang splitting
    with step ``dt``; ``method='eigen'`` uses a dense eigendecomposition of
    the grid Hamiltonian (time-independent potentials).
    """

    grid: GridSpec
    h: float
    potential: object
    dt: float | None = None
    method: str = "split"
    mass: float = 1.0
    _eig: tuple | None = field(default=None, repr=False)

    @classmethod
    def for_hamiltonian(cls, ham: Hamiltonian, grid: GridSpec, h: float, method: str = "eigen",
                        dt: float | None = None) -> "GridPropagator":
        if ham.potential is None or ham.time_dependent:
            raise GridError("grid propagator needs a time-independent kinetic + potential Hamiltonian")
        return cls(grid, h, ham.potential, dt, method, ham.mass)

    # -- pieces -----------------------------------------------------------
    def potential_values(self) -> np.ndarray:
        v = np.asarray(self.potential(self.grid.points()))
        return v.reshape(tuple(self.grid.n) + v.shape[1:])

    def kinetic_symbol(self) -> np.ndarray:
        mesh = np.meshgrid(*[self.grid.xi_axis(self.h, j) for j in range(self.grid.d)], indexing="ij")
        return sum(m ** 2 for m in mesh) / (2 * self.mass)

    def max_stable_dt(self) -> float:
        kmax = sum(self.grid.xi_max(self.h, j) ** 2 for j in range(self.grid.d)) / (2 * self.mass)
        return 0.25 * np.pi * self.h / kmax

    def hamiltonian_matrix(self) -> np.ndarray:
        """Grid Hamiltonian; matrix potentials use the component-major layout."""
        g = self.grid
        Vv = self.potential_values()
        N = 1 if Vv.ndim == g.d else Vv.shape[-1]
        if N * g.size > 4096:
            raise GridError("dense Hamiltonian limited to 4096 unknowns")
        eye = np.eye(g.size).reshape((g.size,) + tuple(g.n))
        axes = tuple(range(1, g.d + 1))
        K = np.fft.ifftn(self.kinetic_symbol() * np.fft.fftn(eye, axes=axes), axes=axes)
        K = np.real(K.reshape(g.size, g.size)).T
        K = 0.5 * (K + K.T)
        if N == 1:
            return K + np.diag(Vv.ravel())
        Vf = Vv.reshape(g.size, N, N)
        H = np.kron(np.eye(N), K).astype(Vf.dtype)
        for i in range(N):
            for j in range(N):
                H[i * g.size:(i + 1) * g.size, j * g.size:(j + 1) * g.size] += np.diag(Vf[:, i, j])
        return H

    def eigensystem(self):
        if self._eig is None:
            self._eig = np.linalg.eigh(self.hamiltonian_matrix())
        return self._eig

    def matrix(self, t: float) -> np.ndarray:
        w, V = self.eigensystem()
        return (V * np.exp(-1j * w * t / self.h)) @ V.conj().T

    def heisenberg(self, A: np.ndarray, t: float) -> np.ndarray:
        """``U(-t) A U(t)`` computed in the eigenbasis."""
        w, V = self.eigensystem()
        Ae = V.conj().T @ A @ V
        ph = np.exp(1j * (w[:, None] - w[None, :]) * t / self.h)
        return V @ (Ae * ph) @ V.conj().T

    # -- evolution --------------------------------------------------------
    def propagate(self, psi: WaveField, t: float) -> WaveField:
        if t == 0:
            return psi
        if self.method == "eigen":
            w, V = self.eigensystem()
            c = V.conj().T @ psi.samples.ravel()
            out = V @ (np.exp(-1j * w * t / self.h) * c)
            return psi.with_samples(out.reshape(psi.samples.shape))
        if self.method != "split":
            raise ValueError("method must be 'split' or 'eigen'")
        return self._split(psi, t)

    def _split(self, psi: WaveField, t: float) -> WaveField:
        dt = self.dt if self.dt is not None else self.max_stable_dt()
        limit = self.max_stable_dt()
        if dt > limit * (1 + 1e-12):
            raise TimeStepError(f"time step {dt:.3g} exceeds the band-edge limit; use dt <= {limit:.3g}",
                                limit)
        steps = max(1, int(np.ceil(abs(t) / dt - 1e-12)))
        tau = t / steps
        d = self.grid.d
        axes = tuple(range(-d, 0))
        kin = np.exp(-1j * tau * self.kinetic_symbol() / self.h)
        Vv = self.potential_values()
        scalar = Vv.ndim == d
        if scalar:
            half = np.exp(-0.5j * tau * Vv / self.h)
        else:
            w, R = np.linalg.eigh(Vv)
            half = np.einsum("...ij,...j,...kj->...ik", R, np.exp(-0.5j * tau * w / self.h), R.conj())
            half = np.moveaxis(np.moveaxis(half, -1, 0), -1, 0)  # (N, N, *grid)

        def apply_v(u):
            if scalar:
                return half * u
            return np.einsum("ij...,j...->i...", half, u)

        u = psi.samples.astype(complex)
        for _ in range(steps):
            u = apply_v(u)
            u = np.fft.ifftn(kin * np.fft.fftn(u, axes=axes), axes=axes)
            u = apply_v(u)
        return psi.with_samples(u)


def grid_propagate(U: GridPropagator, psi0: WaveField, t: float) -> WaveField:
    """Reference solution ``U^h(t, 0) psi0``."""
    return U.propagate(psi0, t)


# ---------------------------------------------------------------------------
# Gaussian integral propagators


@dataclass
class FioEnsemble:
    """Sample points, complex quadrature weights ``B(z) dz`` and classical data."""

    points: np.ndarray
    weights: np.ndarray
    h: float
    endpoints: np.ndarray | None = None
    jacobians: np.ndarray | None = None
    actions: np.ndarray | None = None
    prefactor: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def fio_samples(psi: WaveField, zgrid: PhaseGrid | None = None, method: str = "grid",
                seed: int = 0, mass_tol: float = 1e-6) -> FioEnsemble:
    """Quadrature of the Bargmann resolution of ``psi``.

    ``method='grid'`` uses the tensor grid of centres (default covering
    grid with spacing ``sqrt(h)/2``). ``method='stratified'`` draws one
    point uniformly in every cell of that grid with a per-cell counter
    based generator, which keeps results independent of evaluation order.
    """
    zgrid = zgrid if zgrid is not None else PhaseGrid.covering(psi, mass_tol=mass_tol)
    h = psi.h
    d = psi.grid.d
    if method == "grid":
        B = bargmann(psi, zgrid, warn_tol=np.inf)
        pts = zgrid.points()
        w = B.values.ravel() * zgrid.cell()
        deficit = B.meta["mass_deficit"]
    elif method == "stratified":
        centres = zgrid.points()
        steps = np.array([a[1] - a[0] for a in zgrid.q_axes] + [a[1] - a[0] for a in zgrid.p_axes])
        jitter = np.stack([np.random.default_rng([seed, k]).uniform(-0.5, 0.5, 2 * d)
                           for k in range(centres.shape[0])])
        pts = centres + jitter * steps
        x = psi.grid.points()
        w = np.empty(pts.shape[0], dtype=complex)
        conj = np.conj(psi.samples.ravel()) * psi.grid.cell
        for s in range(0, pts.shape[0], CHUNK):
            z = pts[s:s + CHUNK]
            G = _packets(x, z[:, :d], z[:, d:], np.broadcast_to(1j * np.eye(d), (z.shape[0], d, d)), h)
            G *= np.pi ** (-d / 4)
            w[s:s + CHUNK] = np.conj(G @ conj) * (2 * np.pi * h) ** (-d / 2)
        w *= zgrid.cell()
        deficit = 1.0 - float(np.sum(np.abs(w) ** 2) / zgrid.cell()) / psi.norm() ** 2
    else:
        raise ValueError("method must be 'grid' or 'stratified'")
    return FioEnsemble(pts, w, h, meta={"mass_deficit": deficit, "method": method})


def _packets(x: np.ndarray, q: np.ndarray, p: np.ndarray, gamma: np.ndarray, h: float) -> np.ndarray:
    """Rows ``h^{-d/4} exp(i/(2h) y.G y + i p.y/h)`` for a batch of centres."""
    y = x[None, :, :] - q[:, None, :]
    quad = np.einsum("kni,kij,knj->kn", y, gamma, y)
    lin = np.einsum("kni,ki->kn", y, p)
    d = x.shape[1]
    return h ** (-d / 4) * np.exp(1j * (0.5 * quad + lin) / h)


def _continuous_sqrt(values: np.ndarray, power: float = 0.5) -> np.ndarray:
    """``values**power`` along axis 0 (time) with the branch fixed by continuity.

    Continuity is only decidable when consecutive arguments of ``values``
    differ by well under ``pi``; a jump of ``pi/2`` or more is refused.
    """
    ang = np.angle(values)
    jumps = np.abs(np.diff(ang, axis=0))
    jumps = np.minimum(jumps, 2 * np.pi - jumps)
    if jumps.size and np.max(jumps) >= np.pi / 2:
        raise BranchTrackingError("prefactor argument jumped by pi/2 or more; refine the time sampling")
    ang = np.unwrap(ang, axis=0)
    return np.abs(values) ** power * np.exp(1j * power * ang)


def _time_samples(t: float, dt_branch: float) -> np.ndarray:
    n = max(2, int(np.ceil(abs(t) / dt_branch)) + 1)
    return np.linspace(0.0, t, n)


def _flow_ensemble(ham: Hamiltonian, ens: FioEnsemble, t: float, tol: float, dt_branch: float):
    times = _time_samples(t, dt_branch)
    zs, Fs, Ss = [], [], []
    for s in range(0, ens.points.shape[0], CHUNK):
        r = flow_many(ham, ens.points[s:s + CHUNK], 0.0, times[1:], tol, jacobian=True, action=True)
        zs.append(r["z"])
        Fs.append(r["F"])
        Ss.append(r["S"])
    z = np.concatenate(zs, axis=1)
    F = np.concatenate(Fs, axis=1)
    S = np.concatenate(Ss, axis=1)
    n = ens.points.shape[0]
    m = ens.points.shape[1]
    z = np.concatenate([ens.points[None], z])
    F = np.concatenate([np.broadcast_to(np.eye(m), (1, n, m, m)), F])
    S = np.concatenate([np.zeros((1, n)), S])
    return times, z, F, S


def _superpose(grid: GridSpec, h: float, q, p, gamma, coef, threads: int = 1) -> np.ndarray:
    x = grid.points()
    chunks = [(s, min(s + CHUNK, q.shape[0])) for s in range(0, q.shape[0], CHUNK)]

    def work(bounds):
        a, b = bounds
        G = _packets(x, q[a:b], p[a:b], gamma[a:b], h)
        return coef[a:b] @ G

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    out = np.zeros(grid.size, dtype=complex)
    for part in parts:  # fixed reduction order
        out += part
    return out.reshape(grid.n)


def _apply(ham, psi0, t, quadrature, frozen, tol, dt_branch, threads, method, seed):
    ens = quadrature if isinstance(quadrature, FioEnsemble) else fio_samples(psi0, quadrature, method, seed)
    h = psi0.h
    d = psi0.grid.d
    if ens.meta.get("mass_deficit", 0.0) > 1e-3:
        logger.warning("quadrature misses %.2e of the Bargmann mass", ens.meta["mass_deficit"])
    if t == 0:
        zt = ens.points
        A = np.broadcast_to(np.eye(d), (zt.shape[0], d, d))
        Bm = np.zeros_like(A)
        Cm = np.zeros_like(A)
        Dm = A
        S = np.zeros(zt.shape[0])
        pref = np.ones(zt.shape[0], dtype=complex)
    else:
        times, z, F, S_all = _flow_ensemble(ham, ens, t, tol, dt_branch)
        A, Bm = F[..., :d, :d], F[..., :d, d:]
        Cm, Dm = F[..., d:, :d], F[..., d:, d:]
        if frozen:
            dets = np.linalg.det(A + Dm + 1j * (Cm - Bm)) / 2 ** d
            pref_t = _continuous_sqrt(dets, 0.5)
        else:
            dets = np.linalg.det(A + 1j * Bm)
            pref_t = _continuous_sqrt(dets, -0.5)
        ens.prefactor = pref_t
        zt, S = z[-1], S_all[-1]
        A, Bm, Cm, Dm = A[-1], Bm[-1], Cm[-1], Dm[-1]
        pref = pref_t[-1]
        ens.endpoints, ens.jacobians, ens.actions = zt, F[-1], S
    if frozen:
        gamma = np.broadcast_to(1j * np.eye(d), (zt.shape[0], d, d))
    else:
        M = A + 1j * Bm
        gamma = (Cm + 1j * Dm) @ np.linalg.inv(M)
        gamma = 0.5 * (gamma + np.swapaxes(gamma, -1, -2))
    coef = ens.weights * (2 * np.pi * h) ** (-d / 2) * np.pi ** (-d / 4) * pref * np.exp(1j * S / h)
    vals = _superpose(psi0.grid, h, zt[:, :d], zt[:, d:], gamma, coef, threads)
    return psi0.with_samples(vals)


def thawed_fio_apply(ham: Hamiltonian, psi0: WaveField, t: float, quadrature=None, tol: float = 1e-10,
                     dt_branch: float = 0.01, threads: int = 1, method: str = "grid",
                     seed: int = 0) -> WaveField:
    """Superpose thawed packets launched from the Bargmann resolution of ``psi0``.

    Each sample ``z`` carries ``e^{iS/h} det(A + iB)^{-1/2}`` (branch by
    continuity in time) and the covariance ``(C + iD)(A + iB)^{-1}``.
    """
    return _apply(ham, psi0, t, quadrature, False, tol, dt_branch, threads, method, seed)


def frozen_fio_apply(ham: Hamiltonian, psi0: WaveField, t: float, quadrature=None, tol: float = 1e-10,
                     dt_branch: float = 0.01, threads: int = 1, method: str = "grid",
                     seed: int = 0) -> WaveField:
    """Herman-Kluk superposition of frozen (``Gamma = i Id``) packets with
    prefactor ``k = 2^{-d/2} det^{1/2}(A + D + i(C - B))``."""
    return _apply(ham, psi0, t, quadrature, True, tol, dt_branch, threads, method, seed)


# ---------------------------------------------------------------------------
# Egorov


class TransportedSymbol(Symbol):
    """``a o Phi^{t,s}`` tabulated on a classical phase grid (``d = 1``).

    Values are interpolated by a quintic spline; points outside the table
    are flowed directly. For time-independent Hamiltonians the table only
    flows nodes whose energy lies in the range where ``a`` is numerically
    nonzero (energy is conserved, so other nodes give ``a o Phi = 0`` up to
    ``support_tol``).
    """

    def __init__(self, ham: Hamiltonian, a: Symbol, s: float, t: float, q_range, p_range,
                 spacing: float = 0.01, tol: float = 1e-10, support_tol: float = 1e-14):
        if ham.d != 1:
            raise GridError("tabulated transport is implemented for d = 1")
        super().__init__(d=1, class_order=a.class_order, real=a.real, name=f"{a.name}oPhi")
        self.ham, self.a, self.s, self.t, self.tol = ham, a, s, t, tol
        self.q_range, self.p_range = q_range, p_range
        qs = np.arange(q_range[0], q_range[1] + spacing / 2, spacing)
        ps = np.arange(p_range[0], p_range[1] + spacing / 2, spacing)
        Q, P = np.meshgrid(qs, ps, indexing="ij")
        Z = np.stack([Q.ravel(), P.ravel()], -1)
        keep = np.ones(Z.shape[0], dtype=bool)
        if not ham.time_dependent:
            av = np.abs(a(Z[:, :1], Z[:, 1:]))
            live = av > support_tol * max(av.max(), 1e-300)
            if live.any():
                E = ham.value(s, Z)
                lo, hi = E[live].min(), E[live].max()
                pad = 0.02 * (hi - lo) + 1e-9
                keep = (E >= lo - pad) & (E <= hi + pad)
        vals = np.zeros(Z.shape[0])
        idx = np.flatnonzero(keep)
        for c in range(0, idx.size, 4096):
            sel = idx[c:c + 4096]
            end = flow_many(ham, Z[sel], s, t, tol)["z"]
            vals[sel] = np.real(a(end[:, :1], end[:, 1:]))
        self.table = vals.reshape(Q.shape)
        self.spline = RectBivariateSpline(qs, ps, self.table, kx=5, ky=5)
        self.n_flowed = int(idx.size)

    def _value(self, x, xi):
        xq = x[..., 0].ravel()
        xp = xi[..., 0].ravel()
        out = self.spline.ev(xq, xp)
        outside = ((xq < self.q_range[0]) | (xq > self.q_range[1])
                   | (xp < self.p_range[0]) | (xp > self.p_range[1]))
        if outside.any():
            pts = np.stack([xq[outside], xp[outside]], -1)
            end = flow_many(self.ham, pts, self.s, self.t, self.tol)["z"]
            out[outside] = np.real(self.a(end[:, :1], end[:, 1:]))
        return out.reshape(x.shape[:-1])


def egorov_evolve(ham: Hamiltonian, a: Symbol, s: float, t: float, grid: GridSpec, h: float,
                  propagator: GridPropagator | None = None, transported: Symbol | None = None,
                  tol: float = 1e-10):
    """Compare ``U(s,t) Op(a) U(t,s)`` with ``Op(a o Phi^{t,s})``.

    Returns ``(conjugated, transported, residual)`` with the residual in
    operator norm. ``transported`` may be a precomputed
    :class:`TransportedSymbol` shared across values of ``h``.
    """
    A = weyl_quantize(a, grid, h)
    if propagator is None:
        propagator = GridPropagator.for_hamiltonian(ham, grid, h, method="eigen")
    conj = propagator.heisenberg(A.matrix, t - s) if t != s else A.matrix
    if transported is None:
        if t == s:
            transported = a
        elif grid.d == 1:
            (lo, hi), = grid.box
            xm = 1.5 * grid.xi_max(h)
            transported = TransportedSymbol(ham, a, s, t, (lo - 0.25 * (hi - lo), hi + 0.25 * (hi - lo)),
                                            (-xm, xm), tol=tol)
        else:
            def fn(x, xi):
                z = np.concatenate([x, xi], -1)
                shape = z.shape[:-1]
                end = flow_many(ham, z.reshape(-1, z.shape[-1]), s, t, tol)["z"]
                d = grid.d
                return np.real(a(end[:, :d], end[:, d:])).reshape(shape)

            transported = FunctionSymbol(fn, d=grid.d, real=a.real)
    with warnings.catch_warnings():
        # transported symbols may reach the top octave of the band by design
        warnings.simplefilter("ignore", BandLimitWarning)
        T = weyl_quantize(transported, grid, h)
    C = GridOperator(grid, h, conj, "conjugated")
    residual = operator_norm(conj - T.matrix)
    return C, T, residual


# ---------------------------------------------------------------------------
# semi-classical measures


def _cloud(field) -> tuple[np.ndarray, np.ndarray]:
    zg = field.meta["zgrid"]
    pts = zg.points()
    w = np.real(field.values).ravel()
    return pts, w


def measure_pushforward_check(ham: Hamiltonian, psi0: WaveField, t: float,
                              propagator: GridPropagator | None = None, tol: float = 1e-10) -> float:
    """Sum over phase-space coordinates of the 1-Wasserstein distance between
    the marginals of ``Husimi(psi(t))`` and the flow push-forward of
    ``Husimi(psi0)``."""
    H0 = husimi(psi0)
    pts0, w0 = _cloud(H0)
    keep = w0 > 1e-14 * w0.max()
    pts0, w0 = pts0[keep], w0[keep]
    if t == 0:
        moved, psit = pts0, psi0
    else:
        if propagator is None:
            propagator = GridPropagator.for_hamiltonian(ham, psi0.grid, psi0.h, method="eigen")
        moved = np.concatenate([flow_many(ham, pts0[s:s + 4096], 0.0, t, tol)["z"]
                                for s in range(0, pts0.shape[0], 4096)])
        psit = propagator.propagate(psi0, t)
    Ht = husimi(psit)
    ptst, wt = _cloud(Ht)
    keep = wt > 1e-14 * wt.max()
    ptst, wt = ptst[keep], wt[keep]
    total = 0.0
    for k in range(pts0.shape[1]):
        total += wasserstein_distance(moved[:, k], ptst[:, k], w0, wt)
    return float(total)


def husimi_peak(psi: WaveField, zgrid: PhaseGrid | None = None) -> np.ndarray:
    """Phase-space point of maximal Husimi density."""
    H = husimi(psi, zgrid)
    pts, w = _cloud(H)
    return pts[int(np.argmax(w))]


def _shell_points(V, E: float, grid: GridSpec, samples: int = 20001) -> np.ndarray:
    (a, b), = grid.box
    x = np.linspace(a, b, samples)
    v = np.asarray(V(x[:, None]))
    ok = v <= E
    xi = np.sqrt(np.maximum(E - v[ok], 0.0))
    xs = x[ok]
    return np.concatenate([np.stack([xs, xi], -1), np.stack([xs, -xi], -1)])


def eigenfunction_diagnostics(V, grid: GridSpec, h: float, energy: float, delta: float,
                              count: int = 1) -> dict:
    """Husimi mass of eigenfunctions of ``Op_h(xi^2 + V)`` near the energy shell.

    Takes the ``count`` eigenvalues closest to ``energy`` and reports, for
    each, the fraction of Husimi mass within distance ``delta`` of
    ``{xi^2 + V(x) = E_j}``.
    """
    if grid.d != 1:
        raise GridError("eigenfunction diagnostics implemented for d = 1")
    reliable = (0.5 * grid.xi_max(h)) ** 2 + float(np.min(V(grid.points())))
    if energy > reliable:
        raise GridError(f"target energy {energy} outside the reliable band (<= {reliable:.3g})")
    prop = GridPropagator(grid, h, V, method="eigen", mass=0.5)
    w, vecs = prop.eigensystem()
    order = np.argsort(np.abs(w - energy))[:count]
    fractions = []
    for k in order:
        psi = WaveField(grid, h, vecs[:, k] / np.sqrt(grid.cell)).normalized()
        H = husimi(psi)
        pts, mass = _cloud(H)
        shell = _shell_points(V, float(w[k]), grid)
        if shell.size == 0:
            fractions.append(0.0)
            continue
        dist, _ = cKDTree(shell).query(pts)
        fractions.append(float(mass[dist <= delta].sum() / mass.sum()))
    return {"eigenvalues": w[order].tolist(), "fractions": fractions, "delta": float(delta), "h": h}
