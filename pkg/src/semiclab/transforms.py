"""Phase-space transforms of grid wave functions.

All transforms use the periodic grid and FFTs; fields handed to the
Wigner and Bargmann transforms must vanish (to ``boundary_tol``) on the
edge of the box, so that the periodic grid stands in for ``R^d``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .grid import GridError, GridSpec, PhaseSpaceField, WaveField

logger = logging.getLogger(__name__)

__all__ = [
    "AliasingError", "CoverageWarning", "PhaseGrid",
    "h_fourier", "inverse_h_fourier", "momentum_density", "spectral_momentum_mean",
    "wigner", "bargmann", "bargmann_synthesis", "husimi", "moments",
    "h_oscillation_tail", "sobolev_norm", "sobolev_ladder",
]


class AliasingError(GridError):
    """More than the allowed fraction of momentum mass sits in the top octave."""


class CoverageWarning(UserWarning):
    """The phase-space sample grid misses part of the Bargmann mass."""


def _fft_xi(grid: GridSpec, h: float) -> list[np.ndarray]:
    return [grid.xi_axis(h, j) for j in range(grid.d)]


def _top_octave_fraction(power: np.ndarray, grid: GridSpec, h: float) -> float:
    total = power.sum()
    if total == 0:
        return 0.0
    mask = np.zeros(power.shape, dtype=bool)
    for j in range(grid.d):
        xi = np.abs(grid.xi_axis(h, j))
        sel = xi > 0.5 * grid.xi_max(h, j)
        shape = [1] * grid.d
        shape[j] = -1
        mask |= sel.reshape(shape)
    return float(power[mask].sum() / total)


def h_fourier(f: WaveField, alias_tol: float | None = 0.01) -> WaveField:
    """Unitary h-Fourier transform ``(2 pi h)^{-d/2} int e^{-i x.xi/h} f(x) dx``.

    The result lives on the centred momentum grid (spacing ``2 pi h / L``).
    Raises :class:`AliasingError` when more than ``alias_tol`` of the mass
    lies in the top octave of the momentum band.
    """
    if f.representation != "position":
        raise GridError("h_fourier expects a position-space field")
    g, h = f.grid, f.h
    hat = np.fft.fftn(f.samples)
    for j in range(g.d):
        k = g.wavenumbers(j)
        a = g.box[j][0]
        shape = [1] * g.d
        shape[j] = -1
        hat = hat * np.exp(-1j * a * k).reshape(shape)
    hat *= g.cell / (2 * np.pi * h) ** (g.d / 2)
    if alias_tol is not None:
        frac = _top_octave_fraction(np.abs(hat) ** 2, g, h)
        if frac > alias_tol:
            raise AliasingError(f"{frac:.3%} of the momentum mass lies in the top octave")
    return WaveField(g.momentum_grid(h), h, np.fft.fftshift(hat), "momentum")


def inverse_h_fourier(fh: WaveField, grid: GridSpec) -> WaveField:
    """Inverse of :func:`h_fourier` back onto the position grid ``grid``."""
    if fh.representation != "momentum":
        raise GridError("inverse_h_fourier expects a momentum-space field")
    h = fh.h
    hat = np.fft.ifftshift(fh.samples) * (2 * np.pi * h) ** (grid.d / 2) / grid.cell
    for j in range(grid.d):
        k = grid.wavenumbers(j)
        shape = [1] * grid.d
        shape[j] = -1
        hat = hat * np.exp(1j * grid.box[j][0] * k).reshape(shape)
    return WaveField(grid, h, np.fft.ifftn(hat))


def momentum_density(f: WaveField) -> tuple[list[np.ndarray], np.ndarray]:
    """Momentum axes and ``|F_h f|^2`` on the centred momentum grid."""
    fh = h_fourier(f, alias_tol=None)
    return fh.grid.axes(), np.abs(fh.samples) ** 2


def spectral_momentum_mean(f: WaveField, j: int = 0) -> float:
    """``<h D_j f, f>`` computed by spectral differentiation."""
    g = f.grid
    k = g.wavenumbers(j)
    shape = [1] * g.d
    shape[j] = -1
    dpsi = np.fft.ifftn(np.fft.fftn(f.samples) * (f.h * k).reshape(shape))
    return float(np.real(np.sum(dpsi * np.conj(f.samples)) * g.cell))


# ---------------------------------------------------------------------------
# moments


@dataclass(frozen=True)
class Moments:
    mean_x: np.ndarray
    mean_xi: np.ndarray
    dev_x: np.ndarray
    dev_xi: np.ndarray

    def uncertainty_products(self) -> np.ndarray:
        return self.dev_x * self.dev_xi


def moments(f: WaveField, norm_tol: float = 1e-8) -> Moments:
    """Per-axis means and standard deviations of position and momentum."""
    if abs(f.norm() - 1.0) > norm_tol:
        raise GridError(f"field is not normalized (norm {f.norm():.12g})")
    g = f.grid
    rho = np.abs(f.samples) ** 2 * g.cell
    xi_axes, prho = momentum_density(f)
    prho = prho * f.grid.momentum_grid(f.h).cell
    mx, mxi, dx, dxi = [], [], [], []
    for j in range(g.d):
        other = tuple(i for i in range(g.d) if i != j)
        r = rho.sum(axis=other) if other else rho
        pr = prho.sum(axis=other) if other else prho
        x = g.axis(j)
        xi = xi_axes[j]
        m = np.sum(x * r)
        mp = np.sum(xi * pr)
        mx.append(m)
        mxi.append(mp)
        dx.append(np.sqrt(np.sum((x - m) ** 2 * r)))
        dxi.append(np.sqrt(np.sum((xi - mp) ** 2 * pr)))
    return Moments(np.array(mx), np.array(mxi), np.array(dx), np.array(dxi))


# ---------------------------------------------------------------------------
# Wigner transform


def _upsample2(samples: np.ndarray) -> np.ndarray:
    """Band-limited interpolation onto the half grid (factor 2 per axis)."""
    hat = np.fft.fftn(samples)
    for ax in range(samples.ndim):
        n = samples.shape[ax]
        lo = np.take(hat, np.arange(n // 2), axis=ax)
        nyq = np.take(hat, [n // 2], axis=ax) / 2
        hi = np.take(hat, np.arange(n // 2 + 1, n), axis=ax)
        pad_shape = list(hat.shape)
        pad_shape[ax] = n - 1
        zeros = np.zeros(pad_shape, dtype=complex)
        hat = np.concatenate([lo, nyq, zeros, nyq, hi], axis=ax)
    return np.fft.ifftn(hat) * 2 ** samples.ndim


def wigner(f: WaveField, xi_axes=None) -> PhaseSpaceField:
    """Wigner transform ``(2 pi)^{-d} int e^{i v.xi} f(x - hv/2) conj f(x + hv/2) dv``.

    The half shifts are read off a band-limited (factor 2) interpolation of
    ``f``, extended by zero outside the box. Without ``xi_axes`` the
    momentum axes are the natural FFT grids with spacing ``pi h / L`` and
    ``2n`` points covering the full momentum band; otherwise the given
    axes are evaluated by direct summation.

    ``meta['truncation']`` estimates the part of the shift integral cut by
    the box (the correlation left at the largest shifts).
    """
    g, h = f.grid, f.h
    d = g.d
    n = np.array(g.n)
    up = _upsample2(f.samples)
    pad = np.zeros(tuple(4 * n), dtype=complex)
    pad[tuple(slice(k, 3 * k) for k in n)] = up
    natural = xi_axes is None
    # correlation C[i_1..i_d, m_1..m_d], m_j in [-n_j, n_j)
    out_axes = []
    mats = []
    for j in range(d):
        m = np.arange(-n[j], n[j])
        if natural:
            kk = np.arange(-n[j], n[j])
            out_axes.append(np.pi * h * kk / g.lengths[j])
        else:
            xi = np.asarray(xi_axes[j], dtype=float)
            out_axes.append(xi)
            y = m * g.dx[j] / 2
            mats.append(np.exp(2j * np.outer(y, xi) / h))
    pref = (np.pi * h) ** (-d) * float(np.prod(g.dx / 2))
    values = None
    # chunk over the first axis to bound memory
    chunk = max(1, int(2 ** 22 // max(1, int(np.prod(2 * n)) * int(np.prod(n[1:])))))
    blocks = []
    trunc = 0.0
    peak = 0.0
    for start in range(0, n[0], chunk):
        i0 = np.arange(start, min(n[0], start + chunk))
        idx_m, idx_p = [], []
        for j in range(d):
            i = i0 if j == 0 else np.arange(n[j])
            m = np.arange(-n[j], n[j])
            shape_i = [1] * (2 * d)
            shape_i[j] = -1
            shape_m = [1] * (2 * d)
            shape_m[d + j] = -1
            base = (n[j] + 2 * i).reshape(shape_i)
            mm = m.reshape(shape_m)
            idx_m.append(base - mm)
            idx_p.append(base + mm)
        C = pad[tuple(idx_m)] * np.conj(pad[tuple(idx_p)])
        edge = np.zeros(C.shape[d:], dtype=bool)
        for j in range(d):
            m = np.abs(np.arange(-n[j], n[j]))
            sel = m >= int(0.9 * n[j])
            shape = [1] * d
            shape[j] = -1
            edge |= sel.reshape(shape)
        absC = np.abs(C)
        peak = max(peak, float(absC.max()))
        trunc = max(trunc, float(absC[(Ellipsis,) + tuple([edge])] .max()) if edge.any() else 0.0)
        if natural:
            axes = tuple(range(d, 2 * d))
            W = np.fft.ifftn(np.fft.ifftshift(C, axes=axes), axes=axes) * float(np.prod(2 * n))
            W = np.fft.fftshift(W, axes=axes)
        else:
            W = C
            for j in range(d):
                W = np.tensordot(W, mats[j], axes=([d], [0]))
        blocks.append(W)
    values = np.concatenate(blocks, axis=0) * pref
    # interleave axes (x_1, xi_1, x_2, xi_2, ...)
    order = []
    for j in range(d):
        order += [j, d + j]
    values = np.transpose(values, order)
    imag = float(np.max(np.abs(values.imag))) if values.size else 0.0
    meta = {"truncation": trunc / peak if peak else 0.0, "imag_max": imag}
    return PhaseSpaceField(g, tuple(out_axes), values.real.copy(), h, meta)


# ---------------------------------------------------------------------------
# Bargmann transform


@dataclass(frozen=True)
class PhaseGrid:
    """Tensor grid of packet centres ``z = (q, p)``; one (q, p) axis pair per dimension."""

    q_axes: tuple[np.ndarray, ...]
    p_axes: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "q_axes", tuple(np.asarray(a, dtype=float) for a in self.q_axes))
        object.__setattr__(self, "p_axes", tuple(np.asarray(a, dtype=float) for a in self.p_axes))

    @property
    def d(self) -> int:
        return len(self.q_axes)

    @property
    def shape(self) -> tuple[int, ...]:
        out = []
        for q, p in zip(self.q_axes, self.p_axes):
            out += [q.size, p.size]
        return tuple(out)

    def cell(self) -> float:
        c = 1.0
        for q, p in zip(self.q_axes, self.p_axes):
            c *= (q[1] - q[0]) * (p[1] - p[0])
        return c

    def points(self) -> np.ndarray:
        """Centres of shape ``(N, 2d)`` ordered ``(q_1..q_d, p_1..p_d)``, C order on ``shape``."""
        axes = []
        for q, p in zip(self.q_axes, self.p_axes):
            axes += [q, p]
        mesh = np.meshgrid(*axes, indexing="ij")
        d = self.d
        qs = [mesh[2 * j].ravel() for j in range(d)]
        ps = [mesh[2 * j + 1].ravel() for j in range(d)]
        return np.stack(qs + ps, axis=-1)

    @classmethod
    def box(cls, centre, half_width, spacing) -> "PhaseGrid":
        """Square grid around ``centre = (q_1..q_d, p_1..p_d)``."""
        centre = np.asarray(centre, dtype=float)
        d = centre.size // 2
        m = int(np.ceil(half_width / spacing))
        off = spacing * np.arange(-m, m + 1)
        return cls(tuple(centre[j] + off for j in range(d)),
                   tuple(centre[d + j] + off for j in range(d)))

    @classmethod
    def covering(cls, f: WaveField, mass_tol: float = 1e-6, inflate: float = 6.0,
                 spacing: float | None = None) -> "PhaseGrid":
        """Cover all but ``mass_tol`` of the position and momentum densities,
        widened by ``inflate * sqrt(h)`` per axis, with spacing at most ``sqrt(h)/2``."""
        h = f.h
        step = spacing if spacing is not None else np.sqrt(h) / 2
        g = f.grid
        rho = np.abs(f.samples) ** 2
        xi_axes, prho = momentum_density(f)
        qa, pa = [], []
        for j in range(g.d):
            other = tuple(i for i in range(g.d) if i != j)
            r = rho.sum(axis=other) if other else rho
            pr = prho.sum(axis=other) if other else prho
            lo, hi = _mass_interval(g.axis(j), r, mass_tol)
            plo, phi = _mass_interval(xi_axes[j], pr, mass_tol)
            w = inflate * np.sqrt(h)
            qa.append(_axis(lo - w, hi + w, step))
            pa.append(_axis(plo - w, phi + w, step))
        return cls(tuple(qa), tuple(pa))


def _mass_interval(x, density, tol):
    c = np.cumsum(density)
    c = c / c[-1]
    lo = x[min(np.searchsorted(c, tol / 2), x.size - 1)]
    hi = x[min(np.searchsorted(c, 1 - tol / 2), x.size - 1)]
    return lo, hi


def _axis(lo, hi, step):
    m = int(np.ceil((hi - lo) / step))
    mid = 0.5 * (lo + hi)
    return mid + step * (np.arange(m + 1) - m / 2)


def _packet_factors(x, q, h):
    """Gaussian envelope (nq, nx) of ``g_z`` and its normalisation."""
    return (np.pi * h) ** -0.25 * np.exp(-((x[None, :] - q[:, None]) ** 2) / (2 * h))


def bargmann(f: WaveField, zgrid: PhaseGrid | None = None, warn_tol: float = 1e-3) -> PhaseSpaceField:
    """Bargmann transform ``(2 pi h)^{-d/2} <f, g^h_z>`` on a grid of centres.

    ``meta['mass_deficit']`` is ``1 - ||B f||^2 / ||f||^2``; a
    :class:`CoverageWarning` is issued when it exceeds ``warn_tol``.
    """
    if zgrid is None:
        zgrid = PhaseGrid.covering(f)
    g, h = f.grid, f.h
    d = g.d
    if zgrid.d != d:
        raise GridError("phase grid dimension does not match the field")
    T = np.asarray(f.samples, dtype=complex)
    # contract one axis at a time; contracted (q, p) pairs are appended at the end
    for j in range(d):
        x = g.axis(j)
        q, p = zgrid.q_axes[j], zgrid.p_axes[j]
        env = _packet_factors(x, q, h) * g.dx[j]
        E = np.exp(-1j * np.outer(x, p) / h)
        phase = np.exp(1j * np.outer(q, p) / h)
        T = np.moveaxis(T, 0, -1)
        rest = T.shape[:-1]
        Tm = T.reshape(-1, x.size)
        tmp = (Tm[:, None, :] * env[None, :, :]).reshape(-1, x.size) @ E
        tmp = tmp.reshape(Tm.shape[0], q.size, p.size) * phase[None]
        T = tmp.reshape(rest + (q.size, p.size))
    T *= (2 * np.pi * h) ** (-d / 2)
    field = PhaseSpaceField(g, zgrid.p_axes, T, h)
    mass = float(np.sum(np.abs(T) ** 2) * zgrid.cell())
    deficit = 1.0 - mass / f.norm() ** 2
    field.meta.update({"mass_deficit": deficit, "zgrid": zgrid})
    if abs(deficit) > warn_tol:
        warnings.warn(f"Bargmann mass deficit {deficit:.2e}; enlarge the phase grid",
                      CoverageWarning, stacklevel=2)
    return field


def bargmann_synthesis(B: PhaseSpaceField, grid: GridSpec, zgrid: PhaseGrid | None = None) -> WaveField:
    """Superpose packets: ``(2 pi h)^{-d/2} int B(z) g^h_z dz``."""
    zgrid = zgrid if zgrid is not None else B.meta["zgrid"]
    h = B.h
    d = grid.d
    T = np.asarray(B.values, dtype=complex)
    for j in range(d):
        x = grid.axis(j)
        q, p = zgrid.q_axes[j], zgrid.p_axes[j]
        env = _packet_factors(x, q, h)
        E = np.exp(1j * np.outer(p, x) / h)
        phase = np.exp(-1j * np.outer(q, p) / h)
        # T axes: (q_j, p_j, rest...) after moving
        T = np.moveaxis(np.moveaxis(T, 0, -1), 0, -1)  # move q_j, p_j to the end
        rest = T.shape[:-2]
        Tm = T.reshape(-1, q.size, p.size) * phase[None]
        tmp = Tm.reshape(-1, p.size) @ E
        tmp = tmp.reshape(-1, q.size, x.size)
        out = np.einsum("rqx,qx->rx", tmp, env)
        T = out.reshape(rest + (x.size,))
    T *= (2 * np.pi * h) ** (-d / 2) * zgrid.cell()
    return WaveField(grid, h, T)


def husimi(f: WaveField, zgrid: PhaseGrid | None = None) -> PhaseSpaceField:
    """Husimi density ``|B_h f|^2`` (nonnegative, total mass ``||f||^2``)."""
    B = bargmann(f, zgrid, warn_tol=np.inf)
    return PhaseSpaceField(B.x_grid, B.xi_axes, np.abs(B.values) ** 2, B.h, dict(B.meta))


# ---------------------------------------------------------------------------
# oscillation and Sobolev diagnostics


def h_oscillation_tail(f: WaveField, R: float) -> float:
    """Momentum mass ``int_{|xi| >= R} |F_h f|^2 dxi`` (``xi`` the h-momentum)."""
    fh = h_fourier(f, alias_tol=None)
    mesh = fh.grid.mesh()
    r = np.sqrt(sum(m ** 2 for m in mesh))
    power = np.abs(fh.samples) ** 2 * fh.grid.cell
    return float(power[r >= R].sum())


def sobolev_ladder(s: float) -> list[float]:
    """Exponents ``0, 1, ..., floor(s), s`` used for the sup in the Sobolev norm."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    ladder = [float(k) for k in range(int(np.floor(s)) + 1)]
    if s not in ladder:
        ladder.append(float(s))
    return ladder


def sobolev_norm(f: WaveField, s: float) -> float:
    """Semi-classical Sobolev norm ``sup_l ||<hD>^l f||`` over :func:`sobolev_ladder`."""
    fh = h_fourier(f, alias_tol=None)
    mesh = fh.grid.mesh()
    weight = 1.0 + sum(m ** 2 for m in mesh)
    power = np.abs(fh.samples) ** 2 * fh.grid.cell
    return max(float(np.sqrt(np.sum(weight ** l * power))) for l in sobolev_ladder(s))
