"""Weyl and left quantization on periodic grids, with calculus diagnostics.

Operators are dense matrices acting on grid samples. The kernel of
``Op_h(a)`` is ``h^{-d} kappa((x+y)/2, (x-y)/h)``; on the grid this becomes

    K[i, j] = n^{-d} sum_k a(mid_ij, xi_k) exp(i xi_k (x_i - x_j) / h),

an inverse FFT over the momentum grid for each midpoint. The difference
``i - j`` is wrapped to ``[-n/2, n/2)`` and the midpoint is taken as
``x_j + m dx / 2`` on the half grid (not wrapped), so symbols are only
evaluated at half-grid nodes reachable from the box.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from numpy.polynomial import hermite_e
from scipy.sparse.linalg import svds

from .grid import GridError, GridSpec, WaveField, save_matrix
from .symbols import FunctionSymbol, ProductSymbol, Symbol, multi_indices, poisson_bracket

logger = logging.getLogger(__name__)

__all__ = [
    "BandLimitWarning", "EllipticityError", "SpectralBandError", "GridOperator",
    "weyl_quantize", "left_quantize", "quantize", "operator_norm", "probe_basis",
    "calculus_residual_product", "calculus_residual_commutator", "garding_min_eig",
    "fit_garding_constant", "parametrix_residual", "function_of_operator",
    "ScalarFunction", "GaussianFunction", "PlateauFunction", "helffer_sjostrand",
    "trace_formula_check", "hilbert_schmidt_check", "anti_wick", "bargmann_psido_link",
    "calderon_vaillancourt_bound", "write_spectrum_csv",
]

MAX_DIM = 2


class BandLimitWarning(UserWarning):
    """The symbol does not decay inside the momentum band of the grid."""


class EllipticityError(GridError):
    """The symbol comes too close to zero on the grid band."""

    def __init__(self, msg, point):
        super().__init__(msg)
        self.point = point


class SpectralBandError(GridError):
    """The requested spectral function reaches the edge of the resolved phase box."""


@dataclass
class GridOperator:
    """Dense operator on grid samples (component-major for matrix symbols)."""

    grid: GridSpec
    h: float
    matrix: np.ndarray
    tag: str = "weyl"
    n_components: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, f):
        if isinstance(f, WaveField):
            out = self.matrix @ f.samples.ravel()
            return f.with_samples(out.reshape(f.samples.shape))
        return self.matrix @ np.asarray(f)

    def hermitian_defect(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T)))

    def adjoint(self) -> "GridOperator":
        return GridOperator(self.grid, self.h, self.matrix.conj().T.copy(), self.tag, self.n_components)

    def __matmul__(self, other: "GridOperator") -> "GridOperator":
        return GridOperator(self.grid, self.h, self.matrix @ other.matrix, "product", self.n_components)

    def __sub__(self, other: "GridOperator") -> "GridOperator":
        return GridOperator(self.grid, self.h, self.matrix - other.matrix, self.tag, self.n_components)

    def norm(self) -> float:
        return operator_norm(self.matrix)

    def eigvalsh(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.conj().T))

    def save(self, path) -> None:
        save_matrix(path, self.matrix)


# ---------------------------------------------------------------------------
# assembly


def _as_symbol(a, d: int) -> Symbol:
    if isinstance(a, Symbol):
        if a.d != d:
            raise GridError(f"symbol dimension {a.d} does not match grid dimension {d}")
        return a
    return FunctionSymbol(a, d=d)


def _taper(xi: np.ndarray, ximax: float) -> np.ndarray:
    s = np.clip((np.abs(xi) - ximax / 2) / (ximax / 2), 0.0, 1.0)
    return np.cos(0.5 * np.pi * s) ** 2


def _axis_maps(n: int, weyl: bool):
    """Kernel table lookups ``[(row, col, weight), ...]`` per axis.

    For pairs that wrap around the box, the midpoints seen from ``(i, j)``
    and ``(j, i)`` differ by a period; the Weyl kernel averages both
    candidates, which keeps ``Op(a)`` Hermitian for real ``a``.
    """
    i = np.arange(n)
    m = ((i[:, None] - i[None, :] + n // 2) % n) - n // 2
    col = m % n
    if not weyl:
        return [(np.broadcast_to(i[:, None], (n, n)), col, np.ones((n, n)))]
    row = 2 * i[None, :] + m + n // 2
    w = np.where(row == row.T, 1.0, 0.5)
    return [(row, col, w), (row.T, col, 1.0 - w)]


def _nodes(grid: GridSpec, j: int, weyl: bool) -> np.ndarray:
    a = grid.box[j][0]
    n = grid.n[j]
    if weyl:
        return a + (np.arange(3 * n) - n // 2) * grid.dx[j] / 2
    return grid.axis(j)


def _assemble(sym: Symbol, grid: GridSpec, h: float, weyl: bool, taper: bool):
    d = grid.d
    if d > MAX_DIM:
        raise GridError(f"dense quantization supports d <= {MAX_DIM}")
    N = sym.n_components or 1
    xis = [grid.xi_axis(h, j) for j in range(d)]
    tap = None
    if taper:
        tap = np.ones([x.size for x in xis])
        for j in range(d):
            shape = [1] * d
            shape[j] = -1
            tap = tap * _taper(xis[j], grid.xi_max(h, j)).reshape(shape)
    nodes = [_nodes(grid, j, weyl) for j in range(d)]
    maps = [_axis_maps(grid.n[j], weyl) for j in range(d)]
    outer = np.zeros([x.size for x in xis], dtype=bool)
    for j in range(d):
        shape = [1] * d
        shape[j] = -1
        outer |= (np.abs(xis[j]) > grid.xi_max(h, j) / 2).reshape(shape)
    peak = 0.0
    tail = 0.0
    real = sym.real

    def table(node_block):
        """Evaluate the symbol on (node_block x xi grid) and transform over xi."""
        nonlocal peak, tail
        mesh = np.meshgrid(*node_block, *xis, indexing="ij")
        X = np.stack(mesh[:d], axis=-1)
        P = np.stack(mesh[d:], axis=-1)
        vals = np.asarray(sym(X, P))
        mag = np.abs(vals) if N == 1 else np.max(np.abs(vals), axis=(-2, -1))
        peak = max(peak, float(mag.max()))
        axes_xi = tuple(range(d, 2 * d))
        varies = np.max(np.ptp(vals, axis=axes_xi)) > 1e-14 * max(peak, 1e-300) if vals.size else False
        if outer.any() and varies:
            tail = max(tail, float(mag[..., outer].max()))
        if tap is not None:
            t = tap.reshape((1,) * d + tap.shape)
            vals = vals * (t if N == 1 else t[..., None, None])
        axes = tuple(range(d, 2 * d))
        return np.fft.ifftn(vals, axes=axes)

    size = grid.size
    dtype = complex
    if d == 1:
        T = table([nodes[0]])
        row, col, w = maps[0][0]
        K = T[row, col]
        if len(maps[0]) > 1:
            wrap = w < 1
            K[wrap] = 0.5 * (K[wrap] + T[maps[0][1][0][wrap], col[wrap]])
        if N == 1:
            mat = K
        else:
            mat = np.transpose(K, (2, 0, 3, 1)).reshape(N * size, N * size)
    else:
        n1, n2 = grid.n
        K4 = np.zeros((N, n1, n2, N, n1, n2), dtype=dtype)
        for r in range(nodes[0].size):
            hits = [(np.argwhere((row1 == r) & (w1 > 0)), col1, w1) for row1, col1, w1 in maps[0]]
            if not any(p.size for p, _, _ in hits):
                continue
            T = table([nodes[0][r:r + 1], nodes[1]])[0]  # (rows2, n1, n2[, N, N])
            for pairs, col1, w1 in hits:
                for i1, j1 in pairs:
                    blk = sum(w2[(...,) + (None,) * (T.ndim - 3)] * T[row2, col1[i1, j1], col2]
                              for row2, col2, w2 in maps[1])  # (n2, n2[, N, N])
                    if N == 1:
                        K4[0, i1, :, 0, j1, :] += w1[i1, j1] * blk
                    else:
                        K4[:, i1, :, :, j1, :] += w1[i1, j1] * np.transpose(blk, (2, 0, 3, 1))
        mat = K4.reshape(N * size, N * size)
    return mat, (tail / peak if peak else 0.0)


def quantize(a, grid: GridSpec, h: float, kind: str = "weyl", taper: bool = False,
             band_tol: float = 1e-3) -> GridOperator:
    """Quantize ``a`` on ``grid``; ``kind`` is ``'weyl'`` or ``'left'``.

    ``taper`` multiplies the symbol by a cosine taper over the top octave of
    the momentum band. ``meta['band_tail']`` is the largest symbol value in
    the top octave relative to the global maximum; a
    :class:`BandLimitWarning` is issued when it exceeds ``band_tol`` for a
    symbol of nonpositive order.
    """
    if not 0 < h <= 1:
        raise GridError("h must lie in (0, 1]")
    if kind not in ("weyl", "left"):
        raise ValueError("kind must be 'weyl' or 'left'")
    sym = _as_symbol(a, grid.d)
    mat, tail = _assemble(sym, grid, h, kind == "weyl", taper)
    if tail > band_tol and sym.class_order <= 0 and not taper:
        warnings.warn(f"symbol {sym.name} does not decay within the momentum band "
                      f"(top-octave ratio {tail:.2e})", BandLimitWarning, stacklevel=3)
    logger.debug("quantized %s: n=%s band tail %.2e", sym.name, grid.n, tail)
    return GridOperator(grid, h, mat, kind, sym.n_components or 1, {"band_tail": tail})


def weyl_quantize(a, grid: GridSpec, h: float, taper: bool = False) -> GridOperator:
    """Weyl quantization ``Op_h(a)`` as a dense grid matrix."""
    return quantize(a, grid, h, "weyl", taper)


def left_quantize(a, grid: GridSpec, h: float, taper: bool = False) -> GridOperator:
    """Left (classical) quantization ``a(x, hD)``."""
    return quantize(a, grid, h, "left", taper)


# ---------------------------------------------------------------------------
# norms and probes


def operator_norm(M: np.ndarray, basis: np.ndarray | None = None) -> float:
    """Spectral norm of ``M``, or of its compression ``V^* M V`` onto the
    orthonormal columns ``V`` of ``basis``."""
    M = np.asarray(M)
    if basis is not None:
        M = basis.conj().T @ (M @ basis)
    if not np.any(M):
        return 0.0
    if min(M.shape) <= 256:
        return float(np.linalg.norm(M, 2))
    v0 = np.random.default_rng(0).standard_normal(min(M.shape))
    return float(svds(M, k=1, v0=v0, return_singular_vectors=False)[0])


def probe_basis(grid: GridSpec, h: float, spacing: float | None = None, margin: float = 6.0) -> np.ndarray:
    """Orthonormal basis spanned by standard coherent states.

    Centres fill ``|q - c| <= L/4 - margin sqrt(h)`` and
    ``|p| <= xi_max/2 - margin sqrt(h)`` per axis, so that any two probes
    (tails included) are closer than half the box and stay clear of the
    band edge. Compressing onto this basis removes the periodic wrap of
    non-decaying symbols.
    """
    step = spacing if spacing is not None else np.sqrt(h)
    w = margin * np.sqrt(h)
    axes_q, axes_p = [], []
    for j in range(grid.d):
        a, b = grid.box[j]
        c, half = 0.5 * (a + b), 0.25 * (b - a) - w
        pm = 0.5 * grid.xi_max(h, j) - w
        if half <= 0 or pm <= 0:
            raise GridError("grid too small for interior probes at this h")
        axes_q.append(np.arange(c - half, c + half + 1e-12, step))
        axes_p.append(np.arange(-pm, pm + 1e-12, step))
    cols = []
    mesh = grid.mesh()
    for q in np.stack(np.meshgrid(*axes_q, indexing="ij"), -1).reshape(-1, grid.d):
        for p in np.stack(np.meshgrid(*axes_p, indexing="ij"), -1).reshape(-1, grid.d):
            arg = sum(-(mesh[j] - q[j]) ** 2 / (2 * h) + 1j * p[j] * (mesh[j] - q[j]) / h
                      for j in range(grid.d))
            cols.append(np.exp(arg).ravel())
    G = np.array(cols).T
    U, s, _ = np.linalg.svd(G, full_matrices=False)
    return U[:, s > 1e-3 * s[0]]


# ---------------------------------------------------------------------------
# symbolic calculus


def _ops(a, b, grid, h, kind, taper):
    A = quantize(a, grid, h, kind, taper)
    B = quantize(b, grid, h, kind, taper)
    AB = quantize(ProductSymbol(a, b), grid, h, kind, taper)
    P = quantize(poisson_bracket(a, b), grid, h, kind, taper)
    return A.matrix, B.matrix, AB.matrix, P.matrix


def calculus_residual_product(a: Symbol, b: Symbol, grid: GridSpec, h: float,
                              basis: np.ndarray | None = None, kind: str = "weyl",
                              taper: bool = False) -> float:
    """``|| Op(a) Op(b) - Op(ab) - (h/2i) Op({a,b}) ||``."""
    A, B, AB, P = _ops(a, b, grid, h, kind, taper)
    return operator_norm(A @ B - AB - (h / 2j) * P, basis)


def calculus_residual_commutator(a: Symbol, b: Symbol, grid: GridSpec, h: float,
                                 basis: np.ndarray | None = None, kind: str = "weyl",
                                 taper: bool = False) -> float:
    """``|| [Op(a), Op(b)] - (h/i) Op({a,b}) ||``."""
    A, B, _, P = _ops(a, b, grid, h, kind, taper)
    return operator_norm(A @ B - B @ A - (h / 1j) * P, basis)


def garding_min_eig(a: Symbol, grid: GridSpec, h: float) -> float:
    """Smallest eigenvalue of ``Op_h(a)`` for a real symbol."""
    sym = _as_symbol(a, grid.d)
    if not sym.real:
        raise ValueError("Garding check needs a real symbol")
    _, _, vals = _phase_samples(sym, grid, h)
    if np.iscomplexobj(vals) and np.max(np.abs(vals.imag)) > 0:
        raise ValueError("Garding check needs a real symbol")
    op = weyl_quantize(sym, grid, h)
    H = 0.5 * (op.matrix + op.matrix.conj().T)
    return float(sla.eigh(H, eigvals_only=True, subset_by_index=[0, 0])[0])


def fit_garding_constant(hs, lam_min, stability: float = 0.2) -> dict:
    """Fit ``lambda_min >= -C h``.

    ``C`` is the largest ratio ``max(0, -lambda_min / h)`` over the coarser
    half of the ladder; the fit is stable when the ratio over the whole
    ladder exceeds it by at most ``stability``.
    """
    hs = np.asarray(hs, dtype=float)
    lam = np.asarray(lam_min, dtype=float)
    order = np.argsort(hs)[::-1]
    hs, lam = hs[order], lam[order]
    ratios = np.maximum(0.0, -lam / hs)
    half = max(1, (len(hs) + 1) // 2)
    c_coarse = float(ratios[:half].max())
    c_full = float(ratios.max())
    stable = c_full <= (1 + stability) * c_coarse or c_full == 0.0
    neg = np.maximum(-lam, 0)
    mask = neg > 0
    slope = float(np.polyfit(np.log(hs[mask]), np.log(neg[mask]), 1)[0]) if mask.sum() >= 2 else np.inf
    return {"C": c_coarse, "C_full": c_full, "stable": bool(stable), "ratios": ratios,
            "negative_part_slope": slope}


def parametrix_residual(p: Symbol, grid: GridSpec, h: float, kind: str = "left",
                        floor: float = 1e-8) -> float:
    """``|| Op(1/p) Op(p) - Id ||`` for an elliptic symbol.

    Ellipticity ``|p| >= c <xi>^m`` is checked on the grid band; an
    :class:`EllipticityError` names the worst point when ``c <= floor``
    or when a real symbol changes sign between grid nodes.
    """
    sym = _as_symbol(p, grid.d)
    xis = np.meshgrid(*[grid.xi_axis(h, j) for j in range(grid.d)], indexing="ij")
    X = np.stack(np.meshgrid(*[m.ravel() for m in [grid.axis(j) for j in range(grid.d)]],
                             indexing="ij"), -1).reshape(-1, 1, grid.d)
    P = np.stack(xis, -1).reshape(1, -1, grid.d)
    raw = sym(X, P)
    vals = np.abs(raw)
    weight = (1 + np.sum(P ** 2, axis=-1)) ** (sym.class_order / 2)
    ratio = vals / weight
    k = np.unravel_index(np.argmin(ratio), ratio.shape)
    # a real symbol taking both signs vanishes somewhere between nodes
    crosses = sym.real and raw.ndim == 2 and np.any(raw.real > 0) and np.any(raw.real < 0)
    if ratio[k] <= floor or crosses:
        point = (X[k[0], 0], P[0, k[1]])
        raise EllipticityError(f"symbol not elliptic at x={point[0]}, xi={point[1]}", point)
    inv = FunctionSymbol(lambda x, xi: 1.0 / sym(x, xi), d=grid.d, class_order=-sym.class_order,
                         real=sym.real, name=f"1/{sym.name}")
    A = quantize(inv, grid, h, kind)
    B = quantize(sym, grid, h, kind)
    R = A.matrix @ B.matrix - np.eye(grid.size)
    return operator_norm(R)


# ---------------------------------------------------------------------------
# functional calculus


class ScalarFunction:
    """Real function of one variable with derivatives (numerical by default)."""

    def __init__(self, fn, derivs=None, support=None):
        self._fn = fn
        self._derivs = derivs
        self.support = support

    def __call__(self, t):
        return self._fn(np.asarray(t, dtype=float))

    def derivative(self, k: int, t):
        if k == 0:
            return self(t)
        if self._derivs is not None:
            return self._derivs(k, np.asarray(t, dtype=float))
        step = 1e-2
        coef = _central_weights(k)
        r = (len(coef) - 1) // 2
        t = np.asarray(t, dtype=float)
        return sum(c * self(t + (i - r) * step) for i, c in enumerate(coef)) / step ** k


def _central_weights(k: int) -> np.ndarray:
    r = k // 2 + 2
    offs = np.arange(-r, r + 1, dtype=float)
    V = np.vander(offs, increasing=True).T
    rhs = np.zeros(offs.size)
    rhs[k] = float(np.prod(np.arange(1, k + 1)))
    return np.linalg.solve(V, rhs)


class GaussianFunction(ScalarFunction):
    """``exp(-(t - c)^2 / (2 w^2))`` with exact derivatives."""

    def __init__(self, center: float, width: float):
        self.center, self.width = float(center), float(width)
        super().__init__(lambda t: np.exp(-0.5 * ((t - self.center) / self.width) ** 2),
                         support=(self.center - 10 * self.width, self.center + 10 * self.width))

    def derivative(self, k: int, t):
        u = (np.asarray(t, dtype=float) - self.center) / self.width
        coef = np.zeros(k + 1)
        coef[k] = 1.0
        return hermite_e.hermeval(u, coef) * np.exp(-0.5 * u ** 2) * (-1.0 / self.width) ** k


class PlateauFunction(ScalarFunction):
    """Smoothed indicator of ``[a, b]`` with C-infinity ramps of width ``ramp``."""

    def __init__(self, a: float, b: float, ramp: float):
        from .symbols import smooth_step

        self.a, self.b, self.ramp = a, b, ramp
        super().__init__(lambda t: smooth_step(-t, -a, -a + ramp) * smooth_step(t, b, b + ramp),
                         support=(a - ramp, b + ramp))


def _hermitian(A: GridOperator, tol: float = 1e-8) -> np.ndarray:
    M = A.matrix
    defect = float(np.max(np.abs(M - M.conj().T)))
    if defect > tol:
        raise ValueError(f"operator is not Hermitian (defect {defect:.2e})")
    return 0.5 * (M + M.conj().T)


def function_of_operator(A: GridOperator, F) -> GridOperator:
    """``F(A)`` by Hermitian eigendecomposition."""
    w, V = np.linalg.eigh(_hermitian(A))
    M = (V * F(w)) @ V.conj().T
    return GridOperator(A.grid, A.h, M, "function-of", A.n_components, {"eigenvalues": w})


def _step_and_slope(y, y0, y1):
    """Cutoff equal to 1 below ``y0`` and 0 above ``y1``, with its derivative."""
    s = np.clip((y - y0) / (y1 - y0), 0.0, 1.0)

    def f(u):
        safe = np.where(u > 0, u, 1.0)
        return np.where(u > 0, np.exp(-1.0 / safe), 0.0)

    def fp(u):
        safe = np.where(u > 0, u, 1.0)
        return np.where(u > 0, np.exp(-1.0 / safe) / safe ** 2, 0.0)

    a, b = f(1 - s), f(s)
    chi = a / (a + b)
    dchi = -(fp(1 - s) * b + a * fp(s)) / (a + b) ** 2 / (y1 - y0)
    return chi, dchi


def _hs_sum(Td, Te, F, order, xs, ys, wx, wy, y_cut):
    n = Td.size
    ab = np.zeros((3, n), dtype=complex)
    ab[0, 1:] = np.conj(Te)
    ab[2, :-1] = Te
    acc = np.zeros((n, n), dtype=complex)
    eye = np.eye(n)
    from math import factorial

    derivs = [F.derivative(k, xs) for k in range(order + 2)]
    for y, wyy in zip(ys, wy):
        chi, dchi = _step_and_slope(y, *y_cut)
        iy = 1j * y
        series = sum(derivs[k] * iy ** k / factorial(k) for k in range(order + 1))
        dbar = 0.5 * (chi * derivs[order + 1] * iy ** order / factorial(order) + 1j * dchi * series)
        for x, c in zip(xs, dbar * wx * wyy):
            if c == 0:
                continue
            ab[1] = Td - (x + iy)
            acc += c * sla.solve_banded((1, 1), ab, eye, check_finite=False)
    return (acc + acc.conj().T) / np.pi


def helffer_sjostrand(A: GridOperator, F: ScalarFunction, order: int = 3, nx: int = 200,
                      ny: int = 60, ymax: float = 1.0, x_range=None) -> GridOperator:
    """``F(A)`` from the almost-analytic extension
    ``F~(x+iy) = chi(y) sum_{k<=order} F^(k)(x) (iy)^k / k!`` and the
    resolvent integral ``(1/pi) int dbar F~(z) (A - z)^{-1} dx dy``.

    Resolvents are banded solves after unitary reduction to tridiagonal
    form. The quadrature is the midpoint rule in ``x`` and ``y``;
    ``meta['error_estimate']`` compares with the same rule at half the
    resolution.
    """
    if order < 2:
        raise ValueError("order must be at least 2")
    H = _hermitian(A)
    T, Q = sla.hessenberg(H, calc_q=True)
    Td = np.real(np.diag(T)).astype(complex)
    Te = np.diag(T, -1).copy()
    lo, hi = x_range if x_range is not None else (F.support or (Td.real.min() - 1, Td.real.max() + 1))

    def rule(mx, my):
        xs = lo + (np.arange(mx) + 0.5) * (hi - lo) / mx
        ys = (np.arange(my) + 0.5) * ymax / my
        return xs, ys, (hi - lo) / mx, np.full(my, ymax / my)

    xs, ys, wx, wy = rule(nx, ny)
    S = _hs_sum(Td, Te, F, order, xs, ys, wx, wy, (ymax / 2, ymax))
    xs2, ys2, wx2, wy2 = rule(max(2, nx // 2), max(2, ny // 2))
    S2 = _hs_sum(Td, Te, F, order, xs2, ys2, wx2, wy2, (ymax / 2, ymax))
    M = Q @ S @ Q.conj().T
    est = operator_norm(Q @ (S - S2) @ Q.conj().T)
    return GridOperator(A.grid, A.h, M, "function-of", A.n_components,
                        {"error_estimate": est, "nx": nx, "ny": ny, "order": order})


def _phase_samples(sym: Symbol, grid: GridSpec, h: float):
    xs = [grid.axis(j) for j in range(grid.d)]
    ps = [np.fft.fftshift(grid.xi_axis(h, j)) for j in range(grid.d)]
    mesh = np.meshgrid(*xs, *ps, indexing="ij")
    X = np.stack(mesh[:grid.d], -1)
    P = np.stack(mesh[grid.d:], -1)
    return X, P, sym(X, P)


def trace_formula_check(a: Symbol, F, grid: GridSpec, h: float, edge_tol: float = 1e-8):
    """``(Tr F(Op_h(a)), (2 pi h)^{-d} int F(a))`` with the integral summed on the grid's
    phase lattice (cell ``dx * 2 pi h / L``)."""
    sym = _as_symbol(a, grid.d)
    X, P, vals = _phase_samples(sym, grid, h)
    Fa = F(np.real(vals))
    peak = float(np.max(np.abs(Fa)))
    if peak > 0:
        edge = 0.0
        for ax in range(2 * grid.d):
            edge = max(edge, float(np.max(np.abs(np.take(Fa, [0, -1], axis=ax)))))
        if edge > edge_tol * peak:
            raise SpectralBandError(f"F(a) reaches the edge of the phase box (ratio {edge / peak:.2e})")
    rhs = float(np.sum(Fa)) / grid.size
    op = weyl_quantize(sym, grid, h)
    lam = np.linalg.eigvalsh(0.5 * (op.matrix + op.matrix.conj().T))
    lhs = float(np.sum(F(lam)))
    return lhs, rhs


def hilbert_schmidt_check(a: Symbol, grid: GridSpec, h: float):
    """``(||Op_h(a)||_HS, (2 pi h)^{-d/2} ||a||_{L^2})``."""
    sym = _as_symbol(a, grid.d)
    op = weyl_quantize(sym, grid, h)
    _, _, vals = _phase_samples(sym, grid, h)
    return float(np.linalg.norm(op.matrix)), float(np.sqrt(np.sum(np.abs(vals) ** 2) / grid.size))


# ---------------------------------------------------------------------------
# Bargmann link


def _support_box(sym: Symbol, grid: GridSpec, h: float, tol: float = 1e-10):
    X, P, vals = _phase_samples(sym, grid, h)
    mag = np.abs(vals)
    keep = mag > tol * mag.max()
    lo = [float(X[..., j][keep].min()) for j in range(grid.d)] + [float(P[..., j][keep].min()) for j in range(grid.d)]
    hi = [float(X[..., j][keep].max()) for j in range(grid.d)] + [float(P[..., j][keep].max()) for j in range(grid.d)]
    return np.array(lo), np.array(hi)


def anti_wick(a: Symbol, grid: GridSpec, h: float, spacing: float | None = None,
              margin: float = 6.0) -> GridOperator:
    """``B_h^* a B_h = (2 pi h)^{-d} int a(z) |g_z><g_z| dz`` on a tensor grid of centres
    covering the numerical support of ``a`` widened by ``margin * sqrt(h)``."""
    sym = _as_symbol(a, grid.d)
    d = grid.d
    step = spacing if spacing is not None else np.sqrt(h) / 2
    lo, hi = _support_box(sym, grid, h)
    lo -= margin * np.sqrt(h)
    hi += margin * np.sqrt(h)
    axes = [np.arange(lo[k], hi[k] + step, step) for k in range(2 * d)]
    Z = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 2 * d)
    weights = sym(Z[:, :d], Z[:, d:]) * step ** (2 * d) / (2 * np.pi * h) ** d
    mesh = grid.points()
    out = np.zeros((grid.size, grid.size), dtype=complex)
    chunk = max(1, int(2 ** 24 // grid.size))
    for s in range(0, Z.shape[0], chunk):
        z = Z[s:s + chunk]
        arg = np.zeros((grid.size, z.shape[0]), dtype=complex)
        for j in range(d):
            dxj = mesh[:, j:j + 1] - z[None, :, j]
            arg += -dxj ** 2 / (2 * h) + 1j * z[None, :, d + j] * dxj / h
        G = (np.pi * h) ** (-d / 4) * np.exp(arg)
        out += (G * weights[s:s + chunk]) @ G.conj().T * grid.cell
    return GridOperator(grid, h, out, "anti-wick", 1, {"n_centres": Z.shape[0]})


def bargmann_psido_link(a: Symbol, grid: GridSpec, h: float, spacing: float | None = None) -> float:
    """``|| Op_h(a) - B_h^* a B_h ||`` on the grid (probe basis: all grid points)."""
    W = weyl_quantize(a, grid, h)
    AW = anti_wick(a, grid, h, spacing)
    return operator_norm(W.matrix - AW.matrix)


def calderon_vaillancourt_bound(a: Symbol, grid: GridSpec, h: float, order: int | None = None,
                                samples: int = 64) -> float:
    """``sum_{|alpha| <= M} h^{|alpha|/2} sup |d^alpha a|`` with ``M = 2d + 1`` by default,
    sups taken over a subsampled phase lattice."""
    sym = _as_symbol(a, grid.d)
    d = grid.d
    M = 2 * d + 1 if order is None else order
    xs = [grid.axis(j)[:: max(1, grid.n[j] // samples)] for j in range(d)]
    ps = [np.linspace(-grid.xi_max(h, j), grid.xi_max(h, j), samples) for j in range(d)]
    mesh = np.meshgrid(*xs, *ps, indexing="ij")
    X = np.stack(mesh[:d], -1)
    P = np.stack(mesh[d:], -1)
    total = 0.0
    for alpha in multi_indices(2 * d, M):
        total += h ** (sum(alpha) / 2) * float(np.max(np.abs(sym.derivative(alpha, X, P))))
    return total


def write_spectrum_csv(path, eigenvalues) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue"])
        for i, lam in enumerate(np.asarray(eigenvalues)):
            w.writerow([i, repr(float(np.real(lam)))])
