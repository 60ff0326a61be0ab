"""Phase-space symbols with evaluable derivatives.

A symbol takes position and momentum arrays of shape ``(..., d)`` and
returns values of shape ``(...)`` (scalar symbols) or ``(..., N, N)``
(matrix symbols). Derivatives are indexed by a multi-index of length
``2d`` ordered ``(x_1..x_d, xi_1..xi_d)``.
"""

from __future__ import annotations

import itertools
from math import comb, factorial

import numpy as np
from numpy.polynomial import hermite_e

__all__ = [
    "Symbol", "FunctionSymbol", "GaussianBump", "PolynomialSymbol",
    "SumSymbol", "ProductSymbol", "ScaledSymbol", "MatrixSymbol",
    "poisson_bracket", "constant", "smooth_step", "multi_indices",
]


def multi_indices(dim: int, order: int):
    """All multi-indices of length ``dim`` with total order ``<= order``."""
    for tot in range(order + 1):
        for c in itertools.product(range(tot + 1), repeat=dim):
            if sum(c) == tot:
                yield c


def _split(z):
    z = np.asarray(z, dtype=float)
    d = z.shape[-1] // 2
    return z[..., :d], z[..., d:]


class Symbol:
    """Base class. Subclasses implement :meth:`_value` and optionally :meth:`_derivative`.

    Parameters
    ----------
    d : int
        Configuration-space dimension.
    class_order : int
        Order ``m`` of the symbol class ``S^m`` (metadata).
    n_components : int or None
        ``N`` for matrix symbols, ``None`` for scalar ones.
    real : bool
        Whether the values are real (scalar) or Hermitian (matrix).
    """

    fd_step = 2e-3

    def __init__(self, d: int = 1, class_order: int = 0, n_components: int | None = None,
                 real: bool = True, name: str = ""):
        self.d = int(d)
        self.class_order = int(class_order)
        self.n_components = n_components
        self.real = bool(real)
        self.name = name or type(self).__name__

    # -- evaluation -----------------------------------------------------
    def __call__(self, x, xi):
        x, xi = self._coerce(x, xi)
        out = np.asarray(self._value(x, xi))
        return self._check_shape(out, x.shape[:-1])

    value = __call__

    def derivative(self, alpha, x, xi):
        alpha = tuple(int(a) for a in alpha)
        if len(alpha) != 2 * self.d or min(alpha) < 0:
            raise ValueError(f"multi-index must have {2 * self.d} nonnegative entries")
        x, xi = self._coerce(x, xi)
        if sum(alpha) == 0:
            return self(x, xi)
        out = self._derivative(alpha, x, xi)
        if out is NotImplemented:
            out = self._fd_derivative(alpha, x, xi)
        return self._check_shape(np.asarray(out), x.shape[:-1])

    def _value(self, x, xi):
        raise NotImplementedError

    def _derivative(self, alpha, x, xi):
        return NotImplemented

    def _coerce(self, x, xi):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        if self.d == 1 and (xi.ndim == 0 or xi.shape[-1] != 1):
            xi = xi[..., None]
        x, xi = np.broadcast_arrays(x, xi)
        if x.shape[-1] != self.d:
            raise ValueError(f"expected trailing dimension {self.d}, got {x.shape[-1]}")
        return x, xi

    def _check_shape(self, out, base):
        if self.n_components is None:
            return np.broadcast_to(out, base) if out.shape != base else out
        want = base + (self.n_components, self.n_components)
        if out.shape != want:
            raise ValueError(f"matrix symbol returned shape {out.shape}, expected {want}")
        return out

    def _fd_derivative(self, alpha, x, xi):
        """Nested fourth-order central differences."""
        z = np.concatenate([x, xi], axis=-1)
        stencil = ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12))
        steps = []
        for ax, k in enumerate(alpha):
            steps += [ax] * k
        delta = self.fd_step * (1 + 0.5 * (len(steps) - 1))
        total = 0.0
        for combo in itertools.product(stencil, repeat=len(steps)):
            zz = z.copy()
            w = 1.0
            for ax, (off, c) in zip(steps, combo):
                zz[..., ax] += off * delta
                w *= c
            xx, pp = _split(zz)
            total = total + w * np.asarray(self._value(xx, pp))
        return total / delta ** len(steps)

    # -- diagnostics ----------------------------------------------------
    def seminorm(self, k: int, points) -> float:
        """``max_{|alpha| <= k} sup |d^alpha a|`` over sample points ``(M, 2d)``."""
        x, xi = _split(points)
        best = 0.0
        for alpha in multi_indices(2 * self.d, k):
            best = max(best, float(np.max(np.abs(self.derivative(alpha, x, xi)))))
        return best

    # -- algebra --------------------------------------------------------
    def __add__(self, other):
        return SumSymbol(self, _as_symbol(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return SumSymbol(self, ScaledSymbol(_as_symbol(other, self), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return ScaledSymbol(self, other)
        return ProductSymbol(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return ScaledSymbol(self, -1.0)

    def __repr__(self):
        return f"<{self.name} d={self.d} S^{self.class_order}>"


def _as_symbol(obj, like: Symbol) -> Symbol:
    if isinstance(obj, Symbol):
        return obj
    return constant(obj, like.d)


class FunctionSymbol(Symbol):
    """Wrap ``fn(x, xi)``; optional ``deriv(alpha, x, xi)`` supplies exact derivatives."""

    def __init__(self, fn, d: int = 1, deriv=None, **kw):
        super().__init__(d=d, **kw)
        self._fn = fn
        self._deriv = deriv

    def _value(self, x, xi):
        return self._fn(x, xi)

    def _derivative(self, alpha, x, xi):
        if self._deriv is None:
            return NotImplemented
        return self._deriv(alpha, x, xi)


def constant(c: float, d: int = 1) -> Symbol:
    c = complex(c) if np.iscomplexobj(c) else float(c)
    return PolynomialSymbol({(0,) * (2 * d): c}, d=d)


class GaussianBump(Symbol):
    """``amplitude * exp(-sum_i (z_i - c_i)^2 / (2 sigma_i^2))`` on ``R^{2d}``."""

    def __init__(self, center, sigma, amplitude: float = 1.0, **kw):
        center = np.asarray(center, dtype=float)
        d = center.size // 2
        super().__init__(d=d, class_order=0, **kw)
        self.center = center
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=float), center.shape).copy()
        self.amplitude = float(amplitude)

    def _value(self, x, xi):
        z = np.concatenate([x, xi], axis=-1)
        u = (z - self.center) / self.sigma
        return self.amplitude * np.exp(-0.5 * np.sum(u ** 2, axis=-1))

    def _derivative(self, alpha, x, xi):
        z = np.concatenate([x, xi], axis=-1)
        u = (z - self.center) / self.sigma
        out = self.amplitude * np.exp(-0.5 * np.sum(u ** 2, axis=-1))
        for i, k in enumerate(alpha):
            if k:
                coef = np.zeros(k + 1)
                coef[k] = 1.0
                out = out * hermite_e.hermeval(u[..., i], coef) * (-1.0 / self.sigma[i]) ** k
        return out


class PolynomialSymbol(Symbol):
    """Polynomial ``sum c_beta z^beta`` given as ``{beta: c}`` with ``beta`` of length 2d."""

    def __init__(self, coeffs: dict, d: int = 1, **kw):
        coeffs = {tuple(int(b) for b in k): v for k, v in coeffs.items()}
        order = max((sum(k[d:]) for k in coeffs), default=0)
        real = all(np.isreal(v) for v in coeffs.values())
        kw.setdefault("class_order", order)
        kw.setdefault("real", real)
        super().__init__(d=d, **kw)
        self.coeffs = coeffs

    def _eval(self, coeffs, x, xi):
        z = np.concatenate([x, xi], axis=-1)
        dtype = complex if any(np.iscomplex(v) for v in coeffs.values()) else float
        out = np.zeros(z.shape[:-1], dtype=dtype)
        for beta, c in coeffs.items():
            term = np.full(z.shape[:-1], c, dtype=dtype)
            for i, b in enumerate(beta):
                if b:
                    term = term * z[..., i] ** b
            out = out + term
        return out

    def _value(self, x, xi):
        return self._eval(self.coeffs, x, xi)

    def _derivative(self, alpha, x, xi):
        new = {}
        for beta, c in self.coeffs.items():
            if all(b >= a for b, a in zip(beta, alpha)):
                f = 1.0
                for b, a in zip(beta, alpha):
                    f *= factorial(b) / factorial(b - a)
                key = tuple(b - a for b, a in zip(beta, alpha))
                new[key] = new.get(key, 0.0) + c * f
        if not new:
            return np.zeros(x.shape[:-1])
        return self._eval(new, x, xi)


class SumSymbol(Symbol):
    def __init__(self, a: Symbol, b: Symbol):
        super().__init__(d=a.d, class_order=max(a.class_order, b.class_order),
                         n_components=a.n_components or b.n_components,
                         real=a.real and b.real, name=f"({a.name}+{b.name})")
        self.a, self.b = a, b

    def _value(self, x, xi):
        return self.a(x, xi) + self.b(x, xi)

    def _derivative(self, alpha, x, xi):
        return self.a.derivative(alpha, x, xi) + self.b.derivative(alpha, x, xi)


class ScaledSymbol(Symbol):
    def __init__(self, a: Symbol, c):
        super().__init__(d=a.d, class_order=a.class_order, n_components=a.n_components,
                         real=a.real and np.isreal(c), name=f"{c}*{a.name}")
        self.a, self.c = a, c

    def _value(self, x, xi):
        return self.c * self.a(x, xi)

    def _derivative(self, alpha, x, xi):
        return self.c * self.a.derivative(alpha, x, xi)


class ProductSymbol(Symbol):
    """Pointwise product with derivatives by the Leibniz rule."""

    def __init__(self, a: Symbol, b: Symbol):
        super().__init__(d=a.d, class_order=a.class_order + b.class_order,
                         n_components=a.n_components or b.n_components,
                         real=a.real and b.real and a.n_components is None,
                         name=f"({a.name}*{b.name})")
        self.a, self.b = a, b

    def _mul(self, u, v):
        if self.a.n_components and self.b.n_components:
            return u @ v
        if self.a.n_components:
            return u * v[..., None, None]
        if self.b.n_components:
            return u[..., None, None] * v
        return u * v

    def _value(self, x, xi):
        return self._mul(self.a(x, xi), self.b(x, xi))

    def _derivative(self, alpha, x, xi):
        total = 0.0
        for beta in itertools.product(*[range(k + 1) for k in alpha]):
            c = 1
            for k, b in zip(alpha, beta):
                c *= comb(k, b)
            rest = tuple(k - b for k, b in zip(alpha, beta))
            total = total + c * self._mul(self.a.derivative(beta, x, xi),
                                          self.b.derivative(rest, x, xi))
        return total


class MatrixSymbol(Symbol):
    """``N x N`` matrix-valued symbol from ``fn(x, xi) -> (..., N, N)``."""

    def __init__(self, fn, n_components: int, d: int = 1, deriv=None, **kw):
        super().__init__(d=d, n_components=n_components, **kw)
        self._fn = fn
        self._deriv = deriv

    def _value(self, x, xi):
        return self._fn(x, xi)

    def _derivative(self, alpha, x, xi):
        if self._deriv is None:
            return NotImplemented
        return self._deriv(alpha, x, xi)

    def component(self, i: int, j: int) -> Symbol:
        return FunctionSymbol(lambda x, xi: self(x, xi)[..., i, j], d=self.d,
                              class_order=self.class_order, real=self.real and i == j)


def poisson_bracket(a: Symbol, b: Symbol) -> Symbol:
    """``{a, b} = grad_xi a . grad_x b - grad_x a . grad_xi b``."""
    d = a.d

    def unit(i):
        e = [0] * (2 * d)
        e[i] = 1
        return tuple(e)

    def fn(x, xi):
        out = 0.0
        for j in range(d):
            out = out + (a.derivative(unit(d + j), x, xi) * b.derivative(unit(j), x, xi)
                         - a.derivative(unit(j), x, xi) * b.derivative(unit(d + j), x, xi))
        return out

    return FunctionSymbol(fn, d=d, class_order=a.class_order + b.class_order - 1,
                          real=a.real and b.real, name=f"{{{a.name},{b.name}}}")


def smooth_step(t, t0: float, t1: float):
    """C-infinity step equal to 1 for ``t <= t0`` and 0 for ``t >= t1``."""
    s = np.clip((np.asarray(t, dtype=float) - t0) / (t1 - t0), 0.0, 1.0)

    def f(u):
        safe = np.where(u > 0, u, 1.0)
        return np.where(u > 0, np.exp(-1.0 / safe), 0.0)

    a, b = f(1 - s), f(s)
    return a / (a + b)
