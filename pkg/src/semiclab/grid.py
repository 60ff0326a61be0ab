"""Uniform periodic grids and the wave/phase-space fields sampled on them."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC_WAVE = b"SCLWAVE1"
_MAGIC_PHASE = b"SCLPHAS1"
_MAGIC_MATRIX = b"SCLMATX1"


class GridError(ValueError):
    """Raised for invalid grid specifications or incompatible fields."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on a box ``prod_j [a_j, b_j)``.

    Parameters
    ----------
    box : sequence of (a, b) pairs, one per axis
    n : sequence of sample counts (powers of two, at least 8)
    """

    box: tuple[tuple[float, float], ...]
    n: tuple[int, ...]

    def __post_init__(self):
        box = tuple((float(a), float(b)) for a, b in self.box)
        n = tuple(int(k) for k in self.n)
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "n", n)
        if len(box) != len(n) or not box:
            raise GridError("box and n must have the same nonzero length")
        for (a, b), k in zip(box, n):
            if not b > a:
                raise GridError(f"empty interval [{a}, {b})")
            if k < 8 or k & (k - 1):
                raise GridError(f"sample count {k} is not a power of two >= 8")

    @classmethod
    def uniform(cls, a: float, b: float, n: int, d: int = 1) -> "GridSpec":
        return cls(((a, b),) * d, (n,) * d)

    @property
    def d(self) -> int:
        return len(self.n)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([b - a for a, b in self.box])

    @property
    def dx(self) -> np.ndarray:
        return self.lengths / np.array(self.n)

    @property
    def cell(self) -> float:
        """Volume element ``prod dx_j``."""
        return float(np.prod(self.dx))

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    def axis(self, j: int = 0) -> np.ndarray:
        a, _ = self.box[j]
        return a + self.dx[j] * np.arange(self.n[j])

    def axes(self) -> list[np.ndarray]:
        return [self.axis(j) for j in range(self.d)]

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def points(self) -> np.ndarray:
        """All grid points, shape ``(size, d)`` in C order."""
        return np.stack([m.ravel() for m in self.mesh()], axis=-1)

    def wavenumbers(self, j: int = 0) -> np.ndarray:
        """Angular wavenumbers in FFT order."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n[j], d=self.dx[j])

    def xi_axis(self, h: float, j: int = 0) -> np.ndarray:
        """Momenta ``xi = h k`` in FFT order; spacing ``2 pi h / L``."""
        return h * self.wavenumbers(j)

    def xi_max(self, h: float, j: int = 0) -> float:
        return np.pi * h / self.dx[j]

    def momentum_grid(self, h: float) -> "GridSpec":
        """Grid carrying the h-Fourier transform (centred, ascending order)."""
        box = []
        for j in range(self.d):
            xm = self.xi_max(h, j)
            box.append((-xm, xm))
        return GridSpec(tuple(box), self.n)

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(self.box, tuple(k * factor for k in self.n))

    def to_dict(self) -> dict:
        return {"box": [list(b) for b in self.box], "n": list(self.n)}

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        return cls(tuple(tuple(b) for b in data["box"]), tuple(data["n"]))


@dataclass(frozen=True, eq=False)
class WaveField:
    """Complex samples of a wave function on a periodic grid.

    ``representation`` is ``"position"`` for ordinary fields and
    ``"momentum"`` for h-Fourier transforms, whose grid is the centred
    momentum grid returned by :meth:`GridSpec.momentum_grid`.
    """

    grid: GridSpec
    h: float
    samples: np.ndarray
    representation: str = "position"
    n_components: int = 1

    def __post_init__(self):
        shape = tuple(self.grid.n) if self.n_components == 1 else (self.n_components,) + tuple(self.grid.n)
        s = np.asarray(self.samples, dtype=complex).reshape(shape)
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        if not 0.0 < self.h <= 1.0:
            raise GridError(f"h = {self.h} outside (0, 1]")

    @classmethod
    def from_function(cls, grid: GridSpec, h: float, fn, boundary_tol: float | None = 1e-8):
        """Sample ``fn(*mesh)`` and optionally check boundary negligibility."""
        field = cls(grid, h, fn(*grid.mesh()))
        if boundary_tol is not None:
            field.check_boundary(boundary_tol)
        return field

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.samples) ** 2) * self.grid.cell))

    def inner(self, other: "WaveField") -> complex:
        """``<self, other> = sum self * conj(other) dx``."""
        return complex(np.sum(self.samples * np.conj(other.samples)) * self.grid.cell)

    def normalized(self) -> "WaveField":
        return self.with_samples(self.samples / self.norm())

    def with_samples(self, samples) -> "WaveField":
        return WaveField(self.grid, self.h, samples, self.representation, self.n_components)

    def boundary_ratio(self) -> float:
        """max |psi| on the outermost grid layer relative to max |psi|."""
        a = np.abs(self.samples).reshape((-1,) + tuple(self.grid.n)).max(axis=0)
        peak = a.max()
        if peak == 0:
            return 0.0
        edge = 0.0
        for j in range(self.grid.d):
            edge = max(edge, np.take(a, 0, axis=j).max(), np.take(a, -1, axis=j).max())
        return float(edge / peak)

    def check_boundary(self, tol: float = 1e-8) -> None:
        r = self.boundary_ratio()
        if r > tol:
            raise GridError(f"field is not boundary-negligible: edge ratio {r:.2e} > {tol:.0e}")

    def is_normalized(self, tol: float = 1e-10) -> bool:
        return abs(self.norm() - 1.0) <= tol


@dataclass(frozen=True, eq=False)
class PhaseSpaceField:
    """Values on a product grid of positions and momenta.

    The value array has axes ``(x_1, xi_1, x_2, xi_2, ...)``.
    """

    x_grid: GridSpec
    xi_axes: tuple[np.ndarray, ...]
    values: np.ndarray
    h: float
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.x_grid.d

    def axes(self) -> list[np.ndarray]:
        out = []
        for j in range(self.d):
            out += [self.x_grid.axis(j), np.asarray(self.xi_axes[j])]
        return out

    def cell(self) -> float:
        c = 1.0
        for ax in self.axes():
            c *= ax[1] - ax[0]
        return c

    def total(self) -> complex:
        return complex(np.sum(self.values) * self.cell())

    def marginal_x(self) -> np.ndarray:
        v = self.values
        for j in reversed(range(self.d)):
            ax = self.xi_axes[j]
            v = v.sum(axis=2 * j + 1) * (ax[1] - ax[0])
        return v

    def marginal_xi(self) -> np.ndarray:
        v = self.values
        for j in reversed(range(self.d)):
            v = v.sum(axis=2 * j) * self.x_grid.dx[j]
        return v


# ---------------------------------------------------------------------------
# serialization


def _pack_header(magic, grid: GridSpec, h: float) -> bytes:
    parts = [magic, struct.pack("<q", grid.d)]
    parts.append(struct.pack(f"<{grid.d}q", *grid.n))
    flat_box = [v for ab in grid.box for v in ab]
    parts.append(struct.pack(f"<{2 * grid.d}d", *flat_box))
    parts.append(struct.pack("<d", h))
    return b"".join(parts)


def _unpack_header(buf: bytes, magic: bytes):
    if buf[:8] != magic:
        raise GridError(f"bad magic {buf[:8]!r}, expected {magic!r}")
    off = 8
    (d,) = struct.unpack_from("<q", buf, off)
    off += 8
    n = struct.unpack_from(f"<{d}q", buf, off)
    off += 8 * d
    flat = struct.unpack_from(f"<{2 * d}d", buf, off)
    off += 16 * d
    (h,) = struct.unpack_from("<d", buf, off)
    off += 8
    box = tuple((flat[2 * j], flat[2 * j + 1]) for j in range(d))
    return GridSpec(box, n), h, off


def _interleave(z: np.ndarray) -> bytes:
    z = np.ascontiguousarray(z, dtype="<c16")
    return z.view("<f8").tobytes()


def _deinterleave(buf: bytes, off: int, count: int) -> np.ndarray:
    flat = np.frombuffer(buf, dtype="<f8", count=2 * count, offset=off)
    return flat[0::2] + 1j * flat[1::2]


def save_wavefield(path, field: WaveField) -> None:
    """Binary layout: magic, d, n_j, box, h (little-endian), then re/im pairs."""
    tag = b"\x00" if field.representation == "position" else b"\x01"
    data = _pack_header(_MAGIC_WAVE, field.grid, field.h) + tag + _interleave(field.samples.ravel())
    Path(path).write_bytes(data)


def load_wavefield(path) -> WaveField:
    buf = Path(path).read_bytes()
    grid, h, off = _unpack_header(buf, _MAGIC_WAVE)
    rep = "position" if buf[off:off + 1] == b"\x00" else "momentum"
    count = (len(buf) - off - 1) // 16
    ncomp = max(1, count // grid.size)  # multi-component fields store components back to back
    samples = _deinterleave(buf, off + 1, ncomp * grid.size)
    return WaveField(grid, h, samples, rep, ncomp)


def save_phasefield(path, field: PhaseSpaceField) -> None:
    """Header as for wave fields, followed by the xi axes and the values."""
    parts = [_pack_header(_MAGIC_PHASE, field.x_grid, field.h)]
    for ax in field.xi_axes:
        ax = np.asarray(ax, dtype="<f8")
        parts.append(struct.pack("<q", ax.size) + ax.tobytes())
    parts.append(_interleave(np.asarray(field.values, dtype=complex).ravel()))
    Path(path).write_bytes(b"".join(parts))


def load_phasefield(path) -> PhaseSpaceField:
    buf = Path(path).read_bytes()
    grid, h, off = _unpack_header(buf, _MAGIC_PHASE)
    axes = []
    for _ in range(grid.d):
        (m,) = struct.unpack_from("<q", buf, off)
        off += 8
        axes.append(np.frombuffer(buf, dtype="<f8", count=m, offset=off).copy())
        off += 8 * m
    shape = []
    for j in range(grid.d):
        shape += [grid.n[j], axes[j].size]
    vals = _deinterleave(buf, off, int(np.prod(shape))).reshape(shape)
    if np.all(vals.imag == 0):
        vals = vals.real
    return PhaseSpaceField(grid, tuple(axes), vals, h)


def save_matrix(path, matrix: np.ndarray) -> None:
    """Row-major complex doubles after a (rows, cols) header."""
    m = np.asarray(matrix, dtype=complex)
    Path(path).write_bytes(_MAGIC_MATRIX + struct.pack("<qq", *m.shape) + _interleave(m.ravel()))


def load_matrix(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC_MATRIX:
        raise GridError("not a matrix file")
    rows, cols = struct.unpack_from("<qq", buf, 8)
    return _deinterleave(buf, 24, rows * cols).reshape(rows, cols)


def write_slice_csv(path, field) -> None:
    """CSV dump of a 1D wave field or a 2D array slice (x, [xi,] re, im)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if isinstance(field, WaveField):
            if field.grid.d != 1:
                raise GridError("CSV export of wave fields is 1D only")
            w.writerow(["x", "re", "im"])
            for x, v in zip(field.grid.axis(0), field.samples):
                w.writerow([repr(x), repr(v.real), repr(v.imag)])
        else:
            if field.d != 1:
                raise GridError("CSV export of phase-space fields is 1D only")
            w.writerow(["x", "xi", "re", "im"])
            xs, xis = field.axes()
            vals = np.asarray(field.values, dtype=complex)
            for i, x in enumerate(xs):
                for k, xi in enumerate(xis):
                    v = vals[i, k]
                    w.writerow([repr(x), repr(xi), repr(v.real), repr(v.imag)])
