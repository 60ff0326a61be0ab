"""Built-in experiments.

Each function receives a :class:`~semiclab.experiments.Context` with the
merged parameters (``ctx.p``), tolerances (``ctx.tol``), the h-ladder
(``ctx.hs``, decreasing), the seed and the thread count, and records
CSV rows and checks on it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import warnings

import numpy as np

from .experiments import fit_slope, register
from .grid import GridSpec, WaveField
from .multilevel import (AdiabaticTransport, MatrixPotential, TimeWindow, adiabatic_egorov_check,
                         band_packet, ensemble_grid, hopping_simulate, lz_grid_population,
                         wigner_ensemble)
from .phasespace import free_particle, harmonic_oscillator, quartic_oscillator
from .propagators import (GridPropagator, TransportedSymbol, egorov_evolve, fio_samples,
                          frozen_fio_apply, thawed_fio_apply)
from .quantization import (BandLimitWarning, GaussianFunction, PlateauFunction,
                           bargmann_psido_link, calculus_residual_commutator,
                           calculus_residual_product, fit_garding_constant, function_of_operator,
                           garding_min_eig, helffer_sjostrand, operator_norm, parametrix_residual,
                           probe_basis, trace_formula_check, weyl_quantize)
from .symbols import FunctionSymbol, GaussianBump, MatrixSymbol, PolynomialSymbol, ProductSymbol, smooth_step
from .transforms import bargmann, bargmann_synthesis, momentum_density, moments, wigner
from .wavepackets import packet_propagate, packet_values, render, standard_packet

HAMILTONIANS = {"free": free_particle, "harmonic": harmonic_oscillator, "quartic": quartic_oscillator}


def _pow2_grid(box, h, xi_min, d=1, n_min=8):
    """Box grid with the smallest power-of-two ``n`` such that ``xi_max >= xi_min``."""
    a, b = box
    n = n_min
    while np.pi * h * n / (b - a) < xi_min:
        n *= 2
    return GridSpec.uniform(a, b, n, d)


def _packet_grid(h, box, p_max, per_width=8.0, band_widths=6.0):
    """Grid resolving a standard packet: ``dx <= sqrt(h)/per_width`` and a
    momentum band reaching ``band_widths`` packet widths beyond ``p_max``."""
    a, b = box
    dx = min(np.sqrt(h) / per_width, np.pi * h / (p_max + band_widths * np.sqrt(h)))
    n = int(2 ** np.ceil(np.log2((b - a) / dx)))
    return GridSpec.uniform(a, b, n)


def _rel_diff(a: WaveField, b: WaveField) -> float:
    return a.with_samples(a.samples - b.samples).norm()


def _digest(*arrays) -> str:
    m = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        m.update(str(arr.dtype).encode())
        m.update(str(arr.shape).encode())
        m.update(arr.tobytes())
    return m.hexdigest()


def random_smooth_field(grid: GridSpec, h: float, rng, max_terms: int = 3) -> WaveField:
    """Normalized superposition of up to ``max_terms`` chirped Gaussians
    with random centres, widths of order ``sqrt(h)`` and random weights."""
    x = grid.points()
    d = grid.d
    psi = np.zeros(x.shape[0], dtype=complex)
    for _ in range(int(rng.integers(1, max_terms + 1))):
        q = rng.uniform(-1.0, 1.0, d)
        p = rng.uniform(-1.0, 1.0, d)
        s = rng.uniform(0.5, 2.0) * np.sqrt(h)
        beta = rng.uniform(-0.5, 0.5)
        c = rng.normal() + 1j * rng.normal()
        y = x - q
        r2 = np.sum(y * y, -1)
        psi += c * np.exp(-r2 / (2 * s * s) + 1j * (y @ p) / h + 0.5j * beta * r2 / h)
    return WaveField(grid, h, psi.reshape(grid.n)).normalized()


# ---------------------------------------------------------------------------
# 1. uncertainty


@register(
    "uncertainty",
    "Standard packets saturate d_x d_xi = h/2 on every axis; random smooth fields stay above it.",
    {"kind": "packet-1d | packet-2d | random", "h": "semiclassical parameter",
     "index": "random field index or axis", "product": "d_x * d_xi", "ratio": "product / (h/2)"},
    range(4, 11),
    params={"q": [0.3, -0.2], "p": [0.5, 0.1], "box": [-4.0, 4.0], "d2_min_h": 2.0 ** -8,
            "random_count": 20, "random_h": 2.0 ** -5, "random_n": 512},
    tolerances={"saturation_rel": 1e-6, "lower_slack": 1e-8},
    criterion=1,
)
def _uncertainty(ctx):
    p = ctx.p
    dev = 0.0
    for h in ctx.hs:
        for d in (1, 2):
            if d == 2 and h < p["d2_min_h"]:
                continue
            q, mom = p["q"][:d], p["p"][:d]
            g1 = _packet_grid(h, p["box"], max(abs(v) for v in mom), band_widths=10.0)
            g = GridSpec.uniform(p["box"][0], p["box"][1], g1.n[0], d)
            psi = render(standard_packet(q, mom, h), g)
            prod = moments(psi.normalized()).uncertainty_products()
            for j, v in enumerate(prod):
                ratio = v / (h / 2)
                dev = max(dev, abs(ratio - 1))
                ctx.row(kind=f"packet-{d}d", h=h, index=j, product=v, ratio=ratio)
    ctx.at_most("packet saturation (max |ratio - 1|)", dev, ctx.tol["saturation_rel"])
    h = p["random_h"]
    g = GridSpec.uniform(p["box"][0], p["box"][1], p["random_n"])
    worst = np.inf
    for i in range(p["random_count"]):
        psi = random_smooth_field(g, h, np.random.default_rng([ctx.seed, i]))
        v = float(moments(psi).uncertainty_products()[0])
        worst = min(worst, v - h / 2)
        ctx.row(kind="random", h=h, index=i, product=v, ratio=v / (h / 2))
    ctx.check("random fields: min(product - h/2)", worst, worst >= -ctx.tol["lower_slack"],
              f">= {-ctx.tol['lower_slack']:g}")


# ---------------------------------------------------------------------------
# 2. Bargmann


def _bargmann_probes(g: GridSpec, h: float, seed: int):
    x = g.points()
    sq = np.array([[0.25j]])
    yield "coherent", render(standard_packet([0.3], [0.5], h), g)
    cat = (packet_values(x, [-0.8], [0.4], np.array([[1j]]), h)
           + packet_values(x, [0.7], [-0.3], np.array([[1j]]), h))
    yield "cat", WaveField(g, h, cat.reshape(g.n)).normalized()
    yield "squeezed", WaveField(g, h, packet_values(x, [0.1], [0.2], sq + 0.5, h).reshape(g.n)).normalized()
    yield "random", random_smooth_field(g, h, np.random.default_rng([seed, 1000]))


@register(
    "bargmann",
    "Bargmann transform is an isometry and the synthesis inverts it on boundary-negligible probes.",
    {"h": "semiclassical parameter", "probe": "probe name", "norm_ratio": "||B f||^2 / ||f||^2",
     "inversion_error": "||B^* B f - f|| / ||f||", "boundary": "boundary-to-peak ratio of |f|"},
    range(4, 7),
    params={"box": [-4.0, 4.0], "p_max": 1.0},
    tolerances={"ratio_window": [0.999, 1.001], "inversion": 1e-3, "boundary": 1e-8},
    criterion=2,
)
def _bargmann(ctx):
    lo, hi = ctx.tol["ratio_window"]
    worst_ratio, worst_inv = 0.0, 0.0
    for h in ctx.hs:
        g = _packet_grid(h, ctx.p["box"], ctx.p["p_max"], band_widths=10.0)
        for name, f in _bargmann_probes(g, h, ctx.seed):
            bnd = f.boundary_ratio()
            if bnd > ctx.tol["boundary"]:
                raise ValueError(f"probe {name} is not boundary negligible ({bnd:.1e})")
            B = bargmann(f)
            ratio = 1.0 - B.meta["mass_deficit"]
            rec = bargmann_synthesis(B, g)
            inv = _rel_diff(rec, f) / f.norm()
            worst_ratio = max(worst_ratio, abs(ratio - 1))
            worst_inv = max(worst_inv, inv)
            ctx.row(h=h, probe=name, norm_ratio=ratio, inversion_error=inv, boundary=bnd)
            ctx.check(f"norm ratio {name} h={h:g}", ratio, lo <= ratio <= hi, f"in [{lo:g}, {hi:g}]")
    ctx.at_most("inversion error (max)", worst_inv, ctx.tol["inversion"])


# ---------------------------------------------------------------------------
# 3. Wigner


def _wigner_case(ctx, h, g, q, p):
    d = g.d
    per_width = float(np.sqrt(h) / g.dx.max())
    psi = render(standard_packet(q, p, h), g, points_per_width=min(8.0, per_width))
    W = wigner(psi)
    axes = W.axes()
    mesh = np.meshgrid(*axes, indexing="ij")
    z = np.ravel([[a, b] for a, b in zip(q, p)])
    r2 = sum((m - c) ** 2 for m, c in zip(mesh, z))
    exact = (np.pi * h) ** (-d) * np.exp(-r2 / h)
    sup = float(np.max(np.abs(W.values - exact)) / exact.max())
    rho = np.abs(psi.samples) ** 2
    mx = float(np.max(np.abs(W.marginal_x() - rho)) / rho.max())
    # the Wigner momentum axes are twice as fine as the FFT momentum grid
    xi_axes, prho = momentum_density(psi)
    mxi_full = W.marginal_xi()
    idx = []
    for j in range(d):
        L = g.lengths[j]
        kk = np.rint(xi_axes[j] * L / (np.pi * h)).astype(int) + g.n[j]
        idx.append(kk)
    mxi = float(np.max(np.abs(mxi_full[np.ix_(*idx)] - prho)) / prho.max())
    ctx.row(d=d, h=h, n=g.n[0], sup_rel=sup, marginal_x=mx, marginal_xi=mxi,
            truncation=W.meta["truncation"])
    return sup, max(mx, mxi)


@register(
    "wigner",
    "Wigner transform of a standard packet equals the phase-space Gaussian; marginals are the densities.",
    {"d": "dimension", "h": "semiclassical parameter", "n": "grid points per axis",
     "sup_rel": "sup |W - W_exact| / sup W_exact", "marginal_x": "relative sup error of int W dxi",
     "marginal_xi": "relative sup error of int W dx", "truncation": "shift-window truncation estimate"},
    range(4, 9),
    params={"q": 0.3, "p": 0.5, "box": [-3.0, 3.0], "q_2d": [0.1, -0.1], "p_2d": [0.2, -0.1],
            "box_2d": [-1.2, 1.2], "h_2d": 2.0 ** -5, "n_2d": 32},
    tolerances={"sup_rel": 1e-4, "marginal": 1e-6},
    criterion=3,
)
def _wigner(ctx):
    p = ctx.p
    sup, marg = 0.0, 0.0
    for h in ctx.hs:
        g = _packet_grid(h, p["box"], abs(p["p"]), band_widths=10.0)
        s, m = _wigner_case(ctx, h, g, [p["q"]], [p["p"]])
        sup, marg = max(sup, s), max(marg, m)
    g2 = GridSpec.uniform(p["box_2d"][0], p["box_2d"][1], p["n_2d"], 2)
    s, m = _wigner_case(ctx, p["h_2d"], g2, p["q_2d"], p["p_2d"])
    sup, marg = max(sup, s), max(marg, m)
    ctx.at_most("sup relative error", sup, ctx.tol["sup_rel"])
    ctx.at_most("marginal error", marg, ctx.tol["marginal"])


# ---------------------------------------------------------------------------
# 4. symbolic calculus


def _bump(spec):
    return GaussianBump(spec[:2], spec[2])


def _parametrix_symbol(amp, width2):
    return FunctionSymbol(lambda x, xi: 1.0 + xi[..., 0] ** 2 + amp * np.exp(-x[..., 0] ** 2 / width2),
                          d=1, class_order=2, real=True, name="elliptic")


@register(
    "calculus",
    "Composition and commutator rates of the Weyl calculus, canonical commutation, parametrix and "
    "Bargmann-link rates.",
    {"quantity": "product | commutator | ccr | parametrix | bargmann-link", "h": "semiclassical parameter",
     "n": "grid points", "residual": "operator-norm residual"},
    range(4, 9),
    params={"a": [0.1, 0.0, 0.5], "b": [-0.2, 0.25, 0.5], "box": [-3.5, 3.5], "xi_min": 3.5,
            "ccr_h": 2.0 ** -5, "ccr_n": 128, "ccr_box": [-2.5, 2.5],
            "parametrix_exponents": [4, 5, 6, 7, 8], "parametrix_box": [-1.6, 1.6],
            "parametrix_xi_min": 1.9, "parametrix_amp": 0.3, "parametrix_width2": 0.2,
            "parametrix_kind": "left",
            "link_exponents": [4, 5, 6, 7, 8], "link_bump": [0.1, 0.0, 0.5], "link_box": [-2.5, 2.5],
            "link_xi_min": 2.4},
    tolerances={"product_window": [1.8, 2.2], "commutator_window": [2.7, 3.3], "ccr": 1e-10,
                "parametrix_window": [0.8, 1.2], "link_window": [0.8, 1.2]},
    min_points=4,
    criterion=4,
)
def _calculus(ctx):
    p = ctx.p
    a, b = _bump(p["a"]), _bump(p["b"])
    prod, comm = [], []
    for h in ctx.hs:
        g = _pow2_grid(p["box"], h, p["xi_min"])
        prod.append(calculus_residual_product(a, b, g, h))
        comm.append(calculus_residual_commutator(a, b, g, h))
        ctx.row(quantity="product", h=h, n=g.n[0], residual=prod[-1])
        ctx.row(quantity="commutator", h=h, n=g.n[0], residual=comm[-1])
    ctx.slope("product residual slope", ctx.hs, prod, ctx.tol["product_window"])
    ctx.slope("commutator residual slope", ctx.hs, comm, ctx.tol["commutator_window"])

    h = p["ccr_h"]
    g = GridSpec.uniform(p["ccr_box"][0], p["ccr_box"][1], p["ccr_n"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BandLimitWarning)
        X = weyl_quantize(PolynomialSymbol({(1, 0): 1.0}), g, h).matrix
        D = weyl_quantize(PolynomialSymbol({(0, 1): 1.0}), g, h).matrix
    ccr = operator_norm(D @ X - X @ D - (h / 1j) * np.eye(g.size), probe_basis(g, h))
    ctx.row(quantity="ccr", h=h, n=g.n[0], residual=ccr)
    ctx.at_most("[Op(xi), Op(x)] - (h/i) Id on probe space", ccr, ctx.tol["ccr"])

    sym = _parametrix_symbol(p["parametrix_amp"], p["parametrix_width2"])
    hs = [2.0 ** -k for k in p["parametrix_exponents"]]
    res = []
    for h in hs:
        g = _pow2_grid(p["parametrix_box"], h, p["parametrix_xi_min"])
        res.append(parametrix_residual(sym, g, h, kind=p["parametrix_kind"]))
        ctx.row(quantity="parametrix", h=h, n=g.n[0], residual=res[-1])
    ctx.slope("parametrix residual slope", hs, res, ctx.tol["parametrix_window"])

    bump = _bump(p["link_bump"])
    hs = [2.0 ** -k for k in p["link_exponents"]]
    res = []
    for h in hs:
        g = _pow2_grid(p["link_box"], h, p["link_xi_min"])
        res.append(bargmann_psido_link(bump, g, h))
        ctx.row(quantity="bargmann-link", h=h, n=g.n[0], residual=res[-1])
    ctx.slope("Bargmann link slope", hs, res, ctx.tol["link_window"])


# ---------------------------------------------------------------------------
# 5. Garding


def _garding_symbols():
    a1 = ProductSymbol(PolynomialSymbol({(2, 2): 1.0}), GaussianBump([0.0, 0.0], 0.5))
    a2 = ProductSymbol(PolynomialSymbol({(2, 0): 1.0, (1, 0): -0.4, (0, 0): 0.04}),
                       GaussianBump([0.0, 0.2], 0.4))
    return {"x2xi2-bump": a1, "shifted-square-bump": a2}


@register(
    "garding",
    "Smallest eigenvalue of Op(a) for nonnegative bumps is bounded below by -C h with one stable C.",
    {"symbol": "symbol name", "h": "semiclassical parameter", "n": "grid points",
     "lambda_min": "smallest eigenvalue", "ratio": "max(0, -lambda_min) / h"},
    range(4, 10),
    params={"box": [-2.5, 2.5], "xi_min": 2.5},
    tolerances={"stability": 0.2},
    min_points=4,
    criterion=5,
)
def _garding(ctx):
    for name, sym in _garding_symbols().items():
        lam = []
        for h in ctx.hs:
            g = _pow2_grid(ctx.p["box"], h, ctx.p["xi_min"])
            lam.append(garding_min_eig(sym, g, h))
            ctx.row(symbol=name, h=h, n=g.n[0], lambda_min=lam[-1], ratio=max(0.0, -lam[-1]) / h)
        fit = fit_garding_constant(ctx.hs, lam, ctx.tol["stability"])
        ctx.check(f"{name}: C stable across ladder", fit["C_full"], fit["stable"],
                  f"<= {1 + ctx.tol['stability']:g} * C = {(1 + ctx.tol['stability']) * fit['C']:.3g}",
                  f"C={fit['C']:.4g}, negative part ~ h^{fit['negative_part_slope']:.2f}")


# ---------------------------------------------------------------------------
# 6. functional calculus and trace


def _fc_symbol(sx, sxi):
    return FunctionSymbol(lambda x, xi: np.exp(-((x[..., 0] - 0.1) ** 2 / (2 * sx ** 2)
                                                 + xi[..., 0] ** 2 / (2 * sxi ** 2)))
                          * (1 + 0.3 * np.sin(x[..., 0])), d=1, real=True, name="fc-bump")


@register(
    "functional-calculus",
    "F(Op(a)) against Op(F o a), Helffer-Sjostrand against eigendecomposition, and the "
    "harmonic-oscillator trace formula.",
    {"quantity": "functional | helffer-sjostrand | trace", "h": "semiclassical parameter",
     "n": "grid points", "value": "residual, or lhs/rhs - 1 for the trace"},
    range(4, 9),
    params={"box": [-2.5, 2.5], "xi_min": 2.5, "sigma_x": 0.5, "sigma_xi": 0.4,
            "F_center": 0.6, "F_width": 0.15,
            "hs_h": 2.0 ** -5, "hs_n": 128, "hs_sigma_x": 0.5, "hs_sigma_xi": 0.4, "hs_nx": 200, "hs_ny": 60,
            "trace_h": 1.0 / 256, "trace_box": [-2.0, 2.0], "trace_n": 1024, "trace_window": [0.0, 1.0],
            "trace_ramp": 0.1},
    tolerances={"functional_window": [0.8, 1.2], "helffer_sjostrand": 1e-4, "trace_rel": 0.05},
    min_points=4,
    criterion=6,
)
def _functional(ctx):
    p = ctx.p
    a = _fc_symbol(p["sigma_x"], p["sigma_xi"])
    F = GaussianFunction(p["F_center"], p["F_width"])
    Fa = FunctionSymbol(lambda x, xi: F(a(x, xi)), d=1, real=True, name="F(a)")
    res = []
    for h in ctx.hs:
        g = _pow2_grid(p["box"], h, p["xi_min"])
        A = weyl_quantize(a, g, h)
        A.matrix = 0.5 * (A.matrix + A.matrix.conj().T)
        res.append(operator_norm(function_of_operator(A, F).matrix - weyl_quantize(Fa, g, h).matrix))
        ctx.row(quantity="functional", h=h, n=g.n[0], value=res[-1])
    ctx.slope("functional calculus slope", ctx.hs, res, ctx.tol["functional_window"])

    h = p["hs_h"]
    g = GridSpec.uniform(p["box"][0], p["box"][1], p["hs_n"])
    A = weyl_quantize(_fc_symbol(p["hs_sigma_x"], p["hs_sigma_xi"]), g, h)
    A.matrix = 0.5 * (A.matrix + A.matrix.conj().T)
    hs = helffer_sjostrand(A, F, 3, p["hs_nx"], p["hs_ny"])
    err = operator_norm(hs.matrix - function_of_operator(A, F).matrix)
    ctx.row(quantity="helffer-sjostrand", h=h, n=g.n[0], value=err)
    ctx.at_most("Helffer-Sjostrand vs eigendecomposition", err, ctx.tol["helffer_sjostrand"])

    h = p["trace_h"]
    g = GridSpec.uniform(p["trace_box"][0], p["trace_box"][1], p["trace_n"])
    ho = PolynomialSymbol({(2, 0): 0.5, (0, 2): 0.5})
    lhs, rhs = trace_formula_check(ho, PlateauFunction(*p["trace_window"], p["trace_ramp"]), g, h)
    rel = abs(lhs / rhs - 1)
    ctx.row(quantity="trace", h=h, n=g.n[0], value=lhs / rhs - 1)
    ctx.at_most("harmonic trace |lhs/rhs - 1|", rel, ctx.tol["trace_rel"], f"lhs={lhs:.6g} rhs={rhs:.6g}")


# ---------------------------------------------------------------------------
# 7. single wave packets


def _oracle(ham, g, h, eigen_max_n):
    method = "eigen" if g.size <= eigen_max_n else "split"
    return GridPropagator.for_hamiltonian(ham, g, h, method=method)


@register(
    "wavepacket",
    "Thawed Gaussian packet against the grid propagator: O(sqrt h) for the quartic oscillator, "
    "exact for the harmonic one.",
    {"hamiltonian": "quartic | harmonic", "h": "semiclassical parameter", "n": "grid points",
     "oracle": "eigen | split", "error": "L2 error at the final time"},
    range(4, 11),
    params={"q": 1.0, "p": 0.0, "t": 1.0, "box": [-3.0, 3.0], "p_max": 1.6, "eigen_max_n": 2048,
            "harmonic_exponents": [4, 5, 6, 7, 8]},
    tolerances={"quartic_window": [0.35, 0.65], "harmonic_floor": 1e-8},
    min_points=4,
    criterion=7,
)
def _wavepacket(ctx):
    p = ctx.p

    def run(name, hs):
        ham = HAMILTONIANS[name](1)
        errs = []
        for h in hs:
            g = _packet_grid(h, p["box"], p["p_max"])
            U = _oracle(ham, g, h, p["eigen_max_n"])
            _, err = packet_propagate(ham, standard_packet([p["q"]], [p["p"]], h), 0.0, p["t"], grid=g, oracle=U)
            errs.append(err)
            ctx.row(hamiltonian=name, h=h, n=g.n[0], oracle=U.method, error=err)
        return errs

    errs = run("quartic", ctx.hs)
    ctx.slope("quartic packet error slope", ctx.hs, errs, ctx.tol["quartic_window"])
    errs = run("harmonic", [2.0 ** -k for k in p["harmonic_exponents"]])
    ctx.at_most("harmonic packet error (max)", max(errs), ctx.tol["harmonic_floor"])


# ---------------------------------------------------------------------------
# 8. thawed and frozen integral propagators


def _fio_errors(ctx, ham, hs, record, name):
    p = ctx.p
    th, fr, jumps = [], [], 0.0
    for h in hs:
        g = _packet_grid(h, p["box"], p["p_max"])
        psi = render(standard_packet([p["q"]], [p["p"]], h), g)
        exact = _oracle(ham, g, h, p["eigen_max_n"]).propagate(psi, p["t"])
        ens = fio_samples(psi)
        ens_f = dataclasses.replace(ens)
        a = thawed_fio_apply(ham, psi, p["t"], quadrature=ens, threads=ctx.threads)
        b = frozen_fio_apply(ham, psi, p["t"], quadrature=ens_f, threads=ctx.threads)
        k = ens_f.prefactor
        jump = float(np.max(np.abs(np.angle(k[1:] / k[:-1])))) if k.shape[0] > 1 else 0.0
        jumps = max(jumps, jump)
        th.append(_rel_diff(a, exact))
        fr.append(_rel_diff(b, exact))
        if record:
            ctx.row(hamiltonian=name, h=h, n=g.n[0], samples=len(ens.weights), error_thawed=th[-1],
                    error_frozen=fr[-1], max_branch_jump=jump)
    return th, fr, jumps


_FIO_PARAMS = {"q": 1.0, "p": 0.0, "t": 1.0, "box": [-3.0, 3.0], "p_max": 1.6, "eigen_max_n": 2048,
               "identity_h": 2.0 ** -6}
_FIO_COLUMNS = {"hamiltonian": "model", "h": "semiclassical parameter", "n": "grid points",
                "samples": "quadrature samples", "error_thawed": "L2 error of the thawed propagator",
                "error_frozen": "L2 error of the frozen (Herman-Kluk) propagator",
                "max_branch_jump": "largest argument jump of the frozen prefactor between samples"}


@register(
    "fio",
    "Thawed and frozen Gaussian integral propagators converge at O(h) for the quartic oscillator; "
    "t = 0 gives the identity and the frozen prefactor branch is continuous.",
    _FIO_COLUMNS,
    range(5, 10),
    params=dict(_FIO_PARAMS),
    tolerances={"thawed_window": [0.8, 1.2], "frozen_window": [0.8, 1.2], "identity": 1e-6,
                "branch_jump": float(np.pi / 2)},
    min_points=4,
    criterion=8,
)
def _fio(ctx):
    p = ctx.p
    th, fr, jumps = _fio_errors(ctx, quartic_oscillator(1), ctx.hs, True, "quartic")
    ctx.slope("thawed error slope", ctx.hs, th, ctx.tol["thawed_window"])
    ctx.slope("frozen error slope", ctx.hs, fr, ctx.tol["frozen_window"])
    h = p["identity_h"]
    g = _packet_grid(h, p["box"], p["p_max"])
    psi = render(standard_packet([p["q"]], [p["p"]], h), g)
    ham = quartic_oscillator(1)
    ident = max(_rel_diff(thawed_fio_apply(ham, psi, 0.0), psi), _rel_diff(frozen_fio_apply(ham, psi, 0.0), psi))
    ctx.row(hamiltonian="quartic-identity", h=h, n=g.n[0], error_thawed=ident, error_frozen=ident)
    ctx.at_most("t = 0 identity error", ident, ctx.tol["identity"])
    ctx.check("frozen prefactor branch jump", jumps, jumps < ctx.tol["branch_jump"],
              f"< {ctx.tol['branch_jump']:.4g}")


@register(
    "hk-free-particle",
    "Thawed and frozen integral propagators for the free particle are exact: errors sit at the "
    "numerical floor across the ladder.",
    _FIO_COLUMNS,
    range(5, 10),
    params=dict(_FIO_PARAMS),
    tolerances={"floor": 1e-8},
    min_points=4,
)
def _hk_free(ctx):
    th, fr, _ = _fio_errors(ctx, free_particle(1), ctx.hs, True, "free")
    for name, errs in (("thawed", th), ("frozen", fr)):
        fit = ctx.fits[f"{name} error fit"] = fit_slope(ctx.hs, errs)
        ctx.at_most(f"{name} error (max)", max(errs), ctx.tol["floor"],
                    f"slope={fit.slope:.3f}" + (" floor-limited" if fit.floor_limited else ""))


# ---------------------------------------------------------------------------
# 9. Egorov


def _egorov_symbol(c, sigma, r0, r1):
    def fa(x, xi):
        r = np.sqrt((x[..., 0] - c) ** 2 + xi[..., 0] ** 2)
        return np.exp(-r ** 2 / (2 * sigma ** 2)) * smooth_step(r, r0, r1)
    return FunctionSymbol(fa, d=1, real=True, name="cut-bump")


_EGOROV_PARAMS = {"center": 0.2, "sigma": 0.25, "cut": [0.55, 0.9], "s": 0.0, "t": 1.0,
                  "box": [-1.6, 1.6], "xi_min": 1.9, "table_q": [-2.4, 2.4], "table_p": [-3.0, 3.0],
                  "spacing": 0.01}


def _egorov_quartic(ctx):
    p = ctx.p
    a = _egorov_symbol(p["center"], p["sigma"], *p["cut"])
    ham = quartic_oscillator(1)
    T = TransportedSymbol(ham, a, p["s"], p["t"], tuple(p["table_q"]), tuple(p["table_p"]), p["spacing"])
    res = []
    for h in ctx.hs:
        g = _pow2_grid(p["box"], h, p["xi_min"])
        res.append(egorov_evolve(ham, a, p["s"], p["t"], g, h, transported=T)[2])
        ctx.row(hamiltonian="quartic", h=h, L=g.lengths[0], n=g.n[0], residual=res[-1])
    ctx.slope("quartic Egorov residual slope", ctx.hs, res, ctx.tol["quartic_window"])
    return a


_EGOROV_COLUMNS = {"hamiltonian": "model", "h": "semiclassical parameter", "L": "box length",
                   "n": "grid points", "residual": "||U* Op(a) U - Op(a o flow)||"}


@register(
    "egorov",
    "Egorov residual is O(h^2) for the quartic oscillator and limited by the grid for the harmonic one.",
    _EGOROV_COLUMNS,
    range(5, 10),
    params=dict(_EGOROV_PARAMS, harmonic_h=2.0 ** -5, harmonic_grids=[[3.2, 1.9], [4.8, 2.8], [6.4, 3.8]]),
    tolerances={"quartic_window": [1.7, 2.3], "harmonic_refinement_gain": 10.0},
    min_points=4,
    criterion=9,
)
def _egorov(ctx):
    p = ctx.p
    a = _egorov_quartic(ctx)
    h = p["harmonic_h"]
    ham = harmonic_oscillator(1)
    res = []
    for L, xm in p["harmonic_grids"]:
        g = _pow2_grid((-L / 2, L / 2), h, xm)
        res.append(egorov_evolve(ham, a, p["s"], p["t"], g, h)[2])
        ctx.row(hamiltonian="harmonic", h=h, L=L, n=g.n[0], residual=res[-1])
    gain = res[0] / res[-1]
    monotone = all(r1 < r0 for r0, r1 in zip(res, res[1:]))
    ctx.check("harmonic residual falls under grid refinement at fixed h", gain,
              monotone and gain >= ctx.tol["harmonic_refinement_gain"],
              f"monotone, coarse/fine >= {ctx.tol['harmonic_refinement_gain']:g}")


@register(
    "egorov-quartic",
    "Egorov residual slope for the quartic oscillator.",
    _EGOROV_COLUMNS,
    range(5, 10),
    params=dict(_EGOROV_PARAMS),
    tolerances={"quartic_window": [1.7, 2.3]},
    min_points=4,
)
def _egorov_only(ctx):
    _egorov_quartic(ctx)


# ---------------------------------------------------------------------------
# 10. adiabatic two-level Egorov


def _adiabatic_symbol(p):
    M = np.array(p["matrix"], dtype=float)
    x0, p0, sigma = p["bump"]
    r0, r1 = p["cut"]

    def fa(x, xi):
        r = np.sqrt((x[..., 0] - x0) ** 2 + (xi[..., 0] - p0) ** 2)
        g = np.exp(-r ** 2 / (2 * sigma ** 2)) * smooth_step(r, r0, r1)
        return g[..., None, None] * M
    return MatrixSymbol(fa, 2, d=1)


@register(
    "adiabatic",
    "Time-averaged two-level Egorov residual on the upper band of a gapped rotating potential is O(h).",
    {"h": "semiclassical parameter", "n": "grid points per component",
     "residual": "||int theta U* Op(Pi a Pi) U - Op(transported symbol)||"},
    range(4, 9),
    params={"rho": 0.5, "k": 2.0, "box": [-float(np.pi), float(np.pi)], "band": 1, "matrix": [[1.0, 0.5], [0.5, -0.3]],
            "bump": [-0.3, 0.2, 0.25], "cut": [0.55, 0.9], "t0": 1.0, "tau": 0.2, "nodes": 16,
            "xi_min": 2.0, "table_p": [-1.0, 1.4], "table_pad": 0.3, "spacing": 0.01},
    tolerances={"window": [0.7, 1.3]},
    min_points=4,
    criterion=10,
)
def _adiabatic(ctx):
    p = ctx.p
    Vp = MatrixPotential.rotating(rho=p["rho"], k=p["k"])
    box = tuple(p["box"])
    sym = _adiabatic_symbol(p)
    theta = TimeWindow(p["t0"], p["tau"], p["nodes"])
    T = AdiabaticTransport(Vp, sym, theta, (box[0] - p["table_pad"], box[1] + p["table_pad"]), tuple(p["table_p"]),
                           p["band"], p["spacing"])
    res = []
    for h in ctx.hs:
        g = _pow2_grid(box, h, p["xi_min"])
        res.append(adiabatic_egorov_check(Vp, sym, theta, h, g, p["band"], transport=T))
        ctx.row(h=h, n=g.n[0], residual=res[-1])
    ctx.slope("adiabatic residual slope", ctx.hs, res, ctx.tol["window"])


# ---------------------------------------------------------------------------
# 11. Landau-Zener


@register(
    "landau-zener",
    "Surface-hopping upper-band population against the two-level grid solution for the conical "
    "crossing, over impact parameters delta * sqrt(h).",
    {"h": "semiclassical parameter", "delta": "impact parameter in units of sqrt(h)",
     "grid_n": "grid points per axis", "hopping": "hopping population of the other band",
     "grid": "grid population of the other band", "rel_diff": "|hopping - grid| / grid",
     "lz_factor": "exp(-pi delta^2 / v)"},
    range(6, 9),
    params={"velocity": 3.0, "t_final": 0.35, "start": -0.5, "deltas": [0.2, 0.4, 0.8],
            "nodes": [12, 4, 12, 4], "mode": "split"},
    tolerances={"rel_diff": 0.10},
    min_points=2,
    criterion=11,
)
def _landau_zener(ctx):
    p = ctx.p
    Vp = MatrixPotential.conical()
    v = p["velocity"]
    worst = 0.0
    table = {}
    for h in ctx.hs:
        for delta in p["deltas"]:
            q = [delta * np.sqrt(h), p["start"]]
            mom = [0.0, v]
            ens = wigner_ensemble(q, mom, h, band=-1, nodes=tuple(p["nodes"]))
            out = hopping_simulate(Vp, ens, p["t_final"], h, seed=ctx.seed, mode=p["mode"],
                                   threads=ctx.threads)
            hop = out.populations()[1]
            g = ensemble_grid([ens, out], h)
            ref = lz_grid_population(Vp, band_packet(Vp, g, q, mom, h, -1), p["t_final"])[1]
            rel = abs(hop - ref) / ref
            table[(h, delta)] = rel
            worst = max(worst, rel)
            ctx.row(h=h, delta=delta, grid_n=g.n[0], hopping=hop, grid=ref, rel_diff=rel,
                    lz_factor=float(np.exp(-np.pi * delta ** 2 / v)))
    ctx.at_most("hopping vs grid (max relative difference)", worst, ctx.tol["rel_diff"])
    ok = True
    for delta in p["deltas"]:
        seq = [table[(h, delta)] for h in ctx.hs]
        ok &= all(b <= a for a, b in zip(seq, seq[1:]))
    ctx.check("discrepancy non-increasing in 1/h", float(ok), ok, "every delta")


# ---------------------------------------------------------------------------
# 12. reproducibility


@register(
    "reproducibility",
    "Parallel and seeded components give bitwise identical output across reruns and thread counts.",
    {"component": "computation", "threads": "worker threads", "run": "repetition",
     "digest": "SHA-256 of the output arrays"},
    (6,),
    params={"thread_counts": [1, 3], "repeats": 2, "hop_h": 2.0 ** -6},
    tolerances={},
    criterion=12,
)
def _reproducibility(ctx):
    p = ctx.p
    h = ctx.hs[0]
    g = _packet_grid(h, (-3.0, 3.0), 1.6)
    psi = render(standard_packet([1.0], [0.0], h), g)
    ham = quartic_oscillator(1)
    Vp = MatrixPotential.conical()
    hh = p["hop_h"]
    ens = wigner_ensemble([0.4 * np.sqrt(hh), -0.5], [0.0, 3.0], hh, band=-1, nodes=(6, 3, 6, 3))

    def comp(name, threads):
        if name == "thawed-grid":
            return thawed_fio_apply(ham, psi, 1.0, threads=threads).samples
        if name == "frozen-stratified":
            return frozen_fio_apply(ham, psi, 1.0, threads=threads, method="stratified", seed=ctx.seed).samples
        out = hopping_simulate(Vp, ens, 0.35, hh, seed=ctx.seed, mode=name.split("-")[1], threads=threads)
        return np.concatenate([out.z.ravel(), out.weight, out.phase, out.band.astype(float)])

    for name in ("thawed-grid", "frozen-stratified", "hopping-split", "hopping-mc"):
        digests = set()
        for threads in p["thread_counts"]:
            for r in range(p["repeats"]):
                dg = _digest(comp(name, threads))
                digests.add(dg)
                ctx.row(component=name, threads=threads, run=r, digest=dg)
        ctx.check(f"{name} bitwise identical", len(digests), len(digests) == 1, "one distinct digest")
