"""Run manifests, slope fits and the built-in experiment catalog.

Every catalog entry maps one acceptance property to a reproducible
computation: an h-ladder sweep (or a fixed set of probes), a CSV table
of raw results and a list of named checks with explicit pass windows.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

__all__ = [
    "ManifestError", "SlopeFit", "fit_slope", "RunManifest", "Check", "RunResult",
    "Experiment", "CATALOG", "default_manifest", "validate_manifest", "run_manifest",
    "write_result", "atomic_write",
]


class ManifestError(ValueError):
    """Invalid run manifest; ``errors`` lists every schema problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# slope fits


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares fit of ``log err = slope log h + c``.

    ``ci`` is the 95% interval of the slope (Student t on ``n - 2``
    degrees of freedom). ``floor_limited`` flags ladders whose error
    stops decreasing at the small-h end: the local slope between the two
    smallest ``h`` is below ``floor_slope``.
    """

    h: tuple
    err: tuple
    slope: float
    intercept: float
    ci: tuple
    residuals: tuple
    local_slopes: tuple
    floor_limited: bool
    window: tuple | None = None

    @property
    def passed(self) -> bool:
        if self.window is None:
            return True
        lo, hi = self.window
        return bool(lo <= self.slope <= hi)

    def to_dict(self) -> dict:
        return {"h": list(self.h), "err": list(self.err), "slope": self.slope,
                "intercept": self.intercept, "ci95": list(self.ci),
                "residuals": list(self.residuals), "local_slopes": list(self.local_slopes),
                "floor_limited": self.floor_limited,
                "window": None if self.window is None else list(self.window),
                "passed": self.passed}


def fit_slope(h, err=None, window=None, floor_slope: float = 0.1) -> SlopeFit:
    """Fit the log-log slope of an error ladder.

    Parameters
    ----------
    h : array_like
        Values of ``h``, or a sequence of ``(h, err)`` pairs when ``err``
        is omitted.
    err : array_like, optional
        Errors, all finite and positive.
    window : (float, float), optional
        Pass window for the slope.
    floor_slope : float
        Local slope below which the small-h end counts as floor limited.

    Raises
    ------
    ValueError
        Fewer than four points, non-positive errors or repeated ``h``.
    """
    if err is None:
        pairs = np.asarray(h, dtype=float)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError("expected (h, err) pairs")
        h, err = pairs[:, 0], pairs[:, 1]
    h = np.asarray(h, dtype=float).ravel()
    err = np.asarray(err, dtype=float).ravel()
    if h.size != err.size:
        raise ValueError("h and err differ in length")
    if h.size < 4:
        raise ValueError("a slope fit needs at least 4 ladder points")
    if not (np.all(np.isfinite(err)) and np.all(err > 0)):
        raise ValueError("errors must be finite and positive")
    if not (np.all(np.isfinite(h)) and np.all(h > 0)):
        raise ValueError("h must be finite and positive")
    order = np.argsort(h)
    h, err = h[order], err[order]
    if np.any(np.diff(h) <= 0):
        raise ValueError("repeated h values")
    x, y = np.log(h), np.log(err)
    X = np.stack([x, np.ones_like(x)], 1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    res = y - X @ coef
    dof = h.size - 2
    s2 = float(res @ res) / dof
    se = math.sqrt(s2 / float(np.sum((x - x.mean()) ** 2)))
    q = float(stats.t.ppf(0.975, dof))
    slope = float(coef[0])
    local = np.diff(y) / np.diff(x)
    return SlopeFit(tuple(h.tolist()), tuple(err.tolist()), slope, float(coef[1]),
                    (slope - q * se, slope + q * se), tuple(res.tolist()), tuple(local.tolist()),
                    bool(local[0] < floor_slope),
                    None if window is None else (float(window[0]), float(window[1])))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    """Complete description of one experiment run.

    ``params`` holds the experiment-specific model, grid, time and
    sampling settings; ``tolerances`` overrides pass windows and
    thresholds. The hash covers everything that can change numbers,
    so ``out`` and ``threads`` are excluded.
    """

    experiment: str
    h_ladder: list = field(default_factory=list)
    seed: int = 0
    threads: int = 1
    out: str = "results"
    params: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "h_ladder": list(self.h_ladder), "seed": self.seed,
                "threads": self.threads, "out": self.out, "params": copy.deepcopy(self.params),
                "tolerances": copy.deepcopy(self.tolerances)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        errors = validate_manifest(data)
        if errors:
            raise ManifestError(errors)
        spec = CATALOG[data["experiment"]]
        return cls(data["experiment"], [float(v) for v in data.get("h_ladder", spec.ladder())],
                   int(data.get("seed", 0)), int(data.get("threads", 1)),
                   str(data.get("out", "results")),
                   copy.deepcopy({**spec.params, **data.get("params", {})}),
                   copy.deepcopy({**spec.tolerances, **data.get("tolerances", {})}))

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError([f"not valid JSON: {exc}"]) from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text())

    def digest(self) -> str:
        """SHA-256 of the canonical JSON of the numeric content."""
        d = self.to_dict()
        d.pop("out")
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _same_kind(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list) and (not default or not value
                                            or all(_same_kind(v, default[0]) for v in value))
    if isinstance(default, dict):
        return isinstance(value, dict)
    return True


def validate_manifest(data) -> list[str]:
    """List of schema errors (empty when ``data`` is a valid manifest)."""
    if not isinstance(data, dict):
        return ["manifest must be a JSON object"]
    errors = []
    known = {"experiment", "h_ladder", "seed", "threads", "out", "params", "tolerances"}
    for key in sorted(set(data) - known):
        errors.append(f"unknown key '{key}'")
    name = data.get("experiment")
    if not isinstance(name, str):
        errors.append("'experiment' must be a string")
        return errors
    if name not in CATALOG:
        errors.append(f"unknown experiment '{name}' (see 'list')")
        return errors
    spec = CATALOG[name]
    if "h_ladder" in data:
        lad = data["h_ladder"]
        if not isinstance(lad, list) or not lad:
            errors.append("'h_ladder' must be a non-empty list")
        elif not all(isinstance(v, (int, float)) and not isinstance(v, bool) and 0 < v <= 1 for v in lad):
            errors.append("'h_ladder' entries must be numbers in (0, 1]")
        elif len(set(lad)) != len(lad):
            errors.append("'h_ladder' has repeated entries")
        elif len(lad) < spec.min_points:
            errors.append(f"'h_ladder' needs at least {spec.min_points} entries for '{name}'")
    if "seed" in data and not (isinstance(data["seed"], int) and not isinstance(data["seed"], bool)
                               and data["seed"] >= 0):
        errors.append("'seed' must be a non-negative integer")
    if "threads" in data and not (isinstance(data["threads"], int) and not isinstance(data["threads"], bool)
                                  and data["threads"] >= 1):
        errors.append("'threads' must be a positive integer")
    if "out" in data and not isinstance(data["out"], str):
        errors.append("'out' must be a string")
    for section, defaults in (("params", spec.params), ("tolerances", spec.tolerances)):
        block = data.get(section, {})
        if not isinstance(block, dict):
            errors.append(f"'{section}' must be an object")
            continue
        for key, value in block.items():
            if key not in defaults:
                errors.append(f"unknown {section[:-1]} '{key}' for '{name}'")
            elif not _same_kind(value, defaults[key]):
                errors.append(f"{section[:-1]} '{key}' has the wrong type")
    return errors


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class Check:
    """One named pass/fail statement with the measured value and its target."""

    name: str
    value: float
    target: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "target": self.target,
                "passed": self.passed, "detail": self.detail}


@dataclass
class RunResult:
    manifest: RunManifest
    rows: list
    columns: list
    checks: list
    fits: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> dict:
        return {"experiment": self.manifest.experiment, "manifest_sha256": self.manifest.digest(),
                "passed": self.passed, "checks": [c.to_dict() for c in self.checks],
                "fits": {k: v.to_dict() for k, v in self.fits.items()}}

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# manifest_sha256={self.manifest.digest()}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(row.get(c, "")) for c in self.columns])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_result(result: RunResult, out_dir=None) -> Path:
    """Write ``manifest.json``, ``results.csv`` and ``summary.json`` under
    ``out_dir/<experiment>``; returns that directory."""
    base = Path(out_dir if out_dir is not None else result.manifest.out) / result.manifest.experiment
    atomic_write(base / "manifest.json", result.manifest.to_json())
    atomic_write(base / "results.csv", result.csv_text())
    atomic_write(base / "summary.json",
                 json.dumps(_jsonable(result.summary()), indent=2, sort_keys=True) + "\n")
    return base


# ---------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class Experiment:
    """Catalog entry: defaults, CSV column schema and the computation."""

    name: str
    description: str
    columns: dict
    ladder_exponents: tuple
    func: Callable
    params: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    min_points: int = 1
    criterion: int | None = None

    def ladder(self) -> list:
        return [2.0 ** -k for k in self.ladder_exponents]


class Context:
    """Merged settings handed to an experiment function."""

    def __init__(self, manifest: RunManifest, spec: Experiment):
        self.manifest = manifest
        self.hs = sorted((float(v) for v in manifest.h_ladder), reverse=True)
        self.seed = manifest.seed
        self.threads = manifest.threads
        self.p = copy.deepcopy(spec.params)
        self.p.update(copy.deepcopy(manifest.params))
        self.tol = copy.deepcopy(spec.tolerances)
        self.tol.update(copy.deepcopy(manifest.tolerances))
        self.rows: list = []
        self.checks: list = []
        self.fits: dict = {}

    def row(self, **kw) -> None:
        self.rows.append(kw)

    def check(self, name: str, value, passed, target: str, detail: str = "") -> None:
        self.checks.append(Check(name, float(value), target, bool(passed), detail))

    def at_most(self, name: str, value, limit, detail: str = "") -> None:
        self.check(name, value, value <= limit, f"<= {limit:g}", detail)

    def slope(self, name: str, h, err, window) -> SlopeFit:
        fit = fit_slope(h, err, window)
        self.fits[name] = fit
        self.check(name, fit.slope, fit.passed, f"in [{window[0]:g}, {window[1]:g}]",
                   f"ci95=[{fit.ci[0]:.3f}, {fit.ci[1]:.3f}]"
                   + (" floor-limited" if fit.floor_limited else ""))
        return fit


CATALOG: dict[str, Experiment] = {}


def register(name, description, columns, ladder, params=None, tolerances=None,
             min_points=1, criterion=None):
    def deco(func):
        CATALOG[name] = Experiment(name, description, dict(columns), tuple(ladder), func,
                                   dict(params or {}), dict(tolerances or {}), min_points, criterion)
        return func
    return deco


def default_manifest(name: str, **overrides) -> RunManifest:
    """Default manifest of a catalog experiment with top-level overrides."""
    if name not in CATALOG:
        raise ManifestError([f"unknown experiment '{name}' (see 'list')"])
    spec = CATALOG[name]
    data = {"experiment": name, "h_ladder": spec.ladder()}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunManifest.from_dict(data)


def run_manifest(manifest: RunManifest) -> RunResult:
    """Run one manifest in memory."""
    errors = validate_manifest(manifest.to_dict())
    if errors:
        raise ManifestError(errors)
    spec = CATALOG[manifest.experiment]
    ctx = Context(manifest, spec)
    spec.func(ctx)
    return RunResult(manifest, ctx.rows, list(spec.columns), ctx.checks, ctx.fits)


from . import catalog as _catalog  # noqa: E402,F401  (registers the built-in experiments)
