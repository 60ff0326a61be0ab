"""Command line interface: ``semiclab {run,run-all,list,describe,validate}``.

Exit codes: 0 when every check passes, 1 when a check fails, 2 for
invalid manifests or arguments, 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .experiments import (CATALOG, ManifestError, RunManifest, default_manifest, run_manifest,
                          validate_manifest, write_result)

ENV_OUT = "SEMICLAB_OUT"
ENV_THREADS = "SEMICLAB_THREADS"
EXIT_OK, EXIT_FAIL, EXIT_SCHEMA, EXIT_RUNTIME = 0, 1, 2, 3


def parse_ladder(text: str) -> list[float]:
    """Comma separated values; each is a number or ``2^-k``."""
    out = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        if tok.startswith("2^"):
            out.append(2.0 ** float(tok[2:]))
        else:
            out.append(float(tok))
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--h-ladder", help="comma separated h values, e.g. '2^-5,2^-6,2^-7,2^-8'")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./results)")
    p.add_argument("--threads", type=int, help=f"worker threads (default ${ENV_THREADS} or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semiclab", description="Semiclassical analysis experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one experiment or manifest file")
    p.add_argument("target", help="catalog experiment name or path to a JSON manifest")
    _common(p)
    p = sub.add_parser("run-all", help="run every acceptance experiment")
    p.add_argument("--extras", action="store_true", help="also run catalog entries outside the acceptance set")
    _common(p)
    sub.add_parser("list", help="list catalog experiments")
    p = sub.add_parser("describe", help="describe an experiment and print its default manifest")
    p.add_argument("experiment")
    p = sub.add_parser("validate", help="check a manifest file against the schema")
    p.add_argument("manifest")
    return parser


def _settings(args) -> dict:
    out = args.out if args.out is not None else os.environ.get(ENV_OUT, "results")
    threads = args.threads
    if threads is None and os.environ.get(ENV_THREADS):
        try:
            threads = int(os.environ[ENV_THREADS])
        except ValueError:
            raise ManifestError([f"{ENV_THREADS} must be an integer"]) from None
    return {"out": out, "threads": threads, "seed": args.seed,
            "h_ladder": None if args.h_ladder is None else parse_ladder(args.h_ladder)}


def _manifest(target: str, settings: dict) -> RunManifest:
    if target in CATALOG:
        data = default_manifest(target).to_dict()
    else:
        path = Path(target)
        if not path.exists():
            raise ManifestError([f"'{target}' is neither a catalog experiment nor a file"])
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError([f"not valid JSON: {exc}"]) from None
        if not isinstance(data, dict):
            raise ManifestError(["manifest must be a JSON object"])
    for key in ("out", "threads", "seed", "h_ladder"):
        if settings.get(key) is not None:
            data[key] = settings[key]
    return RunManifest.from_dict(data)


def _provenance(exc: BaseException) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    mods = [f for f in tb if "semiclab" in f.filename]
    frame = mods[-1] if mods else (tb[-1] if tb else None)
    where = f"{Path(frame.filename).stem}.{frame.name}" if frame else "?"
    return f"{type(exc).__name__} in {where}: {exc}"


def _execute(manifest: RunManifest):
    try:
        result = run_manifest(manifest)
    except ManifestError:
        raise
    except Exception as exc:  # reported with provenance, not re-raised
        return manifest, None, _provenance(exc)
    write_result(result)
    return manifest, result, None


def _report(manifest, result, error, stream) -> int:
    name = manifest.experiment
    if error is not None:
        print(f"ERROR {name}: {error}", file=stream)
        return EXIT_RUNTIME
    for c in result.checks:
        tag = "PASS" if c.passed else "FAIL"
        extra = f" [{c.detail}]" if c.detail else ""
        print(f"{tag} {name}: {c.name} = {c.value:.6g} (target {c.target}){extra}", file=stream)
    print(f"{'PASS' if result.passed else 'FAIL'} {name} -> {Path(manifest.out) / name} "
          f"(manifest {manifest.digest()[:12]})", file=stream)
    return EXIT_OK if result.passed else EXIT_FAIL


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = sys.stdout
    try:
        if args.command == "list":
            for name, spec in CATALOG.items():
                tag = f"[{spec.criterion}]" if spec.criterion else "[extra]"
                print(f"{name:22s} {tag:8s} {spec.description}", file=out)
            return EXIT_OK
        if args.command == "describe":
            if args.experiment not in CATALOG:
                print(f"unknown experiment '{args.experiment}'", file=sys.stderr)
                return EXIT_SCHEMA
            spec = CATALOG[args.experiment]
            print(f"{spec.name}: {spec.description}", file=out)
            print("columns:", file=out)
            for col, desc in spec.columns.items():
                print(f"  {col}: {desc}", file=out)
            print("default manifest:", file=out)
            print(default_manifest(spec.name).to_json(), end="", file=out)
            return EXIT_OK
        if args.command == "validate":
            try:
                data = json.loads(Path(args.manifest).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                print(f"invalid: {exc}", file=sys.stderr)
                return EXIT_SCHEMA
            errors = validate_manifest(data)
            for e in errors:
                print(f"invalid: {e}", file=sys.stderr)
            if not errors:
                print("valid", file=out)
            return EXIT_SCHEMA if errors else EXIT_OK
        settings = _settings(args)
        if args.command == "run":
            manifests = [_manifest(args.target, settings)]
        else:
            names = [n for n, s in CATALOG.items() if s.criterion is not None or args.extras]
            manifests = [_manifest(n, {**settings, "h_ladder": None}) for n in names]
            if settings["h_ladder"] is not None:
                print("note: --h-ladder is ignored by run-all", file=sys.stderr)
        workers = max(1, manifests[0].threads) if args.command == "run-all" else 1
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_execute, manifests))
        else:
            outcomes = [_execute(m) for m in manifests]
        codes = [_report(*o, out) for o in outcomes]
        return max(codes)
    except ManifestError as exc:
        for e in exc.errors:
            print(f"schema error: {e}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
