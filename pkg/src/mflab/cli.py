"""Command-line harness: ``run``, ``inspect``, ``validate``, ``list-experiments``.

Exit codes: 0 success, 2 configuration or resource error, 3 numerical
failure, 4 inconclusive (signal below the Monte-Carlo noise floor).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigParseError, RunConfig, apply_override, load_yaml, resolve
from .equilibrium import EquilibriumError
from .estimators import EstimationError
from .experiments import REGISTRY, Context, ResourceError, params_for
from .manifest import (MANIFEST_NAME, ManifestError, finish_manifest, load_manifest,
                       start_manifest, verify_files)
from .meanfield import ResolutionError, TruncationError
from .particles import ConfigError, SimulationError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INCONCLUSIVE = 0, 2, 3, 4
THREADS_ENV = "MFLAB_THREADS"

log = logging.getLogger("mflab")

NUMERICAL_ERRORS = (SimulationError, ResolutionError, TruncationError, EstimationError,
                    EquilibriumError, FloatingPointError, np.linalg.LinAlgError)


def build_run_config(data: dict, overrides=()) -> RunConfig:
    for o in overrides or ():
        data = apply_override(data, o)
    if "threads" not in data and os.environ.get(THREADS_ENV):
        try:
            data = dict(data, threads=int(os.environ[THREADS_ENV]))
        except ValueError:
            raise ConfigParseError(f"{THREADS_ENV}: expected an integer") from None
    return resolve(data, params_for)


def _prepare_output(out: Path) -> None:
    if out.exists():
        if not out.is_dir():
            raise ConfigParseError(f"output_dir: {out} is not a directory")
        entries = list(out.iterdir())
        if entries and not (out / MANIFEST_NAME).exists():
            raise ConfigParseError(f"output_dir: {out} is not empty and holds no manifest")
        for p in entries:   # a previous run of this harness: replace its files
            if p.is_file():
                p.unlink()
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise ConfigParseError(f"output_dir: {out} is not writable")


def execute(run: RunConfig) -> tuple[int, Path]:
    """Run one experiment or tool; returns ``(exit_code, output_dir)``."""
    entry = REGISTRY[run.experiment]
    out = Path(run.output_dir)
    _prepare_output(out)
    manifest = start_manifest(out, run.experiment, run.to_dict(), run.seed)
    ctx = Context(out, run.seed, run.threads, run.memory_cap_mb)
    t0 = time.perf_counter()
    code, status = EXIT_OK, "failed"   # stays failed if an unexpected exception escapes
    try:
        outcome = entry.run(run.params, ctx)
        status = "complete"
        manifest.fits = _jsonable(outcome.fits)
        manifest.flags = _jsonable(outcome.flags)
        for line in outcome.lines:
            print(line)
        if outcome.inconclusive:
            code, status = EXIT_INCONCLUSIVE, "inconclusive"
    except (ResourceError, ConfigError, ConfigParseError) as exc:
        code, status, manifest.error = EXIT_CONFIG, "failed", f"{type(exc).__name__}: {exc}"
    except NUMERICAL_ERRORS as exc:
        code, status, manifest.error = EXIT_NUMERICAL, "failed", f"{type(exc).__name__}: {exc}"
    finally:
        ctx.close()
        finish_manifest(out, manifest, status, time.perf_counter() - t0)
    if manifest.error:
        print(f"error: {manifest.error}", file=sys.stderr)
    return code, out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else repr(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _flatten(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v and not any(isinstance(x, (dict, list)) for x in v.values()):
            yield key, v
        elif isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def inspect_manifest(path) -> tuple[str, list[str]]:
    """Human-readable summary and a list of integrity warnings."""
    p = Path(path)
    directory = p if p.is_dir() else p.parent
    m = load_manifest(p)
    lines = [f"experiment: {m.experiment}", f"status: {m.status}", f"seed: {m.seed}",
             f"version: {m.version} (commit {m.environment.get('commit') or 'unknown'})",
             f"wall clock: {m.wall_clock_s}"]
    if m.error:
        lines.append(f"error: {m.error}")
    lines.append("parameters:")
    for k, v in _flatten(m.config.get("params") or {}):
        lines.append(f"  {k} = {v}")
    if m.fits:
        lines.append("fits:")
        for k, v in m.fits.items():
            if isinstance(v, dict):
                bits = [f"{a}={x:.4g}" if isinstance(x, float) else f"{a}={x}"
                        for a, x in v.items() if not isinstance(x, (list, dict))]
                lines.append(f"  {k}: " + " ".join(bits))
            else:
                lines.append(f"  {k}: {v}")
    if m.flags:
        lines.append("flags:")
        lines.extend(f"  {k}: {v}" for k, v in m.flags.items())
    lines.append("files:")
    for name, info in m.files.items():
        lines.append(f"  {name}  {info['bytes']} bytes  sha256 {info['sha256'][:16]}")
    if m.status == "inconclusive":
        lines.append("note: outputs are complete but the signal is below the noise floor")
    warnings = []
    if m.status not in ("complete", "inconclusive"):
        warnings.append(f"incomplete outputs: run status is {m.status!r}")
    warnings.extend(f"integrity: {w}" for w in verify_files(directory, m))
    return "\n".join(lines), warnings


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mflab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run an experiment or tool")
    r.add_argument("target", nargs="?", help="config file or experiment name")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override; keys outside the run level go under params")
    r.add_argument("--dry-run", action="store_true", help="print the resolved config only")
    r.add_argument("--from-manifest", metavar="PATH", help="re-run the config in a manifest")
    v = sub.add_parser("validate", help="parse and bind a config without running")
    v.add_argument("target")
    v.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    i = sub.add_parser("inspect", help="summarize a run manifest")
    i.add_argument("manifest")
    sub.add_parser("list-experiments", help="list experiments and tools")
    return ap


def _load_target(target: str) -> dict:
    if target in REGISTRY:
        return {"experiment": target}
    return load_yaml(target)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.verb == "list-experiments":
            for e in REGISTRY.values():
                print(f"{e.name:24s} {'tool' if e.tool else 'experiment':10s} {e.summary}")
            return EXIT_OK
        if args.verb == "inspect":
            try:
                text, warns = inspect_manifest(args.manifest)
            except ManifestError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
            print(text)
            for w in warns:
                print(f"WARNING: {w}")
            return EXIT_OK
        if args.verb == "validate":
            run = build_run_config(_load_target(args.target), args.set)
            print(f"ok: {run.experiment}")
            return EXIT_OK
        if args.from_manifest:
            m = load_manifest(args.from_manifest)
            data = dict(m.config)
        elif args.target:
            data = _load_target(args.target)
        else:
            print("error: run needs a config, an experiment name, or --from-manifest",
                  file=sys.stderr)
            return EXIT_CONFIG
        run = build_run_config(data, args.set)
        if args.dry_run:
            sys.stdout.write(run.dump())
            return EXIT_OK
        code, out = execute(run)
        print(f"{run.experiment}: exit {code}, outputs in {out}")
        return code
    except (ConfigParseError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
