"""Run manifests and versioned CSV output."""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import platform
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "mflab-manifest-v1"
CSV_FORMAT = "mflab-csv-v1"
LONG_COLUMNS = ("quantity", "N", "t", "value", "stderr", "norm_kind", "grid", "seed")


class ManifestError(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class CsvWriter:
    """Append-only CSV with a format-tag header line; floats are written with ``repr``."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = tuple(columns)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(f"# {CSV_FORMAT}\n")
        self._fh.write(",".join(self.columns) + "\n")

    def row(self, *values, **named) -> None:
        if named:
            values = tuple(named.get(c) for c in self.columns)
        if len(values) != len(self.columns):
            raise ValueError("row length does not match columns")
        self._fh.write(",".join(_fmt(v) for v in values) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path) -> tuple[list[str], list[dict]]:
    """Read a tagged CSV back as (columns, rows of strings)."""
    with open(path) as fh:
        tag = fh.readline().strip()
        if tag != f"# {CSV_FORMAT}":
            raise ManifestError(f"{path}: missing format tag")
        cols = fh.readline().strip().split(",")
        rows = [dict(zip(cols, line.rstrip("\n").split(","))) for line in fh if line.strip()]
    return cols, rows


@dataclass
class Manifest:
    """Provenance record written before any output and finalized at the end."""

    experiment: str
    config: dict
    seed: int
    status: str = "running"
    version: str = __version__
    created: str = ""
    finished: str = ""
    wall_clock_s: float | None = None
    files: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    error: str | None = None
    environment: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"format": MANIFEST_FORMAT, "experiment": self.experiment, "status": self.status,
                "version": self.version, "seed": self.seed, "created": self.created,
                "finished": self.finished, "wall_clock_s": self.wall_clock_s,
                "config": self.config, "files": self.files, "fits": self.fits,
                "flags": self.flags, "error": self.error, "environment": self.environment}

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        if d.get("format") != MANIFEST_FORMAT:
            raise ManifestError("not an mflab manifest")
        try:
            return cls(d["experiment"], d["config"], d["seed"], d["status"], d["version"],
                       d.get("created", ""), d.get("finished", ""), d.get("wall_clock_s"),
                       d.get("files", {}), d.get("fits", {}), d.get("flags", {}),
                       d.get("error"), d.get("environment", {}))
        except KeyError as exc:
            raise ManifestError(f"manifest lacks {exc.args[0]!r}") from None

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n")
        os.replace(tmp, path)
        return path


def commit_tag() -> str | None:
    """Git revision of the source tree, or None outside a checkout."""
    try:
        res = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    if res.returncode != 0:
        return None
    return res.stdout.strip() or None


def start_manifest(directory, experiment: str, config: dict, seed: int) -> Manifest:
    m = Manifest(experiment, config, seed,
                 created=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                 environment={"python": platform.python_version(),
                              "machine": platform.machine(), "commit": commit_tag()})
    m.write(directory)
    return m


def finish_manifest(directory, m: Manifest, status: str, wall: float) -> None:
    d = Path(directory)
    m.status = status
    m.wall_clock_s = wall
    m.finished = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    m.files = {p.name: {"sha256": sha256_file(p), "bytes": p.stat().st_size}
               for p in sorted(d.iterdir())
               if p.is_file() and p.name != MANIFEST_NAME and not p.name.endswith(".tmp")}
    m.write(d)


def load_manifest(path) -> Manifest:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise ManifestError(f"{p}: cannot read ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{p}: corrupt manifest (line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ManifestError(f"{p}: corrupt manifest")
    return Manifest.from_dict(data)


def verify_files(directory, m: Manifest) -> list[str]:
    """Integrity problems: missing files and checksum mismatches."""
    d = Path(directory)
    problems = []
    for name, info in m.files.items():
        p = d / name
        if not p.exists():
            problems.append(f"missing file {name}")
        elif sha256_file(p) != info["sha256"]:
            problems.append(f"checksum mismatch for {name}")
    return problems
