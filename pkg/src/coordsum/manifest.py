"""Run manifests: content hashes tying each stage's inputs to its outputs.

Every CLI stage writes ``manifest.json`` into its output directory. The
manifest records the hash algorithm, the resolved configuration, the seed,
and a content hash per declared input and produced output, so a re-run can
be checked for drift file by file.
"""

from __future__ import annotations

import errno
import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path

from . import __version__


class ManifestError(ValueError):
    """Raised when a manifest cannot be written or fails verification."""


class HashMismatch(ManifestError):
    """Raised when a declared file's content hash no longer matches."""


class OutputExists(ManifestError):
    """Raised when a stage would overwrite an existing output path."""


class LockHeld(ManifestError):
    """Raised when another process owns the output directory."""

HASH_ALGORITHM = "sha256"
LOCK_NAME = ".coordsum.lock"


def file_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(
    path: str | Path,
    inputs: list[str | Path],
    outputs: list[str | Path],
    config: dict,
    seed: int,
) -> dict:
    """Hash all declared files and write the manifest JSON; returns the record."""
    record = {
        "algorithm": HASH_ALGORITHM,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {str(p): file_hash(p) for p in sorted(map(str, inputs))},
        "outputs": {str(p): file_hash(p) for p in sorted(map(str, outputs))},
    }
    text = json.dumps(record, sort_keys=True, indent=2) + "\n"
    Path(path).write_text(text, encoding="utf-8")
    return record


def read_manifest(path: str | Path) -> dict:
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest does not parse: {exc}") from exc
    if record.get("algorithm") != HASH_ALGORITHM:
        raise ManifestError(f"unsupported hash algorithm {record.get('algorithm')!r}")
    return record


def verify_inputs(record: dict) -> None:
    """Re-hash declared inputs; raise HashMismatch on the first changed file."""
    for name, expected in record.get("inputs", {}).items():
        if not Path(name).is_file():
            raise HashMismatch(f"declared input missing: {name}")
        actual = file_hash(name)
        if actual != expected:
            raise HashMismatch(f"input hash changed: {name}")


def require_fresh(path: str | Path) -> Path:
    """Fail rather than overwrite: output files must not pre-exist."""
    path = Path(path)
    if path.exists():
        raise OutputExists(f"output path already exists: {path}")
    return path


def prepare_out_dir(out_dir: str | Path) -> Path:
    """Create the output directory; pre-existing non-empty directories fail."""
    out_dir = Path(out_dir)
    if out_dir.exists():
        if not out_dir.is_dir():
            raise OutputExists(f"output path is not a directory: {out_dir}")
        if any(entry.name != LOCK_NAME for entry in out_dir.iterdir()):
            raise OutputExists(f"output directory not empty: {out_dir}")
    else:
        out_dir.mkdir(parents=True)
    return out_dir


@contextmanager
def output_lock(out_dir: str | Path):
    """One writer per output directory, enforced with an O_EXCL lock file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock_path = out_dir / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except OSError as exc:
        if exc.errno == errno.EEXIST:
            raise LockHeld(f"output directory is locked: {lock_path}") from exc
        raise
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield out_dir
    finally:
        try:
            lock_path.unlink()
        except FileNotFoundError:
            pass
