"""Manifest, fresh-output, and lock behavior."""
import hashlib
import json

import pytest

from coordsum.manifest import (
    HASH_ALGORITHM,
    LOCK_NAME,
    HashMismatch,
    LockHeld,
    ManifestError,
    OutputExists,
    file_hash,
    output_lock,
    prepare_out_dir,
    read_manifest,
    require_fresh,
    verify_inputs,
    write_manifest,
)


def test_file_hash_matches_hashlib(tmp_path):
    p = tmp_path / "f.bin"
    p.write_bytes(b"abc" * 1000)
    assert file_hash(p) == hashlib.sha256(b"abc" * 1000).hexdigest()


def test_write_and_read_manifest_roundtrip(tmp_path):
    a = tmp_path / "a.txt"
    b = tmp_path / "b.txt"
    a.write_text("in")
    b.write_text("out")
    path = tmp_path / "manifest.json"
    record = write_manifest(path, [a], [b], {"sec": {"k": "v"}}, seed=7)
    loaded = read_manifest(path)
    assert loaded == record
    assert loaded["algorithm"] == HASH_ALGORITHM
    assert loaded["seed"] == 7
    assert loaded["inputs"][str(a)] == file_hash(a)
    assert loaded["outputs"][str(b)] == file_hash(b)


def test_manifest_is_byte_deterministic(tmp_path):
    a = tmp_path / "a.txt"
    a.write_text("x")
    p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
    write_manifest(p1, [a], [], {"s": {"k": "1"}}, seed=0)
    write_manifest(p2, [a], [], {"s": {"k": "1"}}, seed=0)
    assert p1.read_bytes() == p2.read_bytes()


def test_read_manifest_rejects_garbage(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{not json")
    with pytest.raises(ManifestError):
        read_manifest(p)
    p.write_text(json.dumps({"algorithm": "md5"}))
    with pytest.raises(ManifestError):
        read_manifest(p)


def test_verify_inputs_detects_drift(tmp_path):
    a = tmp_path / "a.txt"
    a.write_text("original")
    record = write_manifest(tmp_path / "m.json", [a], [], {}, seed=0)
    verify_inputs(record)  # unchanged passes
    a.write_text("tampered")
    with pytest.raises(HashMismatch):
        verify_inputs(record)
    a.unlink()
    with pytest.raises(HashMismatch):
        verify_inputs(record)


def test_require_fresh(tmp_path):
    fresh = tmp_path / "new.bin"
    assert require_fresh(fresh) == fresh
    fresh.write_text("x")
    with pytest.raises(OutputExists):
        require_fresh(fresh)


def test_prepare_out_dir(tmp_path):
    target = tmp_path / "deep" / "out"
    assert prepare_out_dir(target).is_dir()
    # empty (or lock-only) directories are fine, occupied ones are not
    (target / LOCK_NAME).write_text("1")
    prepare_out_dir(target)
    (target / "result.txt").write_text("x")
    with pytest.raises(OutputExists):
        prepare_out_dir(target)
    file_path = tmp_path / "plain.txt"
    file_path.write_text("x")
    with pytest.raises(OutputExists):
        prepare_out_dir(file_path)


def test_output_lock_excludes_second_writer(tmp_path):
    out = tmp_path / "out"
    with output_lock(out):
        assert (out / LOCK_NAME).is_file()
        with pytest.raises(LockHeld):
            with output_lock(out):
                pass
    # released on exit, and reacquirable
    assert not (out / LOCK_NAME).exists()
    with output_lock(out):
        pass


def test_output_lock_releases_on_error(tmp_path):
    out = tmp_path / "out"
    with pytest.raises(RuntimeError):
        with output_lock(out):
            raise RuntimeError("boom")
    assert not (out / LOCK_NAME).exists()
