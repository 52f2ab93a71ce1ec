"""Binary checkpoint format: model config, step counter, named float64 tensors.

Layout (little-endian):

    magic "CSUMCKPT" | u32 version | config fields | u64 step_count
    | u32 tensor_count | tensors

Config fields are eight u32 values in declaration order followed by one f64
(dropout). Each tensor is u32 name length, UTF-8 name, u32 rank, u32 extents,
then raw float64 values in C order. Optimizer moments ride along as tensors
named ``opt.m.<param>`` / ``opt.v.<param>``, plus ``opt.hparams`` holding
(beta1, beta2, eps). Writing is name-sorted within each section, so
load -> save reproduces a file byte for byte.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .transformer import ModelConfig

MAGIC = b"CSUMCKPT"
VERSION = 1

_CONFIG_INT_FIELDS = (
    "vocab_size",
    "embed_dim",
    "n_heads",
    "n_encoder_layers",
    "n_decoder_layers",
    "ffn_dim",
    "max_source_len",
    "max_target_len",
)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Complete restorable training state."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    step_count: int = 0
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    adam_hparams: tuple[float, float, float] | None = None


def _write_tensor(out: list[bytes], name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    out.append(struct.pack("<I", len(encoded)))
    out.append(encoded)
    out.append(struct.pack("<I", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = sorted(ckpt.params.items())
    if ckpt.opt_m is not None or ckpt.opt_v is not None:
        if ckpt.opt_m is None or ckpt.opt_v is None or ckpt.adam_hparams is None:
            raise CheckpointError("optimizer state requires both moments and hyperparameters")
        tensors += [(f"opt.m.{k}", v) for k, v in sorted(ckpt.opt_m.items())]
        tensors += [(f"opt.v.{k}", v) for k, v in sorted(ckpt.opt_v.items())]
        tensors.append(("opt.hparams", np.asarray(ckpt.adam_hparams, dtype=np.float64)))
    out: list[bytes] = [MAGIC, struct.pack("<I", VERSION)]
    for name in _CONFIG_INT_FIELDS:
        out.append(struct.pack("<I", getattr(ckpt.config, name)))
    out.append(struct.pack("<d", ckpt.config.dropout))
    out.append(struct.pack("<Q", ckpt.step_count))
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(out, name, arr)
    return b"".join(out)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint file truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    ints = reader.unpack(f"<{len(_CONFIG_INT_FIELDS)}I")
    (dropout,) = reader.unpack("<d")
    config = ModelConfig(**dict(zip(_CONFIG_INT_FIELDS, ints)), dropout=dropout)
    (step_count,) = reader.unpack("<Q")
    (n_tensors,) = reader.unpack("<I")
    params: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    hparams: np.ndarray | None = None
    for _ in range(n_tensors):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(reader.take(count * 8), dtype="<f8").reshape(shape).astype(np.float64)
        if name == "opt.hparams":
            hparams = arr
        elif name.startswith("opt.m."):
            opt_m[name[len("opt.m.") :]] = arr
        elif name.startswith("opt.v."):
            opt_v[name[len("opt.v.") :]] = arr
        else:
            params[name] = arr
    if reader.pos != len(reader.data):
        raise CheckpointError("trailing bytes after last tensor")
    if opt_m or opt_v or hparams is not None:
        if not opt_m or not opt_v or hparams is None or len(hparams) != 3:
            raise CheckpointError("incomplete optimizer state")
        adam = (float(hparams[0]), float(hparams[1]), float(hparams[2]))
        return Checkpoint(config, params, step_count, opt_m, opt_v, adam)
    return Checkpoint(config, params, step_count)


def validate_checkpoint(ckpt: Checkpoint) -> None:
    """Shape- and finiteness-check a checkpoint against its own config."""
    from .transformer import parameter_shapes

    expected = parameter_shapes(ckpt.config)
    if set(ckpt.params) != set(expected):
        missing = sorted(set(expected) - set(ckpt.params))
        extra = sorted(set(ckpt.params) - set(expected))
        raise CheckpointError(f"parameter names mismatch (missing {missing}, extra {extra})")
    for name, arr in ckpt.params.items():
        if arr.shape != expected[name]:
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {expected[name]}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{name}: non-finite values")
    for moments in (ckpt.opt_m, ckpt.opt_v):
        if moments is None:
            continue
        if set(moments) != set(expected):
            raise CheckpointError("optimizer moments do not cover the parameters")
        for name, arr in moments.items():
            if arr.shape != expected[name]:
                raise CheckpointError(f"optimizer moment {name}: bad shape")
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"optimizer moment {name}: non-finite values")
