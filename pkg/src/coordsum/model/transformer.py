"""Pre-norm encoder-decoder transformer over the autograd tensor core.

Parameters live in a flat name -> float64 array dict so the optimizer and the
checkpoint format stay structure-agnostic. The forward functions are batched
(leading batch axis everywhere); single-sequence wrappers cover scoring and
per-step decoding. Output logits share the embedding matrix (tied softmax).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Sequence

import numpy as np

from ..corpus import TokenSequence
from ..numerics import (
    RngState,
    Tape,
    Tensor,
    embedding_lookup,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    gelu,
    reshape,
    softmax,
    transpose,
)

MASK_FILL = -1e9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    ffn_dim: int = 256
    max_source_len: int = 40
    max_target_len: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ModelError("vocab_size must cover the four sentinels and content")
        if self.embed_dim < 1 or self.embed_dim % self.n_heads != 0:
            raise ModelError("embed_dim must be a positive multiple of n_heads")
        for name in ("n_heads", "n_encoder_layers", "n_decoder_layers", "ffn_dim",
                     "max_source_len", "max_target_len"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for proj in ("q", "k", "v", "o"):
        shapes[f"{prefix}.w{proj}"] = (d, d)
        shapes[f"{prefix}.b{proj}"] = (d,)
    return shapes


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _ffn_shapes(prefix: str, d: int, f: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.w1": (d, f),
        f"{prefix}.b1": (f,),
        f"{prefix}.w2": (f, d),
        f"{prefix}.b2": (d,),
    }


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor's name and shape, in construction order."""
    d, f = cfg.embed_dim, cfg.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    for i in range(cfg.n_encoder_layers):
        shapes.update(_ln_shapes(f"enc{i}.ln1", d))
        shapes.update(_attn_shapes(f"enc{i}.attn", d))
        shapes.update(_ln_shapes(f"enc{i}.ln2", d))
        shapes.update(_ffn_shapes(f"enc{i}.ffn", d, f))
    shapes.update(_ln_shapes("enc.ln", d))
    for i in range(cfg.n_decoder_layers):
        shapes.update(_ln_shapes(f"dec{i}.ln1", d))
        shapes.update(_attn_shapes(f"dec{i}.self", d))
        shapes.update(_ln_shapes(f"dec{i}.ln2", d))
        shapes.update(_attn_shapes(f"dec{i}.cross", d))
        shapes.update(_ln_shapes(f"dec{i}.ln3", d))
        shapes.update(_ffn_shapes(f"dec{i}.ffn", d, f))
    shapes.update(_ln_shapes("dec.ln", d))
    return shapes


def init_parameters(cfg: ModelConfig, rng: RngState) -> dict[str, np.ndarray]:
    """Fresh parameter arrays; each tensor draws from its own named substream."""
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")):
            params[name] = np.zeros(shape)
        elif name == "embed":
            params[name] = rng.child(f"init:{name}").normal(shape, scale=cfg.embed_dim ** -0.5)
        else:
            fan_in, fan_out = shape
            scale = math.sqrt(2.0 / (fan_in + fan_out))
            params[name] = rng.child(f"init:{name}").normal(shape, scale=scale)
    return params


def count_parameters(params: dict[str, np.ndarray]) -> int:
    return int(sum(a.size for a in params.values()))


def wrap_parameters(tape: Tape, arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Register every parameter as an independent variable on ``tape``."""
    return {name: tape.leaf(arr) for name, arr in arrays.items()}


def const_parameters(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: Tensor.const(arr) for name, arr in arrays.items()}


@lru_cache(maxsize=8)
def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    """(max_len, d) sinusoid table: even columns sine, odd columns cosine."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, dim / d)
    table = np.zeros((max_len, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d // 2])
    table.setflags(write=False)
    return table


def _dropout(x: Tensor, rate: float, rng: RngState | None) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= rate).astype(np.float64)
    return x * Tensor.const(keep / (1.0 - rate))


def _affine_norm(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return layer_norm(x, axis=-1) * params[f"{prefix}.g"] + params[f"{prefix}.b"]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.shape
    return transpose(reshape(x, (b, l, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, hd = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, l, h * hd))


def _attention(
    params: dict[str, Tensor],
    prefix: str,
    x_query: Tensor,
    x_memory: Tensor,
    n_heads: int,
    mask: np.ndarray | None,
) -> Tensor:
    """Multi-head scaled dot-product attention; ``mask`` is True where blocked.

    ``x_memory`` may carry a batch dim of 1 against a larger query batch; the
    score matmul broadcasts, which keeps shared encoder memory cheap.
    """
    q = _split_heads(matmul(x_query, params[f"{prefix}.wq"]) + params[f"{prefix}.bq"], n_heads)
    k = _split_heads(matmul(x_memory, params[f"{prefix}.wk"]) + params[f"{prefix}.bk"], n_heads)
    v = _split_heads(matmul(x_memory, params[f"{prefix}.wv"]) + params[f"{prefix}.bv"], n_heads)
    head_dim = q.shape[-1]
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    if mask is not None:
        scores = masked_fill(scores, mask, MASK_FILL)
    ctx = matmul(softmax(scores, axis=-1), v)
    return matmul(_merge_heads(ctx), params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]


def _ffn(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    hidden = gelu(matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return matmul(hidden, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def _embed(params: dict[str, Tensor], cfg: ModelConfig, ids: np.ndarray, max_len: int) -> Tensor:
    length = ids.shape[-1]
    if length > max_len:
        raise ModelError(f"sequence length {length} exceeds configured maximum {max_len}")
    scaled = embedding_lookup(params["embed"], ids) * math.sqrt(cfg.embed_dim)
    pos = sinusoidal_positions(max_len, cfg.embed_dim)[:length]
    return scaled + Tensor.const(pos)


def _pad_key_mask(valid: np.ndarray) -> np.ndarray:
    # (B, Lk) validity -> (B, 1, 1, Lk) blocked-key mask
    return ~valid[:, None, None, :]


def _causal_mask(length: int) -> np.ndarray:
    return np.triu(np.ones((1, 1, length, length), dtype=bool), k=1)


def encode(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    src_ids: np.ndarray,
    src_valid: np.ndarray,
    dropout_rng: RngState | None = None,
) -> Tensor:
    """Encoder memory (B, Ls, d). ``src_valid`` is True at non-pad positions."""
    mask = _pad_key_mask(src_valid)
    x = _dropout(_embed(params, cfg, src_ids, cfg.max_source_len), cfg.dropout, dropout_rng)
    for i in range(cfg.n_encoder_layers):
        normed = _affine_norm(x, params, f"enc{i}.ln1")
        attn = _attention(params, f"enc{i}.attn", normed, normed, cfg.n_heads, mask)
        x = x + _dropout(attn, cfg.dropout, dropout_rng)
        x = x + _dropout(_ffn(params, f"enc{i}.ffn", _affine_norm(x, params, f"enc{i}.ln2")),
                         cfg.dropout, dropout_rng)
    return _affine_norm(x, params, "enc.ln")


def decode_logprobs(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    memory: Tensor,
    src_valid: np.ndarray,
    tgt_ids: np.ndarray,
    dropout_rng: RngState | None = None,
) -> Tensor:
    """Next-token log-probabilities (B, Lt, V) for decoder inputs ``tgt_ids``.

    Row t conditions on target positions <= t (causal self-attention) and on
    the non-pad source positions. Logits tie to the embedding matrix.
    """
    length = tgt_ids.shape[-1]
    causal = _causal_mask(length)
    cross = _pad_key_mask(src_valid)
    x = _dropout(_embed(params, cfg, tgt_ids, cfg.max_target_len), cfg.dropout, dropout_rng)
    for i in range(cfg.n_decoder_layers):
        normed = _affine_norm(x, params, f"dec{i}.ln1")
        self_attn = _attention(params, f"dec{i}.self", normed, normed, cfg.n_heads, causal)
        x = x + _dropout(self_attn, cfg.dropout, dropout_rng)
        cross_attn = _attention(params, f"dec{i}.cross", _affine_norm(x, params, f"dec{i}.ln2"),
                                memory, cfg.n_heads, cross)
        x = x + _dropout(cross_attn, cfg.dropout, dropout_rng)
        x = x + _dropout(_ffn(params, f"dec{i}.ffn", _affine_norm(x, params, f"dec{i}.ln3")),
                         cfg.dropout, dropout_rng)
    x = _affine_norm(x, params, "dec.ln")
    logits = matmul(x, transpose(params["embed"]))
    return log_softmax(logits, axis=-1)


def _as_batch(seq: TokenSequence) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray([seq], dtype=np.int64)
    return ids, np.ones_like(ids, dtype=bool)


def forward_teacher_forced(
    arrays: dict[str, np.ndarray],
    cfg: ModelConfig,
    source: TokenSequence,
    target: TokenSequence,
) -> np.ndarray:
    """Log-probability rows for one (source, target): row j scores target[j+1].

    ``target`` includes its leading BOS; the result has len(target) - 1 rows.
    """
    if len(target) < 2:
        raise ModelError("teacher forcing needs at least one transition")
    params = const_parameters(arrays)
    src_ids, src_valid = _as_batch(source)
    memory = encode(params, cfg, src_ids, src_valid)
    tgt_in = np.asarray([target[:-1]], dtype=np.int64)
    out = decode_logprobs(params, cfg, memory, src_valid, tgt_in)
    return out.values[0]


def next_token_distribution(
    arrays: dict[str, np.ndarray],
    cfg: ModelConfig,
    source: TokenSequence,
    prefix: TokenSequence,
) -> np.ndarray:
    """Log-probabilities (V,) of the token following ``prefix`` (BOS-led)."""
    if not prefix:
        raise ModelError("prefix must include the start sentinel")
    params = const_parameters(arrays)
    src_ids, src_valid = _as_batch(source)
    memory = encode(params, cfg, src_ids, src_valid)
    tgt_in = np.asarray([prefix], dtype=np.int64)
    out = decode_logprobs(params, cfg, memory, src_valid, tgt_in)
    return out.values[0, -1]


class TransformerScorer:
    """Decode-time adapter: caches encoder memory, batches prefix scoring."""

    def __init__(self, arrays: dict[str, np.ndarray], cfg: ModelConfig):
        self._params = const_parameters(arrays)
        self._cfg = cfg

    @property
    def vocab_size(self) -> int:
        return self._cfg.vocab_size

    def prepare(self, source: TokenSequence) -> Any:
        src_ids, src_valid = _as_batch(source)
        memory = encode(self._params, self._cfg, src_ids, src_valid)
        return Tensor.const(memory.values), src_valid

    def next_logprobs(self, state: Any, prefixes: Sequence[TokenSequence]) -> np.ndarray:
        memory, src_valid = state
        tgt_in = np.asarray(prefixes, dtype=np.int64)
        out = decode_logprobs(self._params, self._cfg, memory, src_valid, tgt_in)
        return out.values[:, -1, :]
