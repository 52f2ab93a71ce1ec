"""Token-level training losses over predicted log-probability rows."""
from __future__ import annotations

import numpy as np

from ..numerics import Tensor, gather_last, tensor_sum
from .transformer import ModelError


def smoothed_target(vocab_size: int, gold_id: int, beta: float) -> np.ndarray:
    """Label-smoothed target distribution: 1 - beta on gold, rest spread evenly."""
    if not 0.0 <= beta < 1.0:
        raise ModelError("smoothing beta must be in [0, 1)")
    if vocab_size < 2:
        raise ModelError("smoothing needs at least two classes")
    if not 0 <= gold_id < vocab_size:
        raise ModelError("gold id outside vocabulary")
    dist = np.full(vocab_size, beta / (vocab_size - 1))
    dist[gold_id] = 1.0 - beta
    return dist


def xent_label_smoothed(
    log_dists: Tensor,
    targets: np.ndarray,
    beta: float,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Sum of per-position cross-entropy against smoothed targets.

    ``log_dists`` is (..., V); ``targets`` holds gold ids of shape
    log_dists.shape[:-1]; ``mask`` (same shape, optional) zeroes padded
    positions. Expanding the smoothed distribution gives, per position,
    -[(1 - beta - beta/(V-1)) * lp_gold + beta/(V-1) * sum_v lp_v].
    """
    if not 0.0 <= beta < 1.0:
        raise ModelError("smoothing beta must be in [0, 1)")
    vocab_size = log_dists.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != log_dists.shape[:-1]:
        raise ModelError("targets must match log-probability rows")
    off_weight = beta / (vocab_size - 1)
    gold_lp = gather_last(log_dists, targets)
    per_pos = gold_lp * (1.0 - beta - off_weight) + tensor_sum(log_dists, axis=-1) * off_weight
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != targets.shape:
            raise ModelError("mask must match target positions")
        per_pos = per_pos * Tensor.const(mask)
    return -tensor_sum(per_pos)
