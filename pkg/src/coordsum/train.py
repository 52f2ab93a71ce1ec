"""Training stages: likelihood pretraining, candidate generation, coordination.

The two trainers share one loop, one batching scheme, and one optimizer; with
the contrastive weight at zero the multi-task path performs the identical
arithmetic as plain likelihood training, so checkpoints match bit for bit.
All randomness (shuffles, subsampling, dropout) draws from named substreams of
the run seed, which makes every stage a pure function of its inputs.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .corpus import Dataset, Example, PAD, TokenSequence
from .decode import (
    BeamConfig,
    Candidate,
    CandidateSet,
    beam_search,
    diverse_beam_search,
    seq_score,
    write_candidate_cache,
)
from .metrics import order_candidates, rouge_l, rouge_n
from .model import (
    Checkpoint,
    ModelConfig,
    TransformerScorer,
    const_parameters,
    decode_logprobs,
    encode,
    wrap_parameters,
    xent_label_smoothed,
)
from .numerics import RngState, Tape, Tensor, derive_seed, gather_last, relu, take, tensor_sum

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite; message carries the step."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for both training stages.

    ``margin_lambda`` scales the rank-gap margin of the contrastive loss,
    ``length_alpha`` the length normalization of sequence scores, ``gamma``
    the contrastive weight in the combined objective.
    """

    seed: int = 0
    epochs: int = 1
    batch_size: int = 16
    lr_scale: float = 2e-3
    warmup_steps: int = 10000
    lr_mode: str = "schedule"
    constant_lr: float = 1e-6
    label_smoothing: float = 0.1
    margin_lambda: float = 0.001
    length_alpha: float = 2.0
    gamma: float = 100.0
    quality_metric: str = "rouge-mean"
    tie_tolerance: float = 0.0
    include_reference: bool = False
    beam: BeamConfig = field(default_factory=BeamConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_steps < 1:
            raise TrainError("epochs, batch_size, warmup_steps must be sensible")
        if self.lr_scale <= 0 or self.constant_lr <= 0:
            raise TrainError("learning rates must be positive")
        if self.lr_mode not in ("schedule", "constant"):
            raise TrainError("lr_mode must be 'schedule' or 'constant'")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise TrainError("label_smoothing must be in [0, 1)")
        if self.margin_lambda < 0 or self.length_alpha < 0 or self.gamma < 0:
            raise TrainError("margin_lambda, length_alpha, gamma must be >= 0")
        if self.tie_tolerance < 0:
            raise TrainError("tie_tolerance must be >= 0")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Inverse-square-root schedule with linear warmup; steps count from 1."""
    if step < 1:
        raise TrainError("learning-rate schedule is defined for steps >= 1")
    if cfg.lr_mode == "constant":
        return cfg.constant_lr
    return cfg.lr_scale * min(step ** -0.5, step * cfg.warmup_steps ** -1.5)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def _pad_rows(rows: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    valid = np.zeros((len(rows), width), dtype=bool)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = row
        valid[i, : len(row)] = True
    return ids, valid


def _batch_xent(
    params_t,
    model_cfg: ModelConfig,
    examples: Sequence[Example],
    beta: float,
    dropout_rng: RngState | None = None,
) -> tuple[Tensor, int]:
    """Summed label-smoothed cross-entropy over a batch, plus its token count."""
    src_ids, src_valid = _pad_rows([ex.source for ex in examples])
    tgt_in, _ = _pad_rows([ex.reference[:-1] for ex in examples])
    tgt_out, tgt_valid = _pad_rows([ex.reference[1:] for ex in examples])
    memory = encode(params_t, model_cfg, src_ids, src_valid, dropout_rng)
    log_dists = decode_logprobs(params_t, model_cfg, memory, src_valid, tgt_in, dropout_rng)
    loss = xent_label_smoothed(log_dists, tgt_out, beta, mask=tgt_valid.astype(np.float64))
    return loss, int(tgt_valid.sum())


def candidate_scores(
    params_t,
    model_cfg: ModelConfig,
    source: TokenSequence,
    candidates: Sequence[Candidate],
    alpha: float,
    dropout_rng: RngState | None = None,
) -> Tensor:
    """Length-normalized sequence scores (k,) of candidates under the model.

    Teacher-forces every candidate against one shared encoder memory; matches
    the decode-time score definition (sum of token log-probs over length**alpha).
    """
    src_ids, src_valid = _pad_rows([source])
    memory = encode(params_t, model_cfg, src_ids, src_valid, dropout_rng)
    tgt_in, _ = _pad_rows([c.tokens[:-1] for c in candidates])
    tgt_out, tgt_valid = _pad_rows([c.tokens[1:] for c in candidates])
    log_dists = decode_logprobs(params_t, model_cfg, memory, src_valid, tgt_in, dropout_rng)
    token_lp = gather_last(log_dists, tgt_out) * Tensor.const(tgt_valid.astype(np.float64))
    sums = tensor_sum(token_lp, axis=-1)
    lengths = np.array([float(c.content_length) for c in candidates])
    if np.any(lengths < 1):
        raise TrainError("candidate with empty content cannot be scored")
    return sums * Tensor.const(lengths ** -alpha)


# ---------------------------------------------------------------------------
# Losses over candidate sets
# ---------------------------------------------------------------------------


def contrastive_loss(f_scores: Tensor, tie_groups: Sequence[int], margin_lambda: float) -> Tensor:
    """Pairwise rank-margin hinge over quality-ordered scores.

    For positions i < j (quality descending), penalizes
    max(0, f_j - f_i + (j - i) * margin_lambda); pairs inside one tie group
    are skipped. Fewer than two rankable candidates yield a zero constant.
    """
    k = f_scores.shape[0]
    if k != len(tie_groups):
        raise TrainError("tie groups must cover every candidate")
    ii, jj = [], []
    for i in range(k):
        for j in range(i + 1, k):
            if tie_groups[i] != tie_groups[j]:
                ii.append(i)
                jj.append(j)
    if not ii:
        warnings.warn("contrastive loss skipped: no rankable candidate pair", RuntimeWarning, stacklevel=2)
        return Tensor.const(0.0)
    better = take(f_scores, np.array(ii))
    worse = take(f_scores, np.array(jj))
    margins = (np.array(jj, dtype=np.float64) - np.array(ii)) * margin_lambda
    return tensor_sum(relu(worse - better + Tensor.const(margins)))


def multi_task_loss(l_xent: Tensor, l_ctr: Tensor, gamma: float) -> Tensor:
    """Combined objective: cross-entropy plus gamma times the contrastive term."""
    return l_xent + l_ctr * gamma


# ---------------------------------------------------------------------------
# Candidate generation
# ---------------------------------------------------------------------------


def reference_candidate(
    arrays: dict[str, np.ndarray], model_cfg: ModelConfig, example: Example, alpha: float
) -> Candidate:
    """The reference packaged as a candidate, scored by teacher forcing."""
    params = const_parameters(arrays)
    src_ids, src_valid = _pad_rows([example.source])
    memory = encode(params, model_cfg, src_ids, src_valid)
    tgt_in, _ = _pad_rows([example.reference[:-1]])
    tgt_out, _ = _pad_rows([example.reference[1:]])
    log_dists = decode_logprobs(params, model_cfg, memory, src_valid, tgt_in)
    token_lp = gather_last(log_dists, tgt_out).values[0]
    total = float(token_lp.sum())
    cand = Candidate(
        tokens=list(example.reference),
        token_logprobs=[float(x) for x in token_lp],
        sum_logprob=total,
        f_score=seq_score(total, len(token_lp), alpha),
        alpha=alpha,
        origin=-1,
    )
    cand.validate()
    return cand


def build_candidate_sets(
    ckpt: Checkpoint,
    dataset: Dataset,
    cfg: TrainConfig,
    cache_path: str | Path | None = None,
) -> list[CandidateSet]:
    """Diverse-beam candidates for every example, quality-ordered and cached.

    With ``cfg.include_reference`` the gold summary joins the pool (unless a
    decoded candidate already equals it). Sets keep their example's position
    in the dataset as ``example_index``.
    """
    scorer = TransformerScorer(ckpt.params, ckpt.config)
    sets: list[CandidateSet] = []
    for idx, example in enumerate(dataset.examples):
        result = diverse_beam_search(scorer, example.source, cfg.beam)
        pool = result.candidates
        if cfg.include_reference:
            ref = reference_candidate(ckpt.params, ckpt.config, example, cfg.beam.length_penalty)
            if not any(c.tokens == ref.tokens for c in pool):
                pool = [ref] + pool
        ordered = order_candidates(
            CandidateSet(example_index=idx, candidates=pool, shortfall=result.shortfall),
            example.reference,
            cfg.quality_metric,
            cfg.tie_tolerance,
        )
        sets.append(ordered)
    if cache_path is not None:
        write_candidate_cache(cache_path, sets)
    return sets


# ---------------------------------------------------------------------------
# The shared training loop
# ---------------------------------------------------------------------------


def _adam_step(params, grads, m, v, t: int, lr: float) -> None:
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, g in grads.items():
        m[name] = ADAM_BETA1 * m[name] + (1.0 - ADAM_BETA1) * g
        v[name] = ADAM_BETA2 * v[name] + (1.0 - ADAM_BETA2) * g * g
        step_dir = (m[name] / bc1) / (np.sqrt(v[name] / bc2) + ADAM_EPS)
        params[name] = params[name] - lr * step_dir


def _iter_batches(n: int, batch_size: int, perm: np.ndarray) -> Iterator[np.ndarray]:
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def validation_loss(ckpt: Checkpoint, dataset: Dataset, cfg: TrainConfig) -> float:
    """Per-token smoothed cross-entropy on a held-out split."""
    params = const_parameters(ckpt.params)
    total, tokens = 0.0, 0
    for start in range(0, len(dataset.examples), cfg.batch_size):
        batch = dataset.examples[start : start + cfg.batch_size]
        loss, n = _batch_xent(params, ckpt.config, batch, cfg.label_smoothing)
        total += loss.item()
        tokens += n
    return total / tokens


def _train_loop(
    ckpt: Checkpoint,
    dataset: Dataset,
    cfg: TrainConfig,
    mode: str,
    sets_by_index: dict[int, CandidateSet] | None,
    valid_dataset: Dataset | None,
    log_path: str | Path | None,
) -> Checkpoint:
    model_cfg = ckpt.config
    params = {k: a.copy() for k, a in ckpt.params.items()}
    m = {k: a.copy() for k, a in ckpt.opt_m.items()} if ckpt.opt_m else {k: np.zeros_like(a) for k, a in params.items()}
    v = {k: a.copy() for k, a in ckpt.opt_v.items()} if ckpt.opt_v else {k: np.zeros_like(a) for k, a in params.items()}
    use_ctr = mode == "ctr" or (mode == "mul" and cfg.gamma > 0.0)
    step = ckpt.step_count
    shuffle_rng = RngState(derive_seed(cfg.seed, "train-shuffle"))
    log_records: list[dict] = []
    n = len(dataset.examples)
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.child(f"{ckpt.step_count}:{epoch}").permutation(n)
        epoch_losses: dict[str, list[float]] = {"l_xent": [], "l_ctr": [], "l_mul": []}
        for batch_idx in _iter_batches(n, cfg.batch_size, perm):
            step += 1
            lr = lr_at(step, cfg)
            tape = Tape()
            wrapped = wrap_parameters(tape, params)
            dropout_rng = RngState(derive_seed(cfg.seed, f"dropout:{step}")) if model_cfg.dropout > 0 else None
            batch = [dataset.examples[int(i)] for i in batch_idx]
            xent_sum, n_tokens = _batch_xent(wrapped, model_cfg, batch, cfg.label_smoothing, dropout_rng)
            l_xent = xent_sum * (1.0 / n_tokens)
            if use_ctr:
                ctr_terms = []
                for pos, i in enumerate(batch_idx):
                    cand_set = sets_by_index[int(i)]
                    f = candidate_scores(
                        wrapped, model_cfg, batch[pos].source, cand_set.candidates,
                        cfg.length_alpha, dropout_rng,
                    )
                    ctr_terms.append(contrastive_loss(f, [c.tie_group for c in cand_set.candidates], cfg.margin_lambda))
                l_ctr = _mean_terms(ctr_terms)
                loss = l_ctr if mode == "ctr" else multi_task_loss(l_xent, l_ctr, cfg.gamma)
                epoch_losses["l_ctr"].append(l_ctr.item())
                epoch_losses["l_mul"].append(multi_task_loss(l_xent, l_ctr, cfg.gamma).item())
            else:
                loss = l_xent
            epoch_losses["l_xent"].append(l_xent.item())
            if not np.isfinite(loss.values):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}, lr {lr:.3e}, mode {mode})"
                )
            if loss.node >= 0:
                tape.backward(loss)
                grads = {name: tape.grad(w) for name, w in wrapped.items()}
            else:
                # every candidate pair tied: the loss is a constant, gradient zero
                grads = {name: np.zeros_like(w.values) for name, w in wrapped.items()}
            _adam_step(params, grads, m, v, step, lr)
        record = {
            "step": step,
            "epoch": epoch,
            "mode": mode,
            "lr": lr_at(step, cfg) if step else None,
            "l_xent": float(np.mean(epoch_losses["l_xent"])),
            "l_ctr": float(np.mean(epoch_losses["l_ctr"])) if epoch_losses["l_ctr"] else None,
            "l_mul": float(np.mean(epoch_losses["l_mul"])) if epoch_losses["l_mul"] else None,
        }
        out = Checkpoint(model_cfg, params, step, m, v, (ADAM_BETA1, ADAM_BETA2, ADAM_EPS))
        if valid_dataset is not None:
            record["valid_loss"] = validation_loss(out, valid_dataset, cfg)
        log_records.append(record)
    if log_path is not None:
        with open(log_path, "a", encoding="utf-8") as fh:
            for record in log_records:
                fh.write(json.dumps(record, separators=(",", ":")) + "\n")
    return Checkpoint(model_cfg, params, step, m, v, (ADAM_BETA1, ADAM_BETA2, ADAM_EPS))


def _mean_terms(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def train_mle(
    ckpt: Checkpoint,
    dataset: Dataset,
    cfg: TrainConfig,
    valid_dataset: Dataset | None = None,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Label-smoothed likelihood training; returns a new checkpoint."""
    return _train_loop(ckpt, dataset, cfg, "mle", None, valid_dataset, log_path)


def _check_cache_alignment(dataset: Dataset, cand_sets: Sequence[CandidateSet]) -> dict[int, CandidateSet]:
    sets_by_index = {}
    for cand_set in cand_sets:
        if cand_set.example_index in sets_by_index:
            raise TrainError(f"candidate cache repeats example {cand_set.example_index}")
        cand_set.check_ordering()
        sets_by_index[cand_set.example_index] = cand_set
    missing = [i for i in range(len(dataset.examples)) if i not in sets_by_index]
    if missing:
        raise TrainError(f"candidate cache does not cover dataset (first missing: {missing[0]})")
    return sets_by_index


def train_brio(
    ckpt: Checkpoint,
    dataset: Dataset,
    cand_sets: Sequence[CandidateSet],
    cfg: TrainConfig,
    mode: str = "mul",
    valid_dataset: Dataset | None = None,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Coordination fine-tuning from quality-ordered candidate sets.

    ``mode`` "mul" optimizes cross-entropy plus gamma times the contrastive
    loss; "ctr" optimizes the contrastive loss alone. With gamma == 0 in
    "mul" mode the computation reduces to exactly the likelihood path.
    """
    if mode not in ("mul", "ctr"):
        raise TrainError("mode must be 'mul' or 'ctr'")
    sets_by_index = _check_cache_alignment(dataset, cand_sets)
    return _train_loop(ckpt, dataset, cfg, mode, sets_by_index, valid_dataset, log_path)


# ---------------------------------------------------------------------------
# Evaluation-stage helpers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RerankChoice:
    example_index: int
    candidate: Candidate
    f_score: float


def rerank_select(
    ckpt: Checkpoint, dataset: Dataset, cand_sets: Sequence[CandidateSet], alpha: float
) -> list[RerankChoice]:
    """Pick each set's best candidate by the model's length-normalized score.

    Scores are recomputed under ``ckpt`` (generation-time scores are ignored),
    so a coordination-trained model can rerank another model's candidates.
    Ties keep the earliest candidate in cache order.
    """
    params = const_parameters(ckpt.params)
    choices = []
    for cand_set in cand_sets:
        source = dataset.examples[cand_set.example_index].source
        f = candidate_scores(params, ckpt.config, source, cand_set.candidates, alpha).values
        best = int(np.argmax(f))  # argmax keeps the first maximizer
        choices.append(RerankChoice(cand_set.example_index, cand_set.candidates[best], float(f[best])))
    return choices


def evaluate_generation(
    ckpt: Checkpoint, dataset: Dataset, beam_cfg: BeamConfig
) -> dict:
    """Beam-decode every example and score against references.

    Returns per-example and mean ROUGE F1 values on a 0-100 scale, plus the
    mean best-hypothesis score.
    """
    eval_cfg = replace(beam_cfg, n_groups=1, n_candidates=beam_cfg.beam_width)
    scorer = TransformerScorer(ckpt.params, ckpt.config)
    per_example = []
    for example in dataset.examples:
        best = beam_search(scorer, example.source, eval_cfg)[0]
        per_example.append(
            {
                "rouge1": 100.0 * rouge_n(best.tokens, example.reference, 1).f1,
                "rouge2": 100.0 * rouge_n(best.tokens, example.reference, 2).f1,
                "rougeL": 100.0 * rouge_l(best.tokens, example.reference).f1,
                "f_score": best.f_score,
                "tokens": list(best.tokens),
            }
        )
    summary = {
        key: float(np.mean([row[key] for row in per_example]))
        for key in ("rouge1", "rouge2", "rougeL", "f_score")
    }
    summary["n_examples"] = len(per_example)
    return {"summary": summary, "per_example": per_example}


def loop_finetune(
    ckpt: Checkpoint,
    dataset: Dataset,
    cfg: TrainConfig,
    n_rounds: int,
    workdir: str | Path,
    mode: str = "mul",
    valid_dataset: Dataset | None = None,
) -> tuple[Checkpoint, list[dict]]:
    """Alternate candidate generation and coordination training.

    Each round regenerates candidates with the current model, fine-tunes on
    them, and stamps both artifacts into ``workdir`` as round<k> files.
    """
    from .model import save_checkpoint

    if n_rounds < 1:
        raise TrainError("need at least one round")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    current = ckpt
    rounds = []
    for r in range(1, n_rounds + 1):
        cache_path = workdir / f"round{r}.cands.jsonl"
        ckpt_path = workdir / f"round{r}.ckpt"
        sets = build_candidate_sets(current, dataset, cfg, cache_path)
        current = train_brio(current, dataset, sets, cfg, mode, valid_dataset,
                             workdir / f"round{r}.log.jsonl")
        save_checkpoint(ckpt_path, current)
        rounds.append(
            {
                "round": r,
                "cache": str(cache_path),
                "checkpoint": str(ckpt_path),
                "step_count": current.step_count,
                "shortfall_sets": sum(1 for s in sets if s.shortfall),
            }
        )
    return current, rounds


def few_shot_finetune(
    ckpt: Checkpoint,
    train_dataset: Dataset,
    eval_dataset: Dataset,
    cfg: TrainConfig,
    k: int,
    n_repeats: int = 3,
) -> dict:
    """Coordination fine-tuning on k sampled examples, repeated and averaged.

    Each repeat draws its own subsample (without replacement), builds fresh
    candidates, fine-tunes at a constant learning rate, and beam-decodes the
    evaluation split. Reports per-repeat and mean/stddev ROUGE.
    """
    if not 1 <= k <= len(train_dataset.examples):
        raise TrainError("subsample size must fit inside the training split")
    if n_repeats < 1:
        raise TrainError("need at least one repeat")
    few_cfg = replace(cfg, lr_mode="constant")
    repeats = []
    for r in range(n_repeats):
        rng = RngState(derive_seed(cfg.seed, f"fewshot:{r}"))
        idx = rng.sample_indices(len(train_dataset.examples), k)
        sub = Dataset(train_dataset.split, [train_dataset.examples[int(i)] for i in idx])
        sets = build_candidate_sets(ckpt, sub, few_cfg)
        tuned = train_brio(ckpt, sub, sets, few_cfg)
        scores = evaluate_generation(tuned, eval_dataset, few_cfg.beam)["summary"]
        repeats.append({"repeat": r, "indices": [int(i) for i in idx], **scores})
    agg = {}
    for key in ("rouge1", "rouge2", "rougeL"):
        vals = [rep[key] for rep in repeats]
        agg[f"{key}_mean"] = float(np.mean(vals))
        agg[f"{key}_std"] = float(np.std(vals))
    return {"k": k, "n_repeats": n_repeats, "repeats": repeats, "summary": agg}
