"""Autoregressive inference: beam search, diverse beam search, sequence scoring.

Decoding works against any scorer exposing ``vocab_size``, ``prepare`` and
``next_logprobs``; the transformer adapter and table-driven test models both
satisfy it. Every tie is broken the same way (lower token id, then earlier
hypothesis), so candidate lists are byte-for-byte reproducible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Protocol, Sequence

import numpy as np

from .corpus import BOS, EOS, TokenSequence


class DecodeError(ValueError):
    pass


def seq_score(sum_logprob: float, content_length: int, alpha: float) -> float:
    """Length-normalized sequence log-probability: sum / length**alpha."""
    if content_length < 1:
        raise DecodeError("sequence score undefined for empty content")
    return sum_logprob / float(content_length) ** alpha


@dataclass(frozen=True)
class BeamConfig:
    beam_width: int = 4
    max_len: int = 16
    length_penalty: float = 2.0
    n_groups: int = 1
    diversity_strength: float = 1.0
    n_candidates: int = 4

    def __post_init__(self):
        if self.beam_width < 1:
            raise DecodeError("beam_width must be >= 1")
        if not 1 <= self.n_groups <= self.beam_width:
            raise DecodeError("n_groups must be in [1, beam_width]")
        if self.beam_width % self.n_groups != 0:
            raise DecodeError("beam_width must be divisible by n_groups")
        if self.n_candidates > self.beam_width:
            raise DecodeError("n_candidates cannot exceed beam_width")
        if self.diversity_strength < 0:
            raise DecodeError("diversity_strength must be >= 0")
        if self.max_len < 1:
            raise DecodeError("max_len must be >= 1")
        if self.length_penalty < 0:
            raise DecodeError("length_penalty must be >= 0")


@dataclass
class Candidate:
    """One decoded hypothesis; logprobs cover every generated token (no BOS)."""

    tokens: TokenSequence
    token_logprobs: list[float]
    sum_logprob: float
    f_score: float
    alpha: float
    origin: int = 0
    quality: float | None = None
    tie_group: int | None = None

    def validate(self) -> None:
        if len(self.token_logprobs) != len(self.tokens) - 1:
            raise DecodeError("token_logprobs must cover every token after BOS")
        if abs(self.sum_logprob - sum(self.token_logprobs)) > 1e-9:
            raise DecodeError("sum_logprob does not match its parts")

    @property
    def content_length(self) -> int:
        return len(self.token_logprobs)


@dataclass
class CandidateSet:
    """Candidates for one example, quality-descending once ordered."""

    example_index: int
    candidates: list[Candidate]
    shortfall: bool = False

    def check_ordering(self) -> None:
        qs = [c.quality for c in self.candidates]
        if any(q is None for q in qs):
            raise DecodeError("candidate set is not quality-scored")
        if any(qs[i] < qs[i + 1] for i in range(len(qs) - 1)):
            raise DecodeError("candidates are not quality-descending")


class Scorer(Protocol):
    """Next-token scoring interface for decoding."""

    @property
    def vocab_size(self) -> int: ...

    def prepare(self, source: TokenSequence) -> Any:
        """Per-source state (e.g. encoder memory) reused across steps."""
        ...

    def next_logprobs(self, state: Any, prefixes: Sequence[TokenSequence]) -> np.ndarray:
        """(len(prefixes), vocab_size) log-probabilities; prefixes share a length."""
        ...


@dataclass
class _Hyp:
    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]
    sum_logprob: float
    group: int


def _finish(hyp: _Hyp, alpha: float) -> Candidate:
    cand = Candidate(
        tokens=list(hyp.tokens),
        token_logprobs=list(hyp.logprobs),
        sum_logprob=hyp.sum_logprob,
        f_score=seq_score(hyp.sum_logprob, len(hyp.logprobs), alpha),
        alpha=alpha,
        origin=hyp.group,
    )
    cand.validate()
    return cand


def _rank_pool(pool: Iterable[Candidate]) -> list[Candidate]:
    return sorted(pool, key=lambda c: -c.f_score)  # stable: insertion order on ties


def _select_expansions(
    hyps: list[_Hyp],
    logprobs: np.ndarray,
    penalties: np.ndarray | None,
) -> list[tuple[int, int]]:
    """All continuations as (hyp index, token id) pairs, best first.

    Ranked by penalized cumulative score, then token id, then hypothesis
    index; callers walk the order and stop once their slots are filled.
    """
    n_hyp, n_vocab = logprobs.shape
    cum = np.array([h.sum_logprob for h in hyps])[:, None] + logprobs
    if penalties is not None:
        cum = cum - penalties[None, :]
    flat = cum.reshape(-1)
    token_ids = np.tile(np.arange(n_vocab), n_hyp)
    hyp_ids = np.repeat(np.arange(n_hyp), n_vocab)
    order = np.lexsort((hyp_ids, token_ids, -flat))
    return [(int(hyp_ids[i]), int(token_ids[i])) for i in order]


def _advance_group(
    hyps: list[_Hyp],
    logprobs: np.ndarray,
    penalties: np.ndarray | None,
    width: int,
    finished: list[_Hyp],
) -> tuple[list[_Hyp], list[int]]:
    """One decode step for one group: finish EOS picks, refill actives to width.

    Returns the new active list and the tokens this group selected (for the
    diversity count of later groups).
    """
    order = _select_expansions(hyps, logprobs, penalties)
    new_active: list[_Hyp] = []
    chosen_tokens: list[int] = []
    selected = 0
    for rank, (hi, tok) in enumerate(order):
        base = hyps[hi]
        logp = float(logprobs[hi, tok])
        ext = _Hyp(
            tokens=base.tokens + (tok,),
            logprobs=base.logprobs + (logp,),
            sum_logprob=base.sum_logprob + logp,
            group=base.group,
        )
        in_top = rank < width
        if tok == EOS:
            if in_top:
                finished.append(ext)
                chosen_tokens.append(tok)
                selected += 1
            # EOS below the selection cut is dropped, not finished
        else:
            if in_top:
                chosen_tokens.append(tok)
                selected += 1
                new_active.append(ext)
            elif len(new_active) < width:
                new_active.append(ext)  # refill a slot vacated by a finished hyp
        if len(new_active) >= width and selected >= width:
            break
    return new_active, chosen_tokens


def beam_search(scorer: Scorer, source: TokenSequence, cfg: BeamConfig) -> list[Candidate]:
    """Standard beam search; returns the final beam ordered by f_score descending.

    All hypotheses expand over the whole vocabulary; the top ``beam_width``
    continuations by cumulative log-probability survive each step. Finished
    hypotheses are set aside and their slots refilled. The final ranking uses
    the length-normalized score at ``cfg.length_penalty``.
    """
    if cfg.n_groups != 1:
        raise DecodeError("beam_search requires a single group; use diverse_beam_search")
    state = scorer.prepare(source)
    active = [_Hyp(tokens=(BOS,), logprobs=(), sum_logprob=0.0, group=0)]
    finished: list[_Hyp] = []
    for _ in range(cfg.max_len):
        if not active or len(finished) >= cfg.beam_width:
            break
        logprobs = scorer.next_logprobs(state, [list(h.tokens) for h in active])
        active, _ = _advance_group(active, logprobs, None, cfg.beam_width, finished)
    pool = [_finish(h, cfg.length_penalty) for h in finished]
    if len(pool) < cfg.beam_width:
        pool.extend(_finish(h, cfg.length_penalty) for h in active if h.logprobs)
    if not pool:
        raise DecodeError("no hypothesis produced any token")
    return _rank_pool(pool)


@dataclass
class DiverseResult:
    candidates: list[Candidate]
    shortfall: bool


def diverse_beam_search(scorer: Scorer, source: TokenSequence, cfg: BeamConfig) -> DiverseResult:
    """Group-wise beam search with a per-step token-repetition penalty.

    Groups decode sequentially at each time step; a group's token scores are
    penalized by ``diversity_strength`` times the count of that token already
    chosen at this step by earlier groups. The penalty steers selection only:
    stored log-probabilities are the model's own. Exact-duplicate sequences
    are removed before the top ``n_candidates`` by f_score are returned.
    """
    group_width = cfg.beam_width // cfg.n_groups
    state = scorer.prepare(source)
    groups: list[list[_Hyp]] = [
        [_Hyp(tokens=(BOS,), logprobs=(), sum_logprob=0.0, group=g)]
        for g in range(cfg.n_groups)
    ]
    finished_by_group: list[list[_Hyp]] = [[] for _ in range(cfg.n_groups)]
    n_vocab = scorer.vocab_size
    for _ in range(cfg.max_len):
        live = [g for g in range(cfg.n_groups) if groups[g] and len(finished_by_group[g]) < group_width]
        if not live:
            break
        batch: list[TokenSequence] = []
        offsets: dict[int, slice] = {}
        for g in live:
            offsets[g] = slice(len(batch), len(batch) + len(groups[g]))
            batch.extend(list(h.tokens) for h in groups[g])
        logprobs = scorer.next_logprobs(state, batch)
        token_counts = np.zeros(n_vocab)
        for g in range(cfg.n_groups):
            if g not in offsets:
                continue
            penalties = token_counts * cfg.diversity_strength if cfg.diversity_strength > 0 else None
            groups[g], chosen = _advance_group(
                groups[g],
                logprobs[offsets[g]],
                penalties,
                group_width,
                finished_by_group[g],
            )
            for tok in chosen:
                token_counts[tok] += 1
    pool: list[Candidate] = []
    for g in range(cfg.n_groups):
        pool.extend(_finish(h, cfg.length_penalty) for h in finished_by_group[g])
        if len(finished_by_group[g]) < group_width:
            # only a truncated group backfills from its unterminated hypotheses
            pool.extend(_finish(h, cfg.length_penalty) for h in groups[g] if h.logprobs)
    ranked = _rank_pool(pool)
    seen: set[tuple[int, ...]] = set()
    distinct = []
    for cand in ranked:
        key = tuple(cand.tokens)
        if key not in seen:
            seen.add(key)
            distinct.append(cand)
    out = distinct[: cfg.n_candidates]
    return DiverseResult(candidates=out, shortfall=len(out) < cfg.n_candidates)


# ---------------------------------------------------------------------------
# Candidate cache file: JSON Lines, the generation -> training contract
# ---------------------------------------------------------------------------


def candidate_to_json(cand: Candidate) -> dict:
    return {
        "tokens": list(cand.tokens),
        "token_logprobs": [float(x) for x in cand.token_logprobs],
        "sum_logprob": float(cand.sum_logprob),
        "f_score": float(cand.f_score),
        "alpha": float(cand.alpha),
        "quality": None if cand.quality is None else float(cand.quality),
        "group": int(cand.origin),
        "tie_group": cand.tie_group,
    }


def candidate_from_json(obj: dict) -> Candidate:
    cand = Candidate(
        tokens=[int(t) for t in obj["tokens"]],
        token_logprobs=[float(x) for x in obj["token_logprobs"]],
        sum_logprob=float(obj["sum_logprob"]),
        f_score=float(obj["f_score"]),
        alpha=float(obj["alpha"]),
        origin=int(obj["group"]),
        quality=obj.get("quality"),
        tie_group=obj.get("tie_group"),
    )
    cand.validate()
    return cand


def write_candidate_cache(path: str | Path, sets: Sequence[CandidateSet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cs in sets:
            record = {
                "example_index": cs.example_index,
                "shortfall": cs.shortfall,
                "candidates": [candidate_to_json(c) for c in cs.candidates],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_candidate_cache(path: str | Path) -> list[CandidateSet]:
    sets = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        obj = json.loads(line)
        sets.append(
            CandidateSet(
                example_index=int(obj["example_index"]),
                candidates=[candidate_from_json(c) for c in obj["candidates"]],
                shortfall=bool(obj.get("shortfall", False)),
            )
        )
    return sets
