"""Decoding tests: enumeration oracle, diversity mechanics, cache format."""
import itertools

import numpy as np
import pytest

from coordsum.decode import (BeamConfig, Candidate, CandidateSet, DecodeError,
                             beam_search, diverse_beam_search, read_candidate_cache,
                             seq_score, write_candidate_cache)
from coordsum.numerics import RngState, derive_seed

BOS, EOS = 1, 2


class TableScorer:
    """Deterministic random conditional table: logprobs keyed by (seed, prefix)."""

    def __init__(self, vocab_size: int, seed: int, forbid_sentinels: bool = True):
        self._vocab = vocab_size
        self._seed = seed
        self._forbid = forbid_sentinels

    @property
    def vocab_size(self) -> int:
        return self._vocab

    def prepare(self, source):
        return tuple(source)

    def _row(self, prefix) -> np.ndarray:
        rng = RngState(derive_seed(self._seed, repr(tuple(prefix))))
        logits = rng.normal((self._vocab,), scale=2.0)
        if self._forbid:
            logits[0] = logits[1] = -1e9  # keep PAD/BOS out of generation
        return logits - np.log(np.exp(logits - logits.max()).sum()) - logits.max()

    def next_logprobs(self, state, prefixes) -> np.ndarray:
        return np.stack([self._row(p) for p in prefixes])


class FixedRowScorer(TableScorer):
    """First-step logprobs overridden by an explicit row."""

    def __init__(self, vocab_size: int, seed: int, first_row: dict[int, float]):
        super().__init__(vocab_size, seed)
        self._first = first_row

    def _row(self, prefix) -> np.ndarray:
        row = super()._row(prefix)
        if len(prefix) == 1:
            for tok, lp in self._first.items():
                row[tok] = lp
        return row


def exhaustive_best(scorer: TableScorer, source, max_len: int, alpha: float):
    """Argmax of the length-normalized score over every reachable sequence."""
    tokens = [t for t in range(scorer.vocab_size) if t != EOS]
    best = None
    state = scorer.prepare(source)

    def score_path(path):
        total = 0.0
        logprobs = []
        for i in range(1, len(path)):
            row = scorer.next_logprobs(state, [path[:i]])[0]
            total += row[path[i]]
            logprobs.append(row[path[i]])
        return total, logprobs

    candidates = []
    for content_len in range(1, max_len + 1):
        for body in itertools.product(tokens, repeat=content_len - 1):
            candidates.append([BOS, *body, EOS])
    for body in itertools.product(tokens, repeat=max_len):
        candidates.append([BOS, *body])  # ran out of steps without EOS
    for path in candidates:
        total, _ = score_path(path)
        f = seq_score(total, len(path) - 1, alpha)
        if best is None or f > best[0]:
            best = (f, path)
    return best


# ---------------------------------------------------------------------------
# Scores and data contracts
# ---------------------------------------------------------------------------


def test_seq_score_hand_cases():
    assert seq_score(-2.0, 2, 1.0) == pytest.approx(-1.0, abs=1e-15)
    assert seq_score(-2.0, 2, 2.0) == pytest.approx(-0.5, abs=1e-15)
    assert seq_score(-3.7, 5, 0.0) == pytest.approx(-3.7, abs=1e-15)
    with pytest.raises(DecodeError):
        seq_score(-1.0, 0, 1.0)


def test_candidate_validation():
    good = Candidate(tokens=[BOS, 3, EOS], token_logprobs=[-0.5, -0.25],
                     sum_logprob=-0.75, f_score=-0.375, alpha=1.0)
    good.validate()
    assert good.content_length == 2
    with pytest.raises(DecodeError):
        Candidate(tokens=[BOS, 3, EOS], token_logprobs=[-0.5],
                  sum_logprob=-0.5, f_score=-0.5, alpha=1.0).validate()
    with pytest.raises(DecodeError):
        Candidate(tokens=[BOS, 3], token_logprobs=[-0.5],
                  sum_logprob=-0.9, f_score=-0.9, alpha=1.0).validate()


def test_candidate_set_ordering_check():
    def cand(q):
        return Candidate(tokens=[BOS, 3, EOS], token_logprobs=[-0.5, -0.5],
                         sum_logprob=-1.0, f_score=-0.5, alpha=1.0, quality=q)

    CandidateSet(0, [cand(0.9), cand(0.5)]).check_ordering()
    with pytest.raises(DecodeError):
        CandidateSet(0, [cand(0.5), cand(0.9)]).check_ordering()
    with pytest.raises(DecodeError):
        CandidateSet(0, [cand(0.5), cand(None)]).check_ordering()


def test_beam_config_invariants():
    with pytest.raises(DecodeError):
        BeamConfig(beam_width=0)
    with pytest.raises(DecodeError):
        BeamConfig(beam_width=4, n_groups=3)
    with pytest.raises(DecodeError):
        BeamConfig(beam_width=4, n_groups=8)
    with pytest.raises(DecodeError):
        BeamConfig(beam_width=4, n_candidates=5)
    with pytest.raises(DecodeError):
        BeamConfig(diversity_strength=-1.0)


# ---------------------------------------------------------------------------
# Beam search vs exhaustive enumeration
# ---------------------------------------------------------------------------


def test_full_width_beam_equals_exhaustive_argmax():
    for trial in range(50):
        vocab = 5
        max_len = 3 if trial % 2 == 0 else 4
        scorer = TableScorer(vocab, seed=1000 + trial)
        width = (vocab - 1) ** max_len  # every hypothesis survives every step
        cfg = BeamConfig(beam_width=width, max_len=max_len, length_penalty=1.0,
                         n_candidates=1)
        top = beam_search(scorer, [BOS, EOS], cfg)[0]
        best_f, best_path = exhaustive_best(scorer, [BOS, EOS], max_len, 1.0)
        assert list(top.tokens) == best_path
        assert top.f_score == pytest.approx(best_f, abs=1e-10)


def test_beam_alpha_zero_ranks_by_raw_sum():
    scorer = TableScorer(5, seed=77)
    cfg = BeamConfig(beam_width=8, max_len=4, length_penalty=0.0, n_candidates=8)
    pool = beam_search(scorer, [BOS, EOS], cfg)
    for cand in pool:
        assert cand.f_score == pytest.approx(cand.sum_logprob, abs=1e-12)
    sums = [c.sum_logprob for c in pool]
    assert sums == sorted(sums, reverse=True)


def test_beam_rejects_grouped_config():
    with pytest.raises(DecodeError):
        beam_search(TableScorer(5, 1), [BOS, EOS], BeamConfig(beam_width=4, n_groups=2))


def test_diverse_strength_zero_single_group_equals_beam_search():
    for trial in range(10):
        scorer = TableScorer(5, seed=300 + trial)
        cfg = BeamConfig(beam_width=6, max_len=4, length_penalty=1.0,
                         n_groups=1, diversity_strength=0.0, n_candidates=6)
        plain = beam_search(scorer, [BOS, EOS], cfg)
        diverse = diverse_beam_search(scorer, [BOS, EOS], cfg)
        seen = set()
        deduped = []
        for cand in plain:
            key = tuple(cand.tokens)
            if key not in seen:
                seen.add(key)
                deduped.append(key)
        assert [tuple(c.tokens) for c in diverse.candidates] == deduped[:6]


def test_diverse_groups_with_strength_zero_replicate_group_width_beams():
    scorer = TableScorer(5, seed=42)
    grouped = BeamConfig(beam_width=8, max_len=4, length_penalty=1.0,
                         n_groups=4, diversity_strength=0.0, n_candidates=4)
    narrow = BeamConfig(beam_width=2, max_len=4, length_penalty=1.0, n_candidates=2)
    diverse = diverse_beam_search(scorer, [BOS, EOS], grouped)
    plain = beam_search(scorer, [BOS, EOS], narrow)
    plain_keys = []
    for cand in plain:
        key = tuple(cand.tokens)
        if key not in plain_keys:
            plain_keys.append(key)
    assert [tuple(c.tokens) for c in diverse.candidates] == plain_keys[:4]


def test_diversity_penalty_splits_tied_first_tokens():
    # tokens 3 and 4 tie exactly at the first step; a strong penalty makes
    # the second group avoid the first group's pick
    scorer = FixedRowScorer(5, seed=9, first_row={3: np.log(0.45), 4: np.log(0.45)})
    cfg = BeamConfig(beam_width=2, max_len=3, length_penalty=1.0,
                     n_groups=2, diversity_strength=50.0, n_candidates=2)
    result = diverse_beam_search(scorer, [BOS, EOS], cfg)
    firsts = {c.tokens[1] for c in result.candidates}
    assert firsts == {3, 4}
    by_origin = {c.origin: c.tokens[1] for c in result.candidates}
    assert by_origin[0] == 3  # tie broken toward the lower token id
    assert by_origin[1] == 4  # penalty pushed the second group off token 3


def test_diverse_shortfall_when_model_collapses():
    # one token so dominant every group converges to the same sequence
    row = {3: np.log(0.999), 4: np.log(0.0005)}
    scorer = FixedRowScorer(5, seed=5, first_row=row)

    class Collapse(FixedRowScorer):
        def _row(self, prefix):
            out = np.full(self._vocab, -20.0)
            out[3] = np.log(0.05)
            out[EOS] = np.log(0.9)
            if len(prefix) == 1:
                out[3], out[EOS] = np.log(0.95), np.log(0.04)
            return out

    scorer = Collapse(5, seed=5, first_row={})
    cfg = BeamConfig(beam_width=4, max_len=3, length_penalty=1.0,
                     n_groups=1, diversity_strength=0.0, n_candidates=4)
    result = diverse_beam_search(scorer, [BOS, EOS], cfg)
    distinct = {tuple(c.tokens) for c in result.candidates}
    assert len(distinct) == len(result.candidates)
    if len(result.candidates) < 4:
        assert result.shortfall


def test_stored_logprobs_are_model_scores_not_penalized():
    scorer = FixedRowScorer(5, seed=9, first_row={3: np.log(0.45), 4: np.log(0.45)})
    cfg = BeamConfig(beam_width=2, max_len=3, length_penalty=1.0,
                     n_groups=2, diversity_strength=50.0, n_candidates=2)
    result = diverse_beam_search(scorer, [BOS, EOS], cfg)
    state = scorer.prepare([BOS, EOS])
    for cand in result.candidates:
        for i, logp in enumerate(cand.token_logprobs):
            row = scorer.next_logprobs(state, [list(cand.tokens[: i + 1])])[0]
            assert logp == pytest.approx(row[cand.tokens[i + 1]], abs=1e-12)
        cand.validate()


# ---------------------------------------------------------------------------
# Candidate cache file
# ---------------------------------------------------------------------------


def _scored_set(example_index=0):
    cands = [
        Candidate(tokens=[BOS, 3, 4, EOS], token_logprobs=[-0.1, -0.2, -0.3],
                  sum_logprob=-0.6, f_score=-0.2, alpha=1.0, origin=1,
                  quality=0.9, tie_group=0),
        Candidate(tokens=[BOS, 4, EOS], token_logprobs=[-0.4, -0.6],
                  sum_logprob=-1.0, f_score=-0.5, alpha=1.0, origin=0,
                  quality=0.4, tie_group=1),
    ]
    return CandidateSet(example_index=example_index, candidates=cands, shortfall=True)


def test_cache_roundtrip_preserves_everything(tmp_path):
    sets = [_scored_set(0), _scored_set(3)]
    path = tmp_path / "cands.jsonl"
    write_candidate_cache(path, sets)
    loaded = read_candidate_cache(path)
    assert len(loaded) == 2
    for orig, back in zip(sets, loaded):
        assert back.example_index == orig.example_index
        assert back.shortfall == orig.shortfall
        for c0, c1 in zip(orig.candidates, back.candidates):
            assert c1.tokens == c0.tokens
            assert c1.token_logprobs == c0.token_logprobs
            assert c1.sum_logprob == c0.sum_logprob
            assert c1.f_score == c0.f_score
            assert c1.alpha == c0.alpha
            assert c1.origin == c0.origin
            assert c1.quality == c0.quality
            assert c1.tie_group == c0.tie_group


def test_cache_bytes_are_deterministic(tmp_path):
    sets = [_scored_set()]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_candidate_cache(a, sets)
    write_candidate_cache(b, sets)
    assert a.read_bytes() == b.read_bytes()
