"""Vocabulary, tokenization, dataset files, and synthetic summarization tasks.

Token sequences are plain lists of int ids carrying explicit BOS/EOS
sentinels. The synthetic task is a keyword-extraction problem whose
reference is a pure function of the source, so ground truth is always
recomputable by an oracle.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .numerics import RngState, derive_seed

TokenSequence = list[int]

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Dense token-string <-> id mapping with fixed special ids 0..3."""

    tokens: tuple[str, ...]
    id_of: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if len(self.tokens) < 4 or tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise CorpusError("vocab must start with the four special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise CorpusError("vocab tokens must be distinct")
        object.__setattr__(self, "id_of", {tok: i for i, tok in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, words: list[str]) -> TokenSequence:
        """Map words to ids, unknown words to UNK; wrap with BOS/EOS."""
        return [BOS] + [self.id_of.get(w, UNK) for w in words] + [EOS]

    def decode(self, seq: TokenSequence) -> list[str]:
        """Inverse of encode for in-vocab words; sentinels and PAD are dropped."""
        return [self.tokens[t] for t in seq if t not in (PAD, BOS, EOS)]


def build_vocab(texts: list[list[str]], max_size: int) -> Vocab:
    """Specials plus the most frequent corpus tokens, ties broken lexicographically."""
    if not texts:
        raise CorpusError("empty corpus")
    if max_size < 4:
        raise CorpusError("max_size must leave room for the four specials")
    counts: dict[str, int] = {}
    for words in texts:
        for w in words:
            if w in SPECIAL_TOKENS:
                continue
            counts[w] = counts.get(w, 0) + 1
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocab(tokens=SPECIAL_TOKENS + tuple(ranked[: max_size - 4]))


def strip_sentinels(seq: TokenSequence) -> TokenSequence:
    """Content tokens only: BOS/EOS/PAD removed."""
    return [t for t in seq if t not in (PAD, BOS, EOS)]


@dataclass(frozen=True)
class Example:
    source: TokenSequence
    reference: TokenSequence

    def __post_init__(self):
        for name, seq in (("source", self.source), ("reference", self.reference)):
            if len(seq) < 2 or seq[0] != BOS or seq[-1] != EOS:
                raise CorpusError(f"{name} must be BOS ... EOS")
            if PAD in seq:
                raise CorpusError(f"{name} must not contain PAD")
        if len(strip_sentinels(self.reference)) < 1:
            raise CorpusError("reference needs at least one content token")


@dataclass(frozen=True)
class Dataset:
    split: str
    examples: list[Example]

    def __post_init__(self):
        if self.split not in ("train", "valid", "test"):
            raise CorpusError(f"unknown split {self.split!r}")
        if not self.examples:
            raise CorpusError("dataset must be non-empty")

    def __len__(self) -> int:
        return len(self.examples)


def validate_dataset(dataset: Dataset, vocab: Vocab) -> None:
    for ex in dataset.examples:
        for t in ex.source + ex.reference:
            if not 0 <= t < vocab.size:
                raise CorpusError(f"token id {t} out of range for vocab of {vocab.size}")


# ---------------------------------------------------------------------------
# Synthetic keyword-extraction task
#
# A source is a stream of filler tokens with occasional keywords of two
# kinds. Core keywords always belong in the reference. Optional keywords
# are kept only when a deterministic hash of (token, position, previous
# token) is even, so candidate outputs that differ on optional tokens span
# a graded quality range while the exact reference stays a pure function
# of the source. When paraphrasing is on, a core keyword at an odd content
# position is replaced by its partner form in the reference.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    n_keywords: int = 12
    n_optional: int = 12
    n_fillers: int = 60
    src_len_min: int = 10
    src_len_max: int = 16
    p_keyword: float = 0.15
    p_optional: float = 0.10
    max_salient: int = 7
    paraphrase: bool = False

    def __post_init__(self):
        if self.n_keywords < 1:
            raise CorpusError("salient set must be non-empty")
        if self.n_optional < 0:
            raise CorpusError("n_optional must be >= 0")
        if self.n_fillers < 1:
            raise CorpusError("need at least one filler token")
        if not 1 <= self.src_len_min <= self.src_len_max:
            raise CorpusError("bad source length range")
        if not 0.0 < self.p_keyword < 1.0:
            raise CorpusError("p_keyword must be in (0, 1)")
        if not 0.0 <= self.p_optional < 1.0 - self.p_keyword:
            raise CorpusError("p_optional must be in [0, 1 - p_keyword)")
        if self.p_optional > 0.0 and self.n_optional == 0:
            raise CorpusError("p_optional > 0 needs n_optional >= 1")
        if self.max_salient < 1:
            raise CorpusError("max_salient must be >= 1")

    def build_vocab(self) -> Vocab:
        keywords = [f"k{i:02d}" for i in range(self.n_keywords)]
        partners = [f"p{i:02d}" for i in range(self.n_keywords)]
        optionals = [f"o{i:02d}" for i in range(self.n_optional)]
        fillers = [f"f{i:03d}" for i in range(self.n_fillers)]
        return Vocab(tokens=SPECIAL_TOKENS + tuple(keywords + partners + optionals + fillers))

    # id-range helpers; layout is specials | keywords | partners | optional | fillers
    @property
    def keyword_lo(self) -> int:
        return 4

    @property
    def keyword_hi(self) -> int:
        return 4 + self.n_keywords

    @property
    def optional_lo(self) -> int:
        return 4 + 2 * self.n_keywords

    @property
    def optional_hi(self) -> int:
        return 4 + 2 * self.n_keywords + self.n_optional

    @property
    def filler_lo(self) -> int:
        return self.optional_hi

    def is_keyword(self, token_id: int) -> bool:
        return self.keyword_lo <= token_id < self.keyword_hi

    def is_optional(self, token_id: int) -> bool:
        return self.optional_lo <= token_id < self.optional_hi

    def partner_of(self, keyword_id: int) -> int:
        return keyword_id + self.n_keywords

    @staticmethod
    def keeps_optional(token_id: int, position: int, prev_id: int) -> bool:
        """Deterministic context hash deciding whether an optional token is kept."""
        digest = hashlib.blake2b(
            f"{token_id}:{position}:{prev_id}".encode(), digest_size=1
        ).digest()
        return digest[0] % 2 == 0

    def reference_for(self, source: TokenSequence) -> TokenSequence:
        """Oracle: recompute the reference from a source sequence."""
        content = strip_sentinels(source)
        out = []
        for pos, tok in enumerate(content):
            if self.is_keyword(tok):
                if self.paraphrase and pos % 2 == 1:
                    out.append(self.partner_of(tok))
                else:
                    out.append(tok)
            elif self.is_optional(tok):
                prev = content[pos - 1] if pos > 0 else BOS
                if self.keeps_optional(tok, pos, prev):
                    out.append(tok)
        return [BOS] + out + [EOS]


def generate_synthetic_dataset(
    seed: int,
    n_examples: int,
    task_spec: SyntheticTaskSpec,
    split: str = "train",
) -> Dataset:
    """Deterministic synthetic dataset.

    Sources are resampled until they contain at least one core keyword and
    their reference has between 1 and max_salient content tokens.
    """
    if n_examples < 1:
        raise CorpusError("n_examples must be >= 1")
    spec = task_spec
    rng = RngState(derive_seed(seed, f"synthetic:{split}"))
    examples: list[Example] = []
    while len(examples) < n_examples:
        length = int(rng.integers(spec.src_len_min, spec.src_len_max + 1))
        u = rng.uniform((length,))
        kw_draws = rng.integers(spec.keyword_lo, spec.keyword_hi, size=length)
        opt_draws = rng.integers(spec.optional_lo, max(spec.optional_hi, spec.optional_lo + 1), size=length)
        filler_draws = rng.integers(spec.filler_lo, spec.filler_lo + spec.n_fillers, size=length)
        content = []
        for i in range(length):
            if u[i] < spec.p_keyword:
                content.append(int(kw_draws[i]))
            elif u[i] < spec.p_keyword + spec.p_optional:
                content.append(int(opt_draws[i]))
            else:
                content.append(int(filler_draws[i]))
        source = [BOS] + content + [EOS]
        reference = spec.reference_for(source)
        n_core = sum(1 for t in content if spec.is_keyword(t))
        if n_core < 1 or not 1 <= len(reference) - 2 <= spec.max_salient:
            continue
        examples.append(Example(source=source, reference=reference))
    return Dataset(split=split, examples=examples)


# ---------------------------------------------------------------------------
# Plain-text interchange files
# ---------------------------------------------------------------------------


def save_dataset_tsv(dataset: Dataset, vocab: Vocab, path: str | Path) -> None:
    """One example per line: source words TAB reference words, space separated."""
    lines = []
    for ex in dataset.examples:
        src = " ".join(vocab.tokens[t] for t in strip_sentinels(ex.source))
        ref = " ".join(vocab.tokens[t] for t in strip_sentinels(ex.reference))
        lines.append(f"{src}\t{ref}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_dataset_tsv(path: str | Path, vocab: Vocab, split: str) -> Dataset:
    examples = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusError(f"{path}:{lineno}: expected exactly one TAB")
        src_words, ref_words = (p.split(" ") if p else [] for p in parts)
        examples.append(Example(source=vocab.encode(src_words), reference=vocab.encode(ref_words)))
    return Dataset(split=split, examples=examples)


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    """One token per line; line number is the id; specials occupy lines 0-3."""
    Path(path).write_text("".join(t + "\n" for t in vocab.tokens), encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    if len(tokens) < 4:
        raise CorpusError("vocab file must contain at least the four specials")
    if tuple(tokens[:4]) != SPECIAL_TOKENS:
        raise CorpusError("vocab file must start with PAD, BOS, EOS, UNK tokens")
    return Vocab(tokens=tuple(tokens))
