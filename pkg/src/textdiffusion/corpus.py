"""Tokenization, vocabulary, and synthetic parallel corpora.

Text is lowercased and whitespace-tokenized.  Target sequences are framed
as ``[CLS] body [SEP]`` and padded with ``[PAD]`` to a fixed length n;
source sequences are raw tokens terminated by ``[SEP]`` (a convention, the
upstream framing only fixes the target side).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "PAD", "CLS", "SEP", "UNK", "RESERVED_TOKENS",
    "CorpusError", "Vocabulary", "TokenSequence", "ParallelPair", "Batch",
    "tokenize", "build_vocab", "encode_pair", "decode_target", "assemble_batch",
    "synth_corpus", "batch_iter", "load_pairs_tsv", "save_pairs_tsv",
]

PAD = "[PAD]"
CLS = "[CLS]"
SEP = "[SEP]"
UNK = "[UNK]"
RESERVED_TOKENS = (PAD, CLS, SEP, UNK)


class CorpusError(ValueError):
    """Bad text, vocabulary, or framing input."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace."""
    return text.lower().split()


class Vocabulary:
    """Total token<->id bijection with reserved specials at ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED_TOKENS:
            raise CorpusError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("vocabulary contains duplicate tokens")
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def cls_id(self) -> int:
        return 1

    @property
    def sep_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def token_of(self, token_id: int) -> str:
        return self._tokens[token_id]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Sequence[int], strip_specials: bool = True) -> list[str]:
        tokens = [self._tokens[i] for i in ids]
        if strip_specials:
            tokens = [t for t in tokens if t not in RESERVED_TOKENS]
        return tokens

    def save(self, path: str | Path) -> None:
        """One token per line; the line number is the id."""
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(texts: Sequence[str]) -> Vocabulary:
    """Vocabulary over all tokens of `texts`, ordered by frequency then token.

    Rebuilding on the same corpus gives an identical mapping.
    """
    if not texts:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for text in texts:
        for token in tokenize(text):
            counts[token] = counts.get(token, 0) + 1
    if not counts:
        raise CorpusError("corpus contains no tokens")
    ordered = sorted(counts, key=lambda tok: (-counts[tok], tok))
    return Vocabulary(list(RESERVED_TOKENS) + ordered)


@dataclass
class TokenSequence:
    """Token ids with their pre-padding length."""

    ids: list[int]
    true_length: int
    role: str  # "input" | "output"


@dataclass
class ParallelPair:
    source: TokenSequence
    target: TokenSequence


def encode_pair(
    src_text: str,
    tgt_text: str,
    vocab: Vocabulary,
    n: int,
    max_source_len: int = 128,
    truncate: bool = False,
) -> ParallelPair:
    """Frame one (source, target) text pair.

    Target: [CLS] body [SEP] padded to exactly n ids.  Over-length input is
    rejected unless `truncate` is set; silent truncation is never applied.
    """
    src_tokens = tokenize(src_text)
    tgt_tokens = tokenize(tgt_text)
    src_limit = max_source_len - 1  # room for the [SEP] terminator
    tgt_limit = n - 2  # room for [CLS] and [SEP]
    if len(src_tokens) > src_limit:
        if not truncate:
            raise CorpusError(
                f"source has {len(src_tokens)} tokens, limit {src_limit} "
                f"(max_source_len={max_source_len})"
            )
        src_tokens = src_tokens[:src_limit]
    if len(tgt_tokens) > tgt_limit:
        if not truncate:
            raise CorpusError(
                f"target has {len(tgt_tokens)} tokens, limit {tgt_limit} (n={n})"
            )
        tgt_tokens = tgt_tokens[:tgt_limit]

    src_ids = vocab.encode(src_tokens) + [vocab.sep_id]
    tgt_ids = [vocab.cls_id] + vocab.encode(tgt_tokens) + [vocab.sep_id]
    true_length = len(tgt_ids)
    tgt_ids = tgt_ids + [vocab.pad_id] * (n - true_length)
    return ParallelPair(
        source=TokenSequence(ids=src_ids, true_length=len(src_ids), role="input"),
        target=TokenSequence(ids=tgt_ids, true_length=true_length, role="output"),
    )


def decode_target(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Text of a framed target: everything after [CLS] up to the first [SEP]."""
    tokens: list[str] = []
    for token_id in ids:
        if token_id == vocab.cls_id:
            continue
        if token_id == vocab.sep_id:
            break
        tokens.append(vocab.token_of(token_id))
    return " ".join(tokens)


_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


def _cipher(tokens: list[str], alphabet: Sequence[str]) -> list[str]:
    # Fixed substitution: rotate the alphabet by half its size.
    shift = len(alphabet) // 2
    index = {tok: i for i, tok in enumerate(alphabet)}
    return [alphabet[(index[t] + shift) % len(alphabet)] for t in tokens]


def synth_corpus(
    task: str,
    size: int,
    seed: int,
    alphabet_size: int = 16,
    min_len: int = 4,
    max_len: int = 10,
) -> list[tuple[str, str]]:
    """Deterministic toy parallel corpus for one of three tasks.

    copy: target equals source.  reverse: target is the source reversed.
    map-rule: a fixed token-substitution cipher plays the role of a toy
    translation.
    """
    if size < 1:
        raise CorpusError(f"corpus size must be >= 1, got {size}")
    if task not in ("copy", "reverse", "map-rule"):
        raise CorpusError(f"unknown task {task!r}; expected copy, reverse, or map-rule")
    if not 1 <= alphabet_size <= len(_ALPHABET):
        raise CorpusError(f"alphabet_size must be in [1, {len(_ALPHABET)}]")
    alphabet = list(_ALPHABET[:alphabet_size])
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(size):
        length = int(rng.integers(min_len, max_len + 1))
        src = [alphabet[int(i)] for i in rng.integers(0, alphabet_size, size=length)]
        if task == "copy":
            tgt = list(src)
        elif task == "reverse":
            tgt = src[::-1]
        else:
            tgt = _cipher(src, alphabet)
        pairs.append((" ".join(src), " ".join(tgt)))
    return pairs


@dataclass
class Batch:
    """Padded id arrays plus masks marking exactly the [PAD] positions."""

    src_ids: np.ndarray  # (B, m) int64
    src_pad_mask: np.ndarray  # (B, m) bool, True at padding
    tgt_ids: np.ndarray  # (B, n) int64
    tgt_pad_mask: np.ndarray  # (B, n) bool, True at padding
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.src_ids.shape[0]


def assemble_batch(pairs: Sequence[ParallelPair], order: np.ndarray, pad_id: int) -> Batch:
    """Pad the selected pairs into one batch (sources to the batch max)."""
    chosen = [pairs[i] for i in order]
    m = max(p.source.true_length for p in chosen)
    n = len(chosen[0].target.ids)
    src = np.full((len(chosen), m), pad_id, dtype=np.int64)
    src_mask = np.ones((len(chosen), m), dtype=bool)
    tgt = np.zeros((len(chosen), n), dtype=np.int64)
    tgt_mask = np.zeros((len(chosen), n), dtype=bool)
    for row, pair in enumerate(chosen):
        k = pair.source.true_length
        src[row, :k] = pair.source.ids
        src_mask[row, :k] = False
        tgt[row] = pair.target.ids
        tgt_mask[row, pair.target.true_length:] = True
    return Batch(src, src_mask, tgt, tgt_mask, indices=order.astype(np.int64))


def batch_iter(
    pairs: Sequence[ParallelPair],
    batch_size: int,
    seed: int,
    shuffle: bool = True,
    pad_id: int = 0,
) -> Iterator[Batch]:
    """One epoch of padded batches; the final partial batch is emitted."""
    if batch_size < 1:
        raise CorpusError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(pairs))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    for start in range(0, len(pairs), batch_size):
        yield assemble_batch(pairs, order[start:start + batch_size], pad_id)


def load_pairs_tsv(path: str | Path) -> list[tuple[str, str]]:
    """Read one pair per line, source<TAB>target, UTF-8."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusError(f"{path}:{lineno}: expected source<TAB>target, got {len(parts)} fields")
        rows.append((parts[0], parts[1]))
    if not rows:
        raise CorpusError(f"{path}: no pairs found")
    return rows


def save_pairs_tsv(pairs: Sequence[tuple[str, str]], path: str | Path) -> None:
    lines = [f"{src}\t{tgt}" for src, tgt in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
