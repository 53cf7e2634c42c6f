"""Tokenization, vocabulary management, and fixed-length id encoding.

Queries and product titles are lowercased and split on Unicode whitespace;
the vocabulary reserves id 0 for ``<PAD>`` and id 1 for ``<UNK>``. Encoded
sequences are truncated/padded to a fixed length and carry the count of
non-pad positions.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<PAD>"
UNK_TOKEN = "<UNK>"


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace. Total: empty text gives []."""
    return text.lower().split()


class Vocabulary:
    """Immutable token <-> id mapping with reserved PAD (0) and UNK (1)."""

    def __init__(self, tokens: list[str]):
        # `tokens` are the non-reserved entries, in id order starting at 2.
        self.id_to_token = [PAD_TOKEN, UNK_TOKEN] + list(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token[2:], start=2)}
        if PAD_TOKEN in self.token_to_id or UNK_TOKEN in self.token_to_id:
            raise ValueError("reserved tokens may not appear in the vocabulary body")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def content_hash(self) -> str:
        """Stable hash of the full token list; used to pair checkpoints with data."""
        h = hashlib.sha256()
        for tok in self.id_to_token:
            h.update(tok.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            lines = [line.rstrip("\n") for line in f]
        if lines[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError(f"vocabulary file {path} missing reserved header lines")
        return cls(lines[2:])


def build_vocab(
    token_streams: Iterable[Iterable[str]], min_freq: int = 1, max_vocab: int = 1_200_000
) -> Vocabulary:
    """Count tokens and keep the most frequent ones.

    Tokens with frequency >= min_freq are ordered by descending frequency
    (ties lexicographic), truncated to max_vocab - 2, and assigned ids from 2.
    An empty corpus yields a vocabulary of just PAD and UNK.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    if max_vocab < 2:
        raise ValueError(f"max_vocab must be >= 2, got {max_vocab}")
    counts: Counter[str] = Counter()
    for stream in token_streams:
        counts.update(stream)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(kept[: max_vocab - 2])


@dataclass(frozen=True)
class TextSequence:
    """Fixed-length id sequence; positions >= valid_len are PAD."""

    ids: np.ndarray  # shape (max_len,), int64
    valid_len: int

    def __post_init__(self):
        if not (1 <= self.valid_len <= len(self.ids)):
            raise ValueError(f"valid_len {self.valid_len} out of range for {len(self.ids)}")


def encode(tokens: Iterable[str], vocab: Vocabulary, max_len: int) -> TextSequence:
    """Map tokens to ids, truncate to max_len, pad with PAD.

    Out-of-vocabulary tokens become UNK. An empty token list encodes to a
    single UNK so that malformed inputs still score.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    ids = [vocab.lookup(tok) for tok in tokens][:max_len]
    if not ids:
        ids = [UNK_ID]
    valid_len = len(ids)
    arr = np.zeros(max_len, dtype=np.int64)
    arr[:valid_len] = ids
    arr.flags.writeable = False
    return TextSequence(ids=arr, valid_len=valid_len)


def encode_batch(token_lists: list[list[str]], vocab: Vocabulary, max_len: int):
    """Encode many token lists into (ids, valid_lens) arrays for batched scoring."""
    n = len(token_lists)
    ids = np.zeros((n, max_len), dtype=np.int64)
    valid = np.zeros(n, dtype=np.int64)
    for i, tokens in enumerate(token_lists):
        seq = encode(tokens, vocab, max_len)
        ids[i] = seq.ids
        valid[i] = seq.valid_len
    return ids, valid
