"""Tokenization, vocabulary, and encoding tests."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from masm_lwr.corpus import (
    PAD_ID, UNK_ID, PAD_TOKEN, UNK_TOKEN,
    Vocabulary, build_vocab, encode, encode_batch, tokenize,
)


def test_tokenize_basic():
    assert tokenize("Red Dress") == ["red", "dress"]
    assert tokenize("") == []
    assert tokenize("  a \t b\nc ") == ["a", "b", "c"]


def test_vocab_reserved_ids():
    v = Vocabulary(["apple", "banana"])
    assert v.id_to_token[PAD_ID] == PAD_TOKEN
    assert v.id_to_token[UNK_ID] == UNK_TOKEN
    assert v.lookup("apple") == 2
    assert v.lookup("banana") == 3
    assert v.lookup("missing") == UNK_ID
    assert v.size == 4


def test_vocab_rejects_reserved_body_tokens():
    with pytest.raises(ValueError):
        Vocabulary(["<PAD>"])
    with pytest.raises(ValueError):
        Vocabulary(["ok", "<UNK>"])


def test_build_vocab_frequency_order_with_lexicographic_ties():
    streams = [["b", "b", "a", "a", "c"], ["c", "c", "d"]]
    v = build_vocab(streams)
    # c:3, a:2, b:2 (a before b lexicographically), d:1
    assert v.id_to_token[2:] == ["c", "a", "b", "d"]


def test_build_vocab_min_freq_and_max_vocab():
    streams = [["a", "a", "b"]]
    assert build_vocab(streams, min_freq=2).id_to_token[2:] == ["a"]
    assert build_vocab(streams, max_vocab=3).id_to_token[2:] == ["a"]
    assert build_vocab([], min_freq=1).size == 2
    with pytest.raises(ValueError):
        build_vocab(streams, min_freq=0)
    with pytest.raises(ValueError):
        build_vocab(streams, max_vocab=1)


def test_encode_pad_truncate_oov():
    v = Vocabulary(["red", "dress"])
    seq = encode(["red", "dress"], v, max_len=4)
    assert seq.ids.tolist() == [2, 3, PAD_ID, PAD_ID]
    assert seq.valid_len == 2
    seq = encode(["red", "odd", "dress"], v, max_len=2)
    assert seq.ids.tolist() == [2, UNK_ID]
    assert seq.valid_len == 2


def test_encode_empty_becomes_single_unk():
    v = Vocabulary(["red"])
    seq = encode([], v, max_len=3)
    assert seq.ids.tolist() == [UNK_ID, 0, 0]
    assert seq.valid_len == 1


def test_encode_batch_shapes():
    v = Vocabulary(["a", "b"])
    ids, valid = encode_batch([["a"], ["a", "b", "a"]], v, max_len=3)
    assert ids.shape == (2, 3)
    assert valid.tolist() == [1, 3]
    assert ids.dtype == np.int64


def test_vocab_save_load_round_trip(tmp_path):
    v = build_vocab([["red", "red", "dress"]])
    path = tmp_path / "vocab.txt"
    v.save(path)
    loaded = Vocabulary.load(path)
    assert loaded.id_to_token == v.id_to_token
    assert loaded.content_hash() == v.content_hash()


def test_vocab_load_rejects_missing_header(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("red\ndress\n", encoding="utf-8")
    with pytest.raises(ValueError):
        Vocabulary.load(path)


def test_content_hash_changes_with_content():
    assert Vocabulary(["a"]).content_hash() != Vocabulary(["b"]).content_hash()


@given(st.lists(st.sampled_from(["red", "dress", "blue", "zz"]), max_size=12),
       st.integers(min_value=1, max_value=8))
def test_encode_invariants(tokens, max_len):
    v = Vocabulary(["red", "dress", "blue"])
    seq = encode(tokens, v, max_len)
    assert 1 <= seq.valid_len <= max_len
    assert len(seq.ids) == max_len
    # PAD never inside the valid prefix, only after it
    assert np.all(seq.ids[:seq.valid_len] != PAD_ID)
    assert np.all(seq.ids[seq.valid_len:] == PAD_ID)
    # round trip for in-vocab prefixes
    if tokens and all(t != "zz" for t in tokens):
        decoded = [v.id_to_token[i] for i in seq.ids[:seq.valid_len]]
        assert decoded == tokens[:max_len]
