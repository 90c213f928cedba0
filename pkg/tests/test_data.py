import collections
import logging

import numpy as np
import pytest

from router_upcycling.data import (
    BOS,
    EOS,
    PAD,
    Corpus,
    CorpusError,
    batch_iter,
    encode,
    eval_batches,
    interleaved_chunks,
    load_corpus,
)


def test_encode_bytes():
    toks = encode("hé".encode())
    assert toks.tolist() == [BOS, 104, 0xC3, 0xA9, EOS]


def test_load_corpus_layout_and_empty_domain(tmp_path, caplog):
    (tmp_path / "b").mkdir()
    (tmp_path / "b" / "x.txt").write_text("bbbb")
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "x.txt").write_text("aa")
    (tmp_path / "a" / "ignored.md").write_text("zzz")
    (tmp_path / "empty").mkdir()
    (tmp_path / "empty" / "e.txt").write_text("")
    with caplog.at_level(logging.WARNING):
        c = load_corpus(tmp_path)
    assert c.names == ["a", "b"]
    assert "empty" in caplog.text
    assert c.domains["a"].tolist() == [BOS, 97, 97, EOS]


def test_load_corpus_fully_empty(tmp_path):
    (tmp_path / "x").mkdir()
    with pytest.raises(CorpusError):
        load_corpus(tmp_path)
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "missing")


def test_single_domain_labels():
    c = Corpus({"solo": encode(b"abc" * 500)})
    it = batch_iter(c, 64, 16, seed=0)
    assert {next(it).domain for _ in range(20)} == {"solo"}


def test_two_domains_balanced_over_long_horizon():
    c = Corpus({"x": encode(b"x" * 5000), "y": encode(b"y" * 5000)})
    it = batch_iter(c, 64, 16, seed=3)
    counts = collections.Counter(next(it).domain for _ in range(1000))
    assert abs(counts["x"] - counts["y"]) <= 0.05 * max(counts.values())


def test_batch_stream_replays():
    c = Corpus({"x": encode(bytes(range(200)) * 20), "y": encode(b"hello world " * 300)})
    a, b = batch_iter(c, 96, 32, seed=9), batch_iter(c, 96, 32, seed=9)
    for _ in range(30):
        ba, bb = next(a), next(b)
        assert ba.domain == bb.domain and np.array_equal(ba.tokens, bb.tokens)
    d = batch_iter(c, 96, 32, seed=10)
    assert any(not np.array_equal(next(d).tokens, next(a).tokens) for _ in range(10))


def test_batch_shapes_and_shift():
    c = Corpus({"x": encode(bytes(range(256)) * 10)})
    b = next(batch_iter(c, 128, 32, seed=0))
    assert b.tokens.shape == (4, 33)
    assert np.array_equal(b.inputs[:, 1:], b.targets[:, :-1])


def test_val_split_is_held_out():
    toks = encode(bytes(range(100)))
    c = Corpus({"x": toks}, val_frac=0.1)
    assert len(c.stream("x", "val")) == 10
    assert np.array_equal(np.concatenate([c.stream("x"), c.stream("x", "val")]), toks)


def test_interleaved_chunks_round_robin():
    c = Corpus({"a": encode(b"a" * 30), "b": encode(b"b" * 10)})
    labels = [d for d, _ in interleaved_chunks(c, 8, split="all")]
    assert labels[:4] == ["a", "b", "a", "b"]
    assert labels.count("a") == 4 and labels.count("b") == 2


def test_eval_batches_pad_and_cover():
    c = Corpus({"a": encode(b"q" * 50)}, val_frac=0.5)
    batches = eval_batches(c, "a", seq=8, rows=2, max_batches=10)
    flat = np.concatenate([b.tokens for b in batches])
    assert flat.shape[1] == 9
    assert (flat == PAD).any()
