"""Byte-level tokenization, multi-domain corpora and deterministic batching."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .numeric import make_rng

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


def encode(raw: bytes) -> np.ndarray:
    """BOS + byte values + EOS."""
    body = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return np.concatenate([[BOS], body, [EOS]]).astype(np.int64)


@dataclass
class Corpus:
    """Token streams keyed by domain name; the tail of each stream is held out."""

    domains: dict[str, np.ndarray]
    val_frac: float = 0.1

    def __post_init__(self):
        if not self.domains:
            raise CorpusError("corpus has no non-empty domains")
        self.domains = dict(sorted(self.domains.items()))

    @property
    def names(self) -> list[str]:
        return list(self.domains)

    def stream(self, domain: str, split: str = "train") -> np.ndarray:
        toks = self.domains[domain]
        cut = len(toks) - int(len(toks) * self.val_frac)
        if split == "train":
            return toks[:cut]
        if split == "val":
            return toks[cut:]
        if split == "all":
            return toks
        raise ValueError(f"unknown split {split!r}")

    def num_tokens(self) -> int:
        return int(sum(len(v) for v in self.domains.values()))


def load_corpus(root, val_frac: float = 0.1) -> Corpus:
    """Read ``root/<domain>/*.txt``; empty domains are skipped with a warning."""
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} is not a directory")
    domains: dict[str, np.ndarray] = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(sub.rglob("*.txt"))
        parts = [encode(f.read_bytes()) for f in files if f.stat().st_size > 0]
        if not parts:
            log.warning("skipping empty domain directory %s", sub)
            continue
        domains[sub.name] = np.concatenate(parts)
    if not domains:
        raise CorpusError(f"corpus at {root} is empty")
    return Corpus(domains, val_frac)


@dataclass
class Batch:
    tokens: np.ndarray  # [B, seq + 1]
    domain: str

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.tokens[:, 1:]


def _window(stream: np.ndarray, start: int, length: int) -> np.ndarray:
    w = stream[start : start + length]
    if len(w) < length:
        w = np.concatenate([w, np.full(length - len(w), PAD, dtype=np.int64)])
    return w


def batch_iter(corpus: Corpus, batch_tokens: int, seq: int, seed: int, split: str = "train") -> Iterator[Batch]:
    """Endless replayable stream of single-domain batches.

    Domains take turns in rounds; each round visits every domain once in an
    order drawn from the seeded generator. Window offsets come from the same
    generator, so ``seed`` fixes the whole sequence.
    """
    if seq < 1 or batch_tokens < 1:
        raise ValueError("seq and batch_tokens must be positive")
    rows = max(1, batch_tokens // seq)
    rng = make_rng(seed)
    names = corpus.names
    streams = {n: corpus.stream(n, split) for n in names}
    for n, s in streams.items():
        if len(s) < 2:
            raise CorpusError(f"domain {n!r} has too few {split} tokens")
    while True:
        for di in rng.permutation(len(names)):
            name = names[di]
            s = streams[name]
            hi = max(1, len(s) - seq)
            starts = rng.integers(0, hi, size=rows)
            yield Batch(np.stack([_window(s, int(a), seq + 1) for a in starts]), name)


def chunks(stream: np.ndarray, seq: int) -> list[np.ndarray]:
    """Consecutive non-overlapping windows of length ``seq``; the last is PAD-filled."""
    return [_window(stream, a, seq) for a in range(0, len(stream), seq)]


def interleaved_chunks(corpus: Corpus, seq: int, split: str = "train") -> list[tuple[str, np.ndarray]]:
    """Round-robin over domains of consecutive windows, in sorted domain order."""
    per_domain = [[(n, c) for c in chunks(corpus.stream(n, split), seq)] for n in corpus.names]
    out = []
    for group in itertools.zip_longest(*per_domain):
        out.extend(item for item in group if item is not None)
    return out


def eval_batches(corpus: Corpus, domain: str, seq: int, rows: int, max_batches: int, split: str = "val") -> list[Batch]:
    """Deterministic non-overlapping evaluation windows from one domain."""
    stream = corpus.stream(domain, split)
    windows = [_window(stream, a, seq + 1) for a in range(0, max(1, len(stream) - 1), seq)]
    windows = windows[: rows * max_batches]
    return [Batch(np.stack(windows[i : i + rows]), domain) for i in range(0, len(windows), rows)]
