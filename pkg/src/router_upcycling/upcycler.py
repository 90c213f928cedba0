"""Dense-to-MoE conversion with routers initialized from attention heads.

Each layer's routers are built from the preceding attention sub-layer of the
same block: per-head query projections become router matrices and per-head
average keys become expert keys. Heads are concatenated pairwise, choosing the
most cosine-similar pairs first, until the target router dimension is reached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import (
    CheckpointError,
    DenseCheckpoint,
    MoECheckpoint,
    read_manifest,
    read_tensor_dir,
    write_tensor_dir,
)
from .config import ConfigError, ModelConfig, MoEConfig
from .data import PAD, Corpus, CorpusError, interleaved_chunks
from .dense_model import forward
from .numeric import cosine_similarity, make_rng


@dataclass
class HeadStats:
    """Per-layer query slices [h, head_dim, d_model] and mean keys [h, head_dim]."""

    wq: list[np.ndarray]
    k_avg: list[np.ndarray]
    token_count: int

    def __post_init__(self):
        if len(self.wq) != len(self.k_avg):
            raise ValueError("wq and k_avg disagree on layer count")
        for w, k in zip(self.wq, self.k_avg):
            if w.shape[0] != k.shape[0] or w.shape[1] != k.shape[1]:
                raise ValueError(f"head shapes disagree: wq {w.shape}, k_avg {k.shape}")
            if not np.all(np.isfinite(k)):
                raise ValueError("k_avg contains non-finite values")
        if self.token_count <= 0:
            raise ValueError("head statistics need a positive token count")

    @property
    def n_layers(self) -> int:
        return len(self.wq)

    @property
    def n_heads(self) -> int:
        return self.wq[0].shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq[0].shape[1]

    @property
    def d_model(self) -> int:
        return self.wq[0].shape[2]

    def save(self, path) -> Path:
        tensors = {}
        for i, (w, k) in enumerate(zip(self.wq, self.k_avg)):
            tensors[f"layer.{i}.wq"] = w
            tensors[f"layer.{i}.k_avg"] = k
        meta = {"kind": "head_stats", "token_count": self.token_count, "n_layers": self.n_layers}
        return write_tensor_dir(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "HeadStats":
        manifest = read_manifest(path)
        if manifest.get("kind") != "head_stats":
            raise CheckpointError(f"{path} is not a head-statistics directory")
        tensors = read_tensor_dir(path, manifest=manifest)
        n = manifest["n_layers"]
        return cls(
            [tensors[f"layer.{i}.wq"] for i in range(n)],
            [tensors[f"layer.{i}.k_avg"] for i in range(n)],
            int(manifest["token_count"]),
        )


def collect_key_stats(ckpt: DenseCheckpoint, corpus: Corpus, iters: int, batch: int, seq: int) -> HeadStats:
    """Average every head's key vectors over ``iters`` batches of ``batch`` x ``seq`` tokens.

    Windows are consecutive, interleaved round-robin across domains. PAD
    positions do not enter the mean.
    """
    if not ckpt.frozen:
        raise CheckpointError("key statistics must be collected from a frozen checkpoint")
    if iters < 1 or batch < 1 or seq < 1:
        raise ValueError("iters, batch and seq must be positive")
    cfg = ckpt.config
    if seq > cfg.seq_len:
        raise ValueError(f"seq {seq} exceeds model seq_len {cfg.seq_len}")
    windows = interleaved_chunks(corpus, seq)
    need = iters * batch
    if len(windows) < need:
        raise CorpusError(f"corpus exhausted: {len(windows)} windows of {seq} tokens, need {need}")

    sums = [np.zeros((cfg.n_heads, cfg.head_dim)) for _ in range(cfg.n_layers)]
    count = 0
    for it in range(iters):
        tokens = np.stack([w for _, w in windows[it * batch : (it + 1) * batch]])
        mask = (tokens != PAD).astype(np.float64)
        _, traces = forward(ckpt, tokens)
        for layer, tr in enumerate(traces):
            sums[layer] += np.einsum("bhtd,bt->hd", tr.keys, mask)
        count += int(mask.sum())
    if count == 0:
        raise CorpusError("no non-PAD tokens seen while collecting key statistics")

    d, h, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    wq = [np.array(ckpt.tensors[f"layer.{i}.attn.wq"]).reshape(h, hd, d) for i in range(cfg.n_layers)]
    return HeadStats(wq, [s / count for s in sums], count)


def greedy_pair(items) -> list[tuple[int, int]]:
    """Pair items greedily by descending cosine similarity.

    Returns pairs ``(i, j)`` with ``i < j`` in selection order; ties go to the
    lowest ``i``, then the lowest ``j``.
    """
    items = [np.asarray(v, dtype=np.float64).reshape(-1) for v in items]
    n = len(items)
    if n % 2:
        raise ValueError(f"greedy pairing needs an even number of items, got {n}")
    for v in items:
        if not np.any(v):
            raise ValueError("cannot pair a zero vector")
    iu, ju = np.triu_indices(n, 1)
    sims = np.array([cosine_similarity(items[i], items[j]) for i, j in zip(iu, ju)])
    free = np.ones(n, dtype=bool)
    pairs = []
    for _ in range(n // 2):
        masked = np.where(free[iu] & free[ju], sims, -np.inf)
        best = int(np.argmax(masked))
        i, j = int(iu[best]), int(ju[best])
        free[i] = free[j] = False
        pairs.append((i, j))
    return pairs


def concat_rounds(vectors: list[np.ndarray], rounds: int) -> list[tuple[int, ...]]:
    """Repeatedly pair and concatenate; returns the source indices of each final group."""
    items = [(np.asarray(v), (i,)) for i, v in enumerate(vectors)]
    for _ in range(rounds):
        pairs = greedy_pair([v for v, _ in items])
        items = [(np.concatenate([items[i][0], items[j][0]]), items[i][1] + items[j][1]) for i, j in pairs]
    return [g for _, g in items]


@dataclass
class RouterBank:
    """Per-layer router matrices [m, d', d] and expert keys [n, keys_per_expert, d'].

    ``router_groups`` and ``key_groups`` record which source (sub-)heads were
    concatenated into each router and key, for provenance checks.
    """

    router_mats: list[np.ndarray]
    expert_keys: list[np.ndarray]
    router_groups: list[list[tuple[int, ...]]] = field(default_factory=list)
    key_groups: list[list[tuple[int, ...]]] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.router_mats)


def _split_halves(wq: np.ndarray, k_avg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h, hd, d = wq.shape
    half = hd // 2
    sub_wq = wq.reshape(h, 2, half, d).reshape(2 * h, half, d)
    sub_k = k_avg.reshape(h, 2, half).reshape(2 * h, half)
    return sub_wq, sub_k


def _layer_bank(wq: np.ndarray, k_avg: np.ndarray, cfg: MoEConfig):
    h, hd, _ = wq.shape
    m, n = cfg.n_routers, cfg.n_experts
    if cfg.split_heads:
        wq, k_avg = _split_halves(wq, k_avg)
        h, hd = wq.shape[0], wq.shape[1]
    if m > n or cfg.split_heads:
        # one router per (sub-)head, keys handed to experts in contiguous blocks
        r_groups = [(j,) for j in range(h)]
        k_groups = r_groups
    else:
        rounds = int(round(math.log2(h // m)))
        r_groups = concat_rounds(list(k_avg), rounds)
        if m == n:
            k_groups = r_groups
        else:
            pool = [k_avg[t % h] for t in range(h * (n // m))]
            k_groups = [tuple(t % h for t in g) for g in concat_rounds(pool, rounds)]
    mats = np.stack([np.concatenate([wq[s] for s in g], axis=0) for g in r_groups])
    keys = np.stack([np.concatenate([k_avg[s] for s in g]) for g in k_groups])
    keys = keys.reshape(n, cfg.keys_per_expert, -1)
    return mats, keys, r_groups, k_groups


def build_router_bank(stats: HeadStats, cfg: MoEConfig) -> RouterBank:
    if cfg.router_mode != "mixture":
        raise ConfigError(f"router banks only apply to mixture routing, not {cfg.router_mode!r}")
    model_like = ModelConfig(
        d_model=stats.d_model, n_heads=stats.n_heads, head_dim=stats.head_dim, n_layers=stats.n_layers
    )
    cfg.check_against(model_like)
    bank = RouterBank([], [])
    for wq, k_avg in zip(stats.wq, stats.k_avg):
        mats, keys, rg, kg = _layer_bank(np.asarray(wq), np.asarray(k_avg), cfg)
        bank.router_mats.append(mats)
        bank.expert_keys.append(keys)
        bank.router_groups.append(rg)
        bank.key_groups.append(kg)
    _check_provenance(stats, bank, cfg)
    return bank


def _check_provenance(stats: HeadStats, bank: RouterBank, cfg: MoEConfig) -> None:
    """Every router block and key chunk must be a verbatim copy of a source head."""
    for layer in range(stats.n_layers):
        wq, k_avg = np.asarray(stats.wq[layer]), np.asarray(stats.k_avg[layer])
        if cfg.split_heads:
            wq, k_avg = _split_halves(wq, k_avg)
        hd = wq.shape[1]
        for j, g in enumerate(bank.router_groups[layer]):
            for c, s in enumerate(g):
                if not np.array_equal(bank.router_mats[layer][j, c * hd : (c + 1) * hd], wq[s]):
                    raise AssertionError(f"router {j} block {c} in layer {layer} is not head {s}'s query map")
        flat_keys = bank.expert_keys[layer].reshape(-1, bank.expert_keys[layer].shape[-1])
        for i, g in enumerate(bank.key_groups[layer]):
            for c, s in enumerate(g):
                if not np.array_equal(flat_keys[i, c * hd : (c + 1) * hd], k_avg[s]):
                    raise AssertionError(f"key {i} chunk {c} in layer {layer} is not head {s}'s mean key")


def upcycle(ckpt: DenseCheckpoint, bank: RouterBank | None, cfg: MoEConfig, seed: int = 0) -> MoECheckpoint:
    """Copy the dense FFN into every expert and install routers.

    Mixture routing takes its routers from ``bank``; the baseline modes draw a
    fresh normal(0, ``cfg.router_std``) router from ``seed``.
    """
    model = ckpt.config
    if cfg.router_mode == "mixture":
        if bank is None:
            raise ConfigError("mixture routing needs a router bank")
        cfg.check_against(model)
        if bank.n_layers != model.n_layers:
            raise CheckpointError(f"bank has {bank.n_layers} layers, checkpoint has {model.n_layers}")
    rng = make_rng(seed)
    out: dict[str, np.ndarray] = {}
    for name, value in ckpt.tensors.items():
        if ".ffn.w" not in name:
            out[name] = np.array(value)
    for i in range(model.n_layers):
        p = f"layer.{i}"
        for e in range(cfg.n_experts):
            out[f"{p}.expert.{e}.w1"] = np.array(ckpt.tensors[f"{p}.ffn.w1"])
            out[f"{p}.expert.{e}.w2"] = np.array(ckpt.tensors[f"{p}.ffn.w2"])
        if cfg.router_mode == "mixture":
            mats, keys = bank.router_mats[i], bank.expert_keys[i]
            if mats.shape != (cfg.n_routers, cfg.router_dim, model.d_model):
                raise CheckpointError(f"layer {i} router bank has shape {mats.shape}")
            for j in range(cfg.n_routers):
                out[f"{p}.router.{j}.w"] = mats[j].copy()
            for e in range(cfg.n_experts):
                for c in range(cfg.keys_per_expert):
                    out[f"{p}.expert.{e}.key.{c}"] = keys[e, c].copy()
        elif cfg.router_mode == "mlp":
            d = model.d_model
            out[f"{p}.router.w1"] = rng.normal(0.0, cfg.router_std, size=(d, d))
            out[f"{p}.router.w2"] = rng.normal(0.0, cfg.router_std, size=(cfg.n_experts, d))
        else:
            out[f"{p}.router.w"] = rng.normal(0.0, cfg.router_std, size=(cfg.n_experts, model.d_model))
    return MoECheckpoint(model, out, False, cfg)


def router_parameter_count(ckpt: MoECheckpoint, layer: int = 0) -> int:
    """Router weights in one layer (expert keys excluded)."""
    prefix = f"layer.{layer}.router."
    return int(sum(v.size for k, v in ckpt.tensors.items() if k.startswith(prefix)))
