"""Decoder-only byte transformer: the dense model that gets upcycled.

Blocks are pre-norm (RMS norm) with bias-free attention projections, learned
absolute positions and a GELU FFN. Weight matrices are stored as [out, in], so
rows ``h*head_dim:(h+1)*head_dim`` of ``attn.wq`` are head ``h``'s query map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import numeric as nm
from .checkpoint import DenseCheckpoint, dense_shapes
from .config import ModelConfig
from .data import PAD
from .numeric import Tensor

INIT_STD = 0.02
_NEG = -1e30

FFNFn = Callable[[int, Tensor], Tensor]


@dataclass
class LayerTrace:
    ffn_input: np.ndarray  # [B, T, d], normalized input of the FFN sub-layer
    keys: np.ndarray  # [B, h, T, head_dim]
    attn_probs: np.ndarray  # [B, h, T, T]


def init_dense(cfg: ModelConfig, seed: int) -> DenseCheckpoint:
    rng = nm.make_rng(seed)
    tensors = {}
    for name, shape in dense_shapes(cfg).items():
        if name.endswith("norm.w"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = rng.normal(0.0, INIT_STD, size=shape)
    return DenseCheckpoint(cfg, tensors)


def as_params(tensors: Mapping[str, np.ndarray], trainable: bool = False) -> dict[str, Tensor]:
    if trainable:
        return {k: nm.parameter(v) for k, v in tensors.items()}
    return {k: Tensor._wrap(np.asarray(v)) for k, v in tensors.items()}


def check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError(f"expected a non-empty token sequence, got shape {tokens.shape}")
    if tokens.shape[1] > cfg.seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds seq_len {cfg.seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(f"out-of-range token id (vocab_size={cfg.vocab_size})")
    return tokens


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), _NEG), k=1)


def _split_heads(x: Tensor, cfg: ModelConfig) -> Tensor:
    b, t, _ = x.shape
    return nm.transpose(nm.reshape(x, (b, t, cfg.n_heads, cfg.head_dim)), (0, 2, 1, 3))


def attention(cfg: ModelConfig, params: Mapping[str, Tensor], layer: int, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Causal multi-head self-attention sub-layer; returns (output, keys, probs)."""
    p = f"layer.{layer}"
    b, t, d = x.shape
    hx = nm.rmsnorm(x, params[f"{p}.attn_norm.w"])
    q = _split_heads(nm.linear(hx, params[f"{p}.attn.wq"]), cfg)
    k = _split_heads(nm.linear(hx, params[f"{p}.attn.wk"]), cfg)
    v = _split_heads(nm.linear(hx, params[f"{p}.attn.wv"]), cfg)
    scores = nm.scale(nm.bmm(q, nm.swapaxes(k, -1, -2)), 1.0 / math.sqrt(cfg.head_dim))
    probs = nm.softmax(nm.add(scores, _causal_mask(t)))
    ctx = nm.reshape(nm.transpose(nm.bmm(probs, v), (0, 2, 1, 3)), (b, t, d))
    return nm.linear(ctx, params[f"{p}.attn.wo"]), k, probs


def dense_ffn(params: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return nm.linear(nm.gelu(nm.linear(x, params[f"{prefix}.w1"])), params[f"{prefix}.w2"])


def transformer_forward(
    cfg: ModelConfig,
    params: Mapping[str, Tensor],
    tokens: np.ndarray,
    ffn: FFNFn | None = None,
    traces: list[LayerTrace] | None = None,
) -> Tensor:
    """Logits [B, T, vocab]. ``ffn(layer, x)`` replaces the dense FFN when given."""
    tokens = check_tokens(cfg, tokens)
    _, t = tokens.shape
    if ffn is None:
        ffn = lambda i, u: dense_ffn(params, f"layer.{i}.ffn", u)  # noqa: E731
    x = nm.add(nm.take_rows(params["embed.tok"], tokens), nm.take_rows(params["embed.pos"], np.arange(t)))
    for i in range(cfg.n_layers):
        attn_out, keys, probs = attention(cfg, params, i, x)
        x = nm.add(x, attn_out)
        u = nm.rmsnorm(x, params[f"layer.{i}.ffn_norm.w"])
        if traces is not None:
            traces.append(LayerTrace(u.data, keys.data, probs.data))
        x = nm.add(x, ffn(i, u))
    x = nm.rmsnorm(x, params["final_norm.w"])
    return nm.linear(x, params["lm_head.w"])


def forward(ckpt: DenseCheckpoint, tokens) -> tuple[np.ndarray, list[LayerTrace]]:
    """Inference pass. A 1-D input gives logits [T, vocab]; 2-D gives [B, T, vocab]."""
    single = np.asarray(tokens).ndim == 1
    traces: list[LayerTrace] = []
    logits = transformer_forward(ckpt.config, as_params(ckpt.tensors), tokens, traces=traces).data
    if single:
        logits = logits[0]
        traces = [LayerTrace(tr.ffn_input[0], tr.keys[0], tr.attn_probs[0]) for tr in traces]
    return logits, traces


def lm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    v = logits.shape[-1]
    return nm.cross_entropy(nm.reshape(logits, (-1, v)), np.asarray(targets).reshape(-1), ignore_index=PAD)
