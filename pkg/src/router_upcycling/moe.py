"""Mixture-of-experts layer: routers, top-k dispatch, expert combination, router losses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import numeric as nm
from .checkpoint import CheckpointError, MoECheckpoint
from .config import MoEConfig, ModelConfig
from .dense_model import LayerTrace, as_params, dense_ffn, transformer_forward
from .numeric import Tensor


@dataclass
class RoutingTrace:
    """Routing of N tokens through one layer.

    ``summed_scores`` are the pre-softmax expert scores S [N, n]; ``gates`` is
    R = softmax(S); ``selected`` holds the top-k expert ids per token sorted by
    descending gate. ``scores_per_router`` [N, m, n*keys] is only set for
    mixture routing.
    """

    summed_scores: np.ndarray
    gates: np.ndarray | None = None
    selected: np.ndarray | None = None
    scores_per_router: np.ndarray | None = None

    @property
    def n_tokens(self) -> int:
        return self.summed_scores.shape[0]

    @property
    def dispatch_fraction(self) -> np.ndarray:
        """Dispatches per expert divided by token count; sums to k."""
        n = self.summed_scores.shape[1]
        counts = np.bincount(self.selected.reshape(-1), minlength=n)
        return counts / self.n_tokens

    @property
    def mean_gate(self) -> np.ndarray:
        return self.gates.mean(axis=0)


@dataclass
class ExpertSet:
    """n FFN experts; ``w1[i]`` is [hidden, d] and ``w2[i]`` is [d, hidden]."""

    w1: Sequence
    w2: Sequence

    def __post_init__(self):
        if len(self.w1) != len(self.w2) or not self.w1:
            raise ValueError("experts need matching, non-empty w1/w2 lists")
        s1, s2 = np.shape(_arr(self.w1[0])), np.shape(_arr(self.w2[0]))
        for a, b in zip(self.w1, self.w2):
            if np.shape(_arr(a)) != s1 or np.shape(_arr(b)) != s2:
                raise ValueError("all experts must share shapes")

    def __len__(self) -> int:
        return len(self.w1)

    def apply(self, i: int, x: Tensor) -> Tensor:
        return nm.linear(nm.gelu(nm.linear(x, nm.as_tensor(self.w1[i]))), nm.as_tensor(self.w2[i]))

    @classmethod
    def from_params(cls, params: Mapping, layer: int, n: int) -> "ExpertSet":
        p = f"layer.{layer}.expert"
        return cls([params[f"{p}.{e}.w1"] for e in range(n)], [params[f"{p}.{e}.w2"] for e in range(n)])


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _as_rows(x) -> tuple[Tensor, bool]:
    x = nm.as_tensor(x)
    if x.ndim == 1:
        return nm.reshape(x, (1, x.shape[0])), True
    return x, False


# --- scoring ---------------------------------------------------------------


def mixture_scores(
    x: Tensor, router_w: Sequence, keys: Sequence, cfg: MoEConfig
) -> tuple[Tensor, Tensor]:
    """Attention-style scores of tokens x [N, d] against expert keys.

    ``router_w`` holds m matrices [d', d]; ``keys`` holds n*keys_per_expert
    vectors [d'] in expert-major order. Returns (per-router scores
    [N, m, n*keys], expert scores [N, n]).
    """
    m, dim, kpe, n = len(router_w), cfg.router_dim, cfg.keys_per_expert, cfg.n_experts
    if len(keys) != n * kpe:
        raise ValueError(f"expected {n * kpe} expert keys, got {len(keys)}")
    w_all = nm.concat([nm.as_tensor(w) for w in router_w], axis=0)
    if w_all.shape != (m * dim, x.shape[-1]):
        raise ValueError(f"router matrices {w_all.shape} do not fit input of width {x.shape[-1]}")
    key_mat = nm.concat([nm.reshape(nm.as_tensor(k), (1, dim)) for k in keys], axis=0)
    n_tok = x.shape[0]
    q = nm.reshape(nm.linear(x, w_all), (n_tok, m, dim))
    per_router = nm.scale(nm.linear(q, key_mat), 1.0 / math.sqrt(dim))
    if cfg.mixture == "summation":
        pooled = nm.tensor_sum(per_router, axis=1)  # [N, n*kpe]
        if kpe == 1:
            return per_router, pooled
        return per_router, nm.reduce_max(nm.reshape(pooled, (n_tok, n, kpe)), axis=-1)
    # max pooling over every (router, key) pair of the expert
    grouped = nm.transpose(nm.reshape(per_router, (n_tok, m, n, kpe)), (0, 2, 1, 3))
    return per_router, nm.reduce_max(nm.reshape(grouped, (n_tok, n, m * kpe)), axis=-1)


def baseline_scores(x: Tensor, router: Mapping, kind: str) -> Tensor:
    """Router logits [N, n] for the linear (vanilla/switch) or MLP routers."""
    if kind in ("vanilla", "switch"):
        if "w" not in router:
            raise CheckpointError(f"{kind} router needs a single weight matrix")
        return nm.linear(x, nm.as_tensor(router["w"]))
    if kind == "mlp":
        if "w1" not in router or "w2" not in router:
            raise CheckpointError("mlp router needs w1 and w2")
        return nm.linear(nm.gelu(nm.linear(x, nm.as_tensor(router["w1"]))), nm.as_tensor(router["w2"]))
    raise CheckpointError(f"unknown baseline router kind {kind!r}")


def top_k(gates: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest gates per row, descending, ties to the lower index."""
    return np.argsort(-gates, axis=-1, kind="stable")[..., :k]


def route(scores: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    gates = nm.softmax(scores, axis=-1)
    return gates, top_k(gates.data, k)


def score_mixture(x, bank, cfg: MoEConfig, layer: int = 0) -> RoutingTrace:
    """Mixture-of-routers scores for one token [d] or a batch [N, d].

    ``bank`` is a :class:`RouterBank` (or any object with ``router_mats`` and
    ``expert_keys`` lists indexed by layer).
    """
    xt, single = _as_rows(x)
    mats = bank.router_mats[layer]
    keys = np.asarray(bank.expert_keys[layer]).reshape(-1, cfg.router_dim)
    per_router, scores = mixture_scores(xt, list(mats), list(keys), cfg)
    gates, selected = route(scores, cfg.effective_top_k)
    trace = RoutingTrace(scores.data, gates.data, selected, per_router.data)
    return _squeeze(trace) if single else trace


def score_baseline(x, router: Mapping, kind: str, cfg: MoEConfig) -> RoutingTrace:
    if kind != cfg.router_mode:
        raise CheckpointError(f"router kind {kind!r} does not match configured mode {cfg.router_mode!r}")
    xt, single = _as_rows(x)
    scores = baseline_scores(xt, router, kind)
    gates, selected = route(scores, cfg.effective_top_k)
    trace = RoutingTrace(scores.data, gates.data, selected)
    return _squeeze(trace) if single else trace


def _squeeze(t: RoutingTrace) -> RoutingTrace:
    return RoutingTrace(
        t.summed_scores[0],
        None if t.gates is None else t.gates[0],
        None if t.selected is None else t.selected[0],
        None if t.scores_per_router is None else t.scores_per_router[0],
    )


# --- expert combination ----------------------------------------------------


def combine(x: Tensor, gates: Tensor, selected: np.ndarray, experts: ExpertSet) -> Tensor:
    """y = sum over selected s of gate_s * E_s(x), gates not renormalized."""
    n_tok, d = x.shape
    selected = np.asarray(selected).reshape(n_tok, -1)
    if selected.size and (selected.min() < 0 or selected.max() >= len(experts)):
        raise IndexError(f"expert index out of range for {len(experts)} experts")
    y = nm.as_tensor(np.zeros((n_tok, d)))
    for e in range(len(experts)):
        rows, _ = np.nonzero(selected == e)
        if rows.size == 0:
            continue
        out = experts.apply(e, nm.take_rows(x, rows))
        g = nm.reshape(nm.index(gates, (rows, np.full(rows.size, e))), (rows.size, 1))
        y = nm.index_add(y, rows, nm.mul(out, g))
    return y


def moe_forward(x, trace: RoutingTrace, experts: ExpertSet) -> np.ndarray:
    """Apply the routed experts to one token [d] or a batch [N, d]."""
    xt, single = _as_rows(x)
    gates = np.atleast_2d(trace.gates)
    selected = np.asarray(trace.selected).reshape(gates.shape[0], -1)
    if selected.shape[1] == 0:
        raise ValueError("no experts selected")
    y = combine(xt, nm.as_tensor(gates), selected, experts).data
    return y[0] if single else y


# --- router losses ---------------------------------------------------------


def aux_loss(gates, selected, coeff: float = 0.02) -> Tensor:
    """Load-balancing loss coeff * n * sum_i f_i * P_i.

    f_i is the share of all token dispatches sent to expert i (each token
    dispatches k times, so f sums to 1) and P_i the batch-mean gate.
    """
    gates = nm.as_tensor(gates)
    selected = np.asarray(selected)
    if gates.ndim != 2 or gates.shape[0] == 0:
        raise ValueError("aux loss needs a non-empty [tokens, experts] gate batch")
    n_tok, n = gates.shape
    selected = selected.reshape(n_tok, -1)
    frac = np.bincount(selected.reshape(-1), minlength=n) / selected.size
    mean_gate = nm.mean(gates, axis=0)
    return nm.scale(nm.tensor_sum(nm.mul(mean_gate, frac)), coeff * n)


def z_loss(scores, coeff: float = 0.001) -> Tensor:
    """coeff * mean over tokens of logsumexp(scores)^2."""
    scores = nm.as_tensor(scores)
    if scores.ndim == 1:
        scores = nm.reshape(scores, (1, scores.shape[0]))
    if scores.shape[0] == 0:
        raise ValueError("z loss needs at least one token")
    return nm.scale(nm.mean(nm.square(nm.logsumexp(scores, axis=-1))), coeff)


# --- layer and model -------------------------------------------------------


@dataclass
class LayerRouting:
    """Differentiable routing state of one MoE layer for a batch."""

    scores: Tensor  # [N, n]
    gates: Tensor  # [N, n]
    selected: np.ndarray  # [N, k]
    per_router: Tensor | None = None

    def trace(self) -> RoutingTrace:
        per = None if self.per_router is None else self.per_router.data
        return RoutingTrace(self.scores.data, self.gates.data, self.selected, per)


def router_inputs(params: Mapping, layer: int, cfg: MoEConfig) -> tuple[list, list] | dict:
    p = f"layer.{layer}"
    if cfg.router_mode == "mixture":
        mats = [params[f"{p}.router.{j}.w"] for j in range(cfg.n_routers)]
        keys = [
            params[f"{p}.expert.{e}.key.{c}"] for e in range(cfg.n_experts) for c in range(cfg.keys_per_expert)
        ]
        return mats, keys
    if cfg.router_mode == "mlp":
        return {"w1": params[f"{p}.router.w1"], "w2": params[f"{p}.router.w2"]}
    return {"w": params[f"{p}.router.w"]}


def moe_layer(params: Mapping, layer: int, x: Tensor, cfg: MoEConfig) -> tuple[Tensor, LayerRouting]:
    """Route and combine x [..., d]; returns output of the same shape."""
    lead = x.shape[:-1]
    d = x.shape[-1]
    flat = nm.reshape(x, (-1, d))
    per_router = None
    if cfg.router_mode == "mixture":
        mats, keys = router_inputs(params, layer, cfg)
        per_router, scores = mixture_scores(flat, mats, keys, cfg)
    else:
        scores = baseline_scores(flat, router_inputs(params, layer, cfg), cfg.router_mode)
    gates, selected = route(scores, cfg.effective_top_k)
    y = combine(flat, gates, selected, ExpertSet.from_params(params, layer, cfg.n_experts))
    return nm.reshape(y, (*lead, d)), LayerRouting(scores, gates, selected, per_router)


def moe_model_forward(
    model: ModelConfig,
    cfg: MoEConfig,
    params: Mapping,
    tokens: np.ndarray,
    traces: list[LayerTrace] | None = None,
) -> tuple[Tensor, list[LayerRouting]]:
    routings: list[LayerRouting] = []

    def ffn(i: int, u: Tensor) -> Tensor:
        y, r = moe_layer(params, i, u, cfg)
        routings.append(r)
        return y

    logits = transformer_forward(model, params, tokens, ffn=ffn, traces=traces)
    return logits, routings


def router_losses(routings: Iterable[LayerRouting], cfg: MoEConfig) -> tuple[Tensor, Tensor]:
    """Aux and z losses averaged over layers."""
    routings = list(routings)
    aux = [aux_loss(r.gates, r.selected, cfg.aux_coeff) for r in routings]
    zl = [z_loss(r.scores, cfg.z_coeff) for r in routings]
    inv = 1.0 / len(routings)
    total_aux, total_z = aux[0], zl[0]
    for a, z in zip(aux[1:], zl[1:]):
        total_aux, total_z = nm.add(total_aux, a), nm.add(total_z, z)
    return nm.scale(total_aux, inv), nm.scale(total_z, inv)


def forward(ckpt: MoECheckpoint, tokens) -> tuple[np.ndarray, list[RoutingTrace], list[LayerTrace]]:
    """Inference pass of an MoE checkpoint over tokens [B, T] (or [T])."""
    single = np.asarray(tokens).ndim == 1
    traces: list[LayerTrace] = []
    logits, routings = moe_model_forward(ckpt.config, ckpt.moe, as_params(ckpt.tensors), tokens, traces)
    out = logits.data[0] if single else logits.data
    return out, [r.trace() for r in routings], traces


def dense_reference(params: Mapping, layer: int, x: Tensor) -> Tensor:
    """Expert 0's FFN, which equals the dense FFN right after upcycling."""
    return dense_ffn(params, f"layer.{layer}.expert.0", x)


# --- trace export ----------------------------------------------------------


def write_trace_jsonl(fp: IO[str], trace: RoutingTrace, layer: int, domain: str) -> int:
    """One JSON record per token: {layer, domain, gates, selected}."""
    for g, s in zip(trace.gates, trace.selected):
        fp.write(json.dumps({"layer": layer, "domain": domain, "gates": g.tolist(), "selected": s.tolist()}))
        fp.write("\n")
    return trace.n_tokens


def read_trace_jsonl(lines: Iterable[str]) -> Iterator[dict]:
    for line in lines:
        line = line.strip()
        if line:
            rec = json.loads(line)
            missing = {"layer", "domain", "gates", "selected"} - rec.keys()
            if missing:
                raise ValueError(f"trace record lacks {sorted(missing)}")
            yield rec
