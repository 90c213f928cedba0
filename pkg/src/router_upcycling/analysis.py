"""Routing-diversity, expert-specialization and training-curve diagnostics."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numeric as nm
from .checkpoint import MoECheckpoint
from .data import PAD, Corpus, eval_batches
from .moe import ExpertSet, forward as moe_forward_ckpt

GATE_KIND = "pre-selection softmax gates (all experts)"


class StepGridError(ValueError):
    pass


def gate_std_entropy(mean_gates: np.ndarray) -> tuple[float, float]:
    """Population std across experts and entropy in bits of a gate distribution."""
    p = np.asarray(mean_gates, dtype=np.float64)
    nz = p[p > 0]
    return float(p.std()), float(-(nz * np.log2(nz)).sum())


@dataclass
class DiversityReport:
    mean_gates: dict[tuple[int, str], np.ndarray]
    token_counts: dict[str, int] = field(default_factory=dict)
    metadata: dict = field(default_factory=lambda: {"gates": GATE_KIND})

    @property
    def layers(self) -> list[int]:
        return sorted({k[0] for k in self.mean_gates})

    @property
    def domains(self) -> list[str]:
        return sorted({k[1] for k in self.mean_gates})

    def std(self, layer: int, domain: str) -> float:
        return gate_std_entropy(self.mean_gates[layer, domain])[0]

    def entropy(self, layer: int, domain: str) -> float:
        return gate_std_entropy(self.mean_gates[layer, domain])[1]

    def rows(self) -> list[dict]:
        out = []
        for layer, domain in sorted(self.mean_gates):
            gates = self.mean_gates[layer, domain]
            std, ent = gate_std_entropy(gates)
            for e, g in enumerate(gates):
                out.append(
                    {"layer": layer, "domain": domain, "expert": e, "mean_gate": float(g), "std": std, "entropy": ent}
                )
        return out

    def write_csv(self, path) -> None:
        _write_csv(path, ["layer", "domain", "expert", "mean_gate", "std", "entropy"], self.rows())


def routing_diversity(
    ckpt: MoECheckpoint,
    corpus: Corpus,
    layers: Iterable[int] | None = None,
    seq: int = 64,
    rows: int = 8,
    max_batches: int = 4,
    split: str = "val",
) -> DiversityReport:
    """Average full gate vector per (layer, domain) over evaluation windows."""
    wanted = set(range(ckpt.config.n_layers) if layers is None else layers)
    sums: dict[tuple[int, str], np.ndarray] = {}
    counts: dict[str, int] = {}
    for domain in corpus.names:
        count = 0
        for batch in eval_batches(corpus, domain, seq, rows, max_batches, split):
            mask = (batch.inputs != PAD).reshape(-1)
            _, traces, _ = moe_forward_ckpt(ckpt, batch.inputs)
            for layer, tr in enumerate(traces):
                if layer in wanted:
                    key = (layer, domain)
                    sums[key] = sums.get(key, 0.0) + tr.gates[mask].sum(axis=0)
            count += int(mask.sum())
        if count == 0:
            raise ValueError(f"domain {domain!r} has no tokens to evaluate")
        counts[domain] = count
    means = {k: v / counts[k[1]] for k, v in sums.items()}
    return DiversityReport(means, counts)


@dataclass
class SpecializationReport:
    matrices: dict[int, np.ndarray]

    def mean_pairwise(self, layer: int) -> float:
        m = self.matrices[layer]
        iu = np.triu_indices(m.shape[0], 1)
        return float(m[iu].mean())

    def rows(self) -> list[dict]:
        out = []
        for layer in sorted(self.matrices):
            m = self.matrices[layer]
            for a, b in itertools.combinations(range(m.shape[0]), 2):
                out.append({"layer": layer, "expert_a": a, "expert_b": b, "cosine": float(m[a, b])})
        return out

    def write_csv(self, path) -> None:
        _write_csv(path, ["layer", "expert_a", "expert_b", "cosine"], self.rows())


def expert_output_similarity(x: np.ndarray, experts: ExpertSet) -> np.ndarray:
    """Token-averaged cosine similarity between every pair of expert outputs on x [N, d]."""
    x = np.asarray(x).reshape(-1, np.shape(x)[-1])
    if x.shape[0] == 0:
        raise ValueError("empty probe batch")
    xt = nm.as_tensor(x)
    outs = np.stack([experts.apply(e, xt).data for e in range(len(experts))])  # [n, N, d]
    norms = np.linalg.norm(outs, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("an expert produced a zero output; cosine undefined")
    unit = outs / norms
    sims = np.einsum("atd,btd->ab", unit, unit) / x.shape[0]
    sims = np.clip((sims + sims.T) / 2, -1.0, 1.0)
    # identical outputs have cosine exactly 1; don't let rounding say otherwise
    for a, b in itertools.combinations(range(len(experts)), 2):
        if np.array_equal(outs[a], outs[b]):
            sims[a, b] = sims[b, a] = 1.0
    np.fill_diagonal(sims, 1.0)
    return sims


def probe_tokens(corpus: Corpus, n_tokens: int = 4096, seq: int = 64, seed: int = 0, split: str = "val") -> np.ndarray:
    """Windows drawn evenly from all domains at seeded offsets; [rows, seq]."""
    rng = nm.make_rng(seed)
    per_domain = max(1, n_tokens // (seq * len(corpus.names)))
    windows = []
    for domain in corpus.names:
        stream = corpus.stream(domain, split)
        hi = max(1, len(stream) - seq)
        for start in rng.integers(0, hi, size=per_domain):
            w = stream[start : start + seq]
            if len(w) < seq:
                w = np.concatenate([w, np.full(seq - len(w), PAD)])
            windows.append(w)
    return np.stack(windows).astype(np.int64)


def expert_specialization(ckpt: MoECheckpoint, probe: np.ndarray, layers: Iterable[int] | None = None) -> SpecializationReport:
    """Run every token through all experts of each layer, bypassing routing."""
    probe = np.atleast_2d(np.asarray(probe, dtype=np.int64))
    if probe.size == 0:
        raise ValueError("empty probe")
    wanted = range(ckpt.config.n_layers) if layers is None else layers
    _, _, traces = moe_forward_ckpt(ckpt, probe)
    mask = (probe != PAD).reshape(-1)
    matrices = {}
    for layer in wanted:
        x = traces[layer].ffn_input.reshape(-1, ckpt.config.d_model)[mask]
        experts = ExpertSet.from_params(ckpt.tensors, layer, ckpt.moe.n_experts)
        matrices[layer] = expert_output_similarity(x, experts)
    return SpecializationReport(matrices)


# --- run comparison --------------------------------------------------------


def compare_runs(logs: Mapping[str, Sequence[dict]]) -> list[dict]:
    """Align lm_loss per step across runs; ``delta_<name>`` is relative to the first run."""
    if not logs:
        raise ValueError("no logs to compare")
    names = list(logs)
    grids = {n: [r["step"] for r in logs[n]] for n in names}
    ref = grids[names[0]]
    for n in names[1:]:
        if grids[n] != ref:
            raise StepGridError(f"step-grid mismatch between {names[0]!r} and {n!r}")
    rows = []
    for i, step in enumerate(ref):
        row: dict = {"step": step}
        base = logs[names[0]][i]["lm_loss"]
        for n in names:
            row[n] = logs[n][i]["lm_loss"]
        for n in names[1:]:
            row[f"delta_{n}"] = logs[n][i]["lm_loss"] - base
        rows.append(row)
    return rows


def final_deltas(table: Sequence[dict]) -> dict[str, float]:
    last = table[-1]
    return {k[len("delta_"):]: v for k, v in last.items() if k.startswith("delta_")}


def summarize_final(groups: Mapping[str, Sequence[Sequence[dict]]], key: str = "lm_loss") -> dict[str, tuple[float, float]]:
    """Per variant: mean and sample std (ddof=1; 0 for a single run) of the final ``key``."""
    out = {}
    for variant, runs in groups.items():
        finals = np.array([run[-1][key] for run in runs], dtype=np.float64)
        std = float(finals.std(ddof=1)) if len(finals) > 1 else 0.0
        out[variant] = (float(finals.mean()), std)
    return out


def curves_rows(logs: Mapping[str, Sequence[dict]]) -> list[dict]:
    rows = []
    for variant, recs in logs.items():
        for r in recs:
            rows.append(
                {"step": r["step"], "variant": variant, "lm_loss": r["lm_loss"], "aux_loss": r["aux_loss"], "z_loss": r["z_loss"]}
            )
    return rows


def write_comparison_csv(path, table: Sequence[dict]) -> None:
    _write_csv(path, list(table[0].keys()), table)


def write_curves_csv(path, logs: Mapping[str, Sequence[dict]]) -> None:
    _write_csv(path, ["step", "variant", "lm_loss", "aux_loss", "z_loss"], curves_rows(logs))


def _write_csv(path, fields: list[str], rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)
