"""Desk-scale comparison of attention-initialized routers against vanilla upcycling."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .analysis import expert_specialization, probe_tokens, routing_diversity
from .config import ModelConfig, MoEConfig
from .data import Corpus
from .trainer import TrainConfig, evaluate, train_dense, train_moe
from .upcycler import build_router_bank, collect_key_stats, upcycle

log = logging.getLogger(__name__)

VARIANTS = ("router", "vanilla")


@dataclass
class DeskRunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    n_experts: int = 8
    n_routers: int = 8
    top_k: int = 2
    dense_steps: int = 1500
    dense_lr: float = 2e-3
    dense_seed: int = 0
    moe_steps: int = 2000
    moe_lr: float = 5e-4
    batch_tokens: int = 512
    seq: int = 64
    key_iters: int = 10
    key_batch: int = 8
    key_seq: int = 128
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_rows: int = 8
    eval_batches: int = 4
    probe_tokens: int = 4096
    probe_seed: int = 0


@dataclass
class VariantResult:
    variant: str
    seed: int
    val_loss: float
    specialization: dict[int, float]
    gate_std: dict[str, float]
    log: list[dict]


def desk_comparison(corpus: Corpus, cfg: DeskRunConfig, out_dir=None) -> dict:
    """Train one dense model, upcycle it both ways for every seed, and compare."""
    t0 = time.time()
    dense_tc = TrainConfig(max_lr=cfg.dense_lr, batch_tokens=cfg.batch_tokens, seq=cfg.seq)
    dense, _ = train_dense(cfg.model, corpus, cfg.dense_steps, cfg.dense_seed, dense_tc)
    frozen = dense.freeze()
    stats = collect_key_stats(frozen, corpus, cfg.key_iters, cfg.key_batch, cfg.key_seq)
    probe = probe_tokens(corpus, cfg.probe_tokens, cfg.seq, cfg.probe_seed)
    last = cfg.model.n_layers - 1

    results: list[VariantResult] = []
    for seed in cfg.seeds:
        for variant in VARIANTS:
            mode = "mixture" if variant == "router" else "vanilla"
            moe_cfg = MoEConfig.for_model(
                cfg.model, n_experts=cfg.n_experts, n_routers=cfg.n_routers, top_k=cfg.top_k, router_mode=mode
            )
            bank = build_router_bank(stats, moe_cfg) if mode == "mixture" else None
            moe = upcycle(frozen, bank, moe_cfg, seed=seed)
            tc = TrainConfig(
                max_lr=cfg.moe_lr, total_steps=cfg.moe_steps, batch_tokens=cfg.batch_tokens, seq=cfg.seq, seed=seed
            )
            log_path = None
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                log_path = Path(out_dir) / f"{variant}_seed{seed}.jsonl"
            trained, records = train_moe(moe, corpus, tc, log_path)
            val = evaluate(trained, corpus, cfg.seq, cfg.eval_rows, cfg.eval_batches)["mean"]
            spec = expert_specialization(trained, probe)
            div = routing_diversity(trained, corpus, [last], cfg.seq, cfg.eval_rows, cfg.eval_batches)
            res = VariantResult(
                variant,
                seed,
                val,
                {layer: spec.mean_pairwise(layer) for layer in spec.matrices},
                {d: div.std(last, d) for d in div.domains},
                records,
            )
            log.info("%s seed %d: val %.4f spec %s", variant, seed, val, res.specialization)
            results.append(res)
    summary = summarize(results, corpus.names, cfg.model.n_layers)
    summary["runtime_s"] = time.time() - t0
    if out_dir is not None:
        (Path(out_dir) / "summary.json").write_text(json.dumps(summary, indent=1))
    summary["results"] = results
    return summary


def summarize(results: list[VariantResult], domains: list[str], n_layers: int) -> dict:
    by = {v: [r for r in results if r.variant == v] for v in VARIANTS}
    val = {v: float(np.mean([r.val_loss for r in rs])) for v, rs in by.items()}
    spec = {v: {layer: float(np.mean([r.specialization[layer] for r in rs])) for layer in range(n_layers)} for v, rs in by.items()}
    std = {v: {d: float(np.mean([r.gate_std[d] for r in rs])) for d in domains} for v, rs in by.items()}
    lower_spec_layers = [layer for layer in range(n_layers) if spec["router"][layer] < spec["vanilla"][layer]]
    higher_std_domains = [d for d in domains if std["router"][d] > std["vanilla"][d]]
    return {
        "val_loss": val,
        "specialization": {v: {str(k): x for k, x in s.items()} for v, s in spec.items()},
        "gate_std": std,
        "loss_ok": val["router"] <= val["vanilla"],
        "specialization_ok": len(lower_spec_layers) >= 0.5 * n_layers,
        "diversity_ok": len(higher_std_domains) >= 3,
        "lower_spec_layers": lower_spec_layers,
        "higher_std_domains": higher_std_domains,
    }
