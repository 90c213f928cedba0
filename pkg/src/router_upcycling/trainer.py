"""Shared optimization loop for dense pretraining and MoE training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from . import numeric as nm
from .checkpoint import DenseCheckpoint, MoECheckpoint
from .config import ModelConfig
from .data import PAD, Batch, Corpus, batch_iter, eval_batches
from .dense_model import as_params, init_dense, lm_loss, transformer_forward
from .moe import moe_model_forward, router_losses
from .numeric import GradTape, Tensor

log = logging.getLogger(__name__)

DATA_STREAM = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 5e-4
    warmup_frac: float = 0.01
    decay_points: tuple[float, ...] = (0.8, 0.9)
    decay_factor: float = 0.316
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    weight_decay: float = 0.1
    total_steps: int = 2000
    batch_tokens: int = 8192
    seq: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_points", tuple(self.decay_points))
        pts = self.decay_points
        if any(not 0.0 < p < 1.0 for p in pts) or any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError(f"decay points must be strictly increasing in (0, 1), got {pts}")
        if not 0.0 < self.warmup_frac < (min(pts) if pts else 1.0):
            raise ValueError("warmup_frac must lie in (0, first decay point)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")
        if self.seq < 1 or self.batch_tokens < self.seq:
            raise ValueError("need 1 <= seq <= batch_tokens")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_points"] = list(self.decay_points)
        return d


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then constant, multiplied by decay_factor at each decay point."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = cfg.warmup_frac * total
    if step < warm:
        return cfg.max_lr * step / warm
    lr = cfg.max_lr
    for p in cfg.decay_points:
        if step >= round(p * total, 9):
            lr *= cfg.decay_factor
    return lr


def decays(name: str) -> bool:
    """Weight decay skips norms, embeddings and expert keys."""
    return not (name.endswith("norm.w") or name.startswith("embed.") or ".key." in name)


@dataclass
class AdamW:
    params: Mapping[str, Tensor]
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and decays(name):
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(params: Mapping[str, Tensor], max_norm: float) -> tuple[float, float]:
    """Scale gradients to global norm <= max_norm; returns (raw norm, clipped norm)."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    raw = nm.global_norm(grads)
    if raw > max_norm:
        coef = max_norm / (raw + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * coef
        return raw, nm.global_norm(p.grad for p in params.values() if p.grad is not None)
    return raw, raw


LossFn = Callable[[Mapping[str, Tensor], Batch], tuple[Tensor, Tensor | None, Tensor | None]]


def run_training(
    params: dict[str, Tensor],
    loss_fn: LossFn,
    batches: Iterator[Batch],
    cfg: TrainConfig,
    log_path=None,
) -> list[dict]:
    opt = AdamW(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    records: list[dict] = []
    fp = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(1, cfg.total_steps + 1):
            batch = next(batches)
            for p in params.values():
                p.grad = None
            with GradTape() as tape:
                lm, aux, z = loss_fn(params, batch)
                total = lm
                if aux is not None:
                    total = nm.add(total, aux)
                if z is not None:
                    total = nm.add(total, z)
            if not math.isfinite(total.item()):
                raise TrainingError(
                    f"non-finite loss at step {step} (lm={lm.item()}, domain={batch.domain})"
                )
            tape.backward(total)
            raw, norm = clip_grads(params, cfg.clip_norm)
            lr = lr_at(step, cfg)
            opt.step(lr)
            rec = {
                "step": step,
                "lr": lr,
                "lm_loss": lm.item(),
                "aux_loss": 0.0 if aux is None else aux.item(),
                "z_loss": 0.0 if z is None else z.item(),
                "total_loss": total.item(),
                "grad_norm": norm,
                "grad_norm_raw": raw,
                "domain": batch.domain,
            }
            records.append(rec)
            if fp is not None:
                fp.write(json.dumps(rec) + "\n")
                fp.flush()
            if step % 100 == 0 or step == cfg.total_steps:
                log.info("step %d lr %.3g lm %.4f aux %.4g z %.4g", step, lr, rec["lm_loss"], rec["aux_loss"], rec["z_loss"])
    finally:
        if fp is not None:
            fp.close()
    return records


def _dense_loss(model: ModelConfig):
    def loss_fn(params, batch):
        logits = transformer_forward(model, params, batch.inputs)
        return lm_loss(logits, batch.targets), None, None

    return loss_fn


def _moe_loss(ckpt: MoECheckpoint):
    model, moe = ckpt.config, ckpt.moe

    def loss_fn(params, batch):
        logits, routings = moe_model_forward(model, moe, params, batch.inputs)
        aux, z = router_losses(routings, moe)
        return lm_loss(logits, batch.targets), aux, z

    return loss_fn


def train_dense(
    config: ModelConfig, corpus: Corpus, steps: int, seed: int, train_cfg: TrainConfig | None = None, log_path=None
) -> tuple[DenseCheckpoint, list[dict]]:
    if steps < 1:
        raise ValueError("steps must be at least 1")
    cfg = replace(train_cfg or TrainConfig(), total_steps=steps, seed=seed)
    if corpus.num_tokens() == 0:
        raise ValueError("empty corpus")
    init = init_dense(config, seed)
    params = as_params(init.tensors, trainable=True)
    batches = batch_iter(corpus, cfg.batch_tokens, cfg.seq, seed=_data_seed(seed))
    records = run_training(params, _dense_loss(config), batches, cfg, log_path)
    return DenseCheckpoint(config, {k: p.data for k, p in params.items()}), records


def trainable_params(ckpt: MoECheckpoint) -> dict[str, Tensor]:
    params = as_params(ckpt.tensors, trainable=True)
    if not ckpt.moe.train_keys:
        for name, p in params.items():
            if ".key." in name:
                p.requires_grad = False
    return params


def train_moe(ckpt: MoECheckpoint, corpus: Corpus, cfg: TrainConfig, log_path=None) -> tuple[MoECheckpoint, list[dict]]:
    if ckpt.frozen:
        ckpt = ckpt.unfrozen()
    params = trainable_params(ckpt)
    batches = batch_iter(corpus, cfg.batch_tokens, cfg.seq, seed=_data_seed(cfg.seed))
    records = run_training(params, _moe_loss(ckpt), batches, cfg, log_path)
    return MoECheckpoint(ckpt.config, {k: p.data for k, p in params.items()}, False, ckpt.moe), records


def _data_seed(seed: int) -> int:
    return int(nm.make_rng(seed, DATA_STREAM).integers(0, 2**63 - 1))


def evaluate(ckpt: DenseCheckpoint, corpus: Corpus, seq: int, rows: int = 8, max_batches: int = 4) -> dict[str, float]:
    """Validation LM loss per domain plus the token-weighted mean under ``"mean"``."""
    params = as_params(ckpt.tensors)
    out: dict[str, float] = {}
    total, count = 0.0, 0
    for domain in corpus.names:
        d_loss, d_count = 0.0, 0
        for batch in eval_batches(corpus, domain, seq, rows, max_batches):
            if isinstance(ckpt, MoECheckpoint):
                logits, _ = moe_model_forward(ckpt.config, ckpt.moe, params, batch.inputs)
            else:
                logits = transformer_forward(ckpt.config, params, batch.inputs)
            n = int((batch.targets != PAD).sum())
            if n == 0:
                continue
            d_loss += lm_loss(logits, batch.targets).item() * n
            d_count += n
        if d_count:
            out[domain] = d_loss / d_count
            total += d_loss
            count += d_count
    out["mean"] = total / count if count else float("nan")
    return out


def read_log(path) -> list[dict]:
    with open(Path(path)) as f:
        return [json.loads(line) for line in f if line.strip()]
