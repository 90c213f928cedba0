"""Command-line pipeline: train-dense, collect-keys, upcycle, train-moe, analyze, compare.

Every value can come from (highest precedence first) a command-line flag, the
JSON document given by ``--config``, the ``MRF_SEED`` environment variable
(seed only) or the built-in default. Each command writes ``run.json`` into its
output directory before doing any work; passing that file back through
``--config`` replays the run.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import analysis, checkpoint
from .checkpoint import CheckpointError, MoECheckpoint
from .config import ConfigError, ModelConfig, MoEConfig
from .data import CorpusError, eval_batches, load_corpus
from .moe import forward as moe_forward_ckpt, write_trace_jsonl
from .trainer import TrainConfig, TrainingError, read_log, train_dense, train_moe
from .upcycler import HeadStats, build_router_bank, collect_key_stats, upcycle

log = logging.getLogger("router_upcycling")

MANIFEST_NAME = "run.json"
PROG = "router-upcycling"
PATH_OPTIONS = {"corpus", "ckpt", "keys", "out", "out_dir", "log"}


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    flag: str
    default: object
    help: str
    type: Callable | None = None
    choices: tuple | None = None
    required: bool = False
    is_bool: bool = False
    input_path: bool = False

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


_MODEL = [
    Opt("--d-model", 128, "model width d", int),
    Opt("--n-heads", 16, "attention heads h (power of two)", int),
    Opt("--head-dim", 8, "per-head dimension; d_model must equal n_heads*head_dim", int),
    Opt("--n-layers", 2, "transformer blocks", int),
    Opt("--ffn-hidden", 256, "FFN hidden width", int),
    Opt("--seq-len", 256, "maximum sequence length (position table size)", int),
]

_TRAIN = [
    Opt("--corpus", None, "corpus root: one sub-directory of .txt files per domain", str, required=True, input_path=True),
    Opt("--steps", 2000, "optimizer steps", int),
    Opt("--seed", 0, "random seed (MRF_SEED overrides the default)", int),
    Opt("--max-lr", 5e-4, "peak learning rate", float),
    Opt("--warmup-frac", 0.01, "fraction of steps spent in linear warmup", float),
    Opt("--batch-tokens", 8192, "tokens per optimizer step", int),
    Opt("--seq", 256, "training window length", int),
    Opt("--weight-decay", 0.1, "decoupled weight decay", float),
    Opt("--clip-norm", 1.0, "global gradient-norm clip", float),
    Opt("--out", None, "output checkpoint directory", str, required=True),
    Opt("--log", None, "metrics JSON-lines file (default: OUT/metrics.jsonl)", str),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "train-dense": ("Pretrain the dense byte-level transformer.", _MODEL + _TRAIN),
    "collect-keys": (
        "Average per-head attention keys of a dense checkpoint over a corpus.",
        [
            Opt("--ckpt", None, "dense checkpoint directory", str, required=True, input_path=True),
            Opt("--corpus", None, "corpus root directory", str, required=True, input_path=True),
            Opt("--iters", 10, "collection iterations", int),
            Opt("--batch", 8, "windows per iteration", int),
            Opt("--seq", 128, "window length", int),
            Opt("--out", None, "output directory for the head statistics", str, required=True),
        ],
    ),
    "upcycle": (
        "Turn a dense checkpoint into an MoE checkpoint.",
        [
            Opt("--ckpt", None, "dense checkpoint directory", str, required=True, input_path=True),
            Opt("--keys", None, "head statistics from collect-keys (needed for mixture routing)", str, input_path=True),
            Opt("--experts", 8, "number of experts n", int),
            Opt("--routers", 8, "number of routers m (mixture routing)", int),
            Opt("--topk", 2, "experts per token k (switch forces 1)", int),
            Opt("--router-mode", "mixture", "router type", str, choices=("mixture", "vanilla", "switch", "mlp")),
            Opt("--mixture", "summation", "how router scores combine", str, choices=("summation", "max_pooling")),
            Opt("--split-heads", False, "split every head in two (m = 2h)", is_bool=True),
            Opt("--train-keys", True, "update expert keys during MoE training", is_bool=True),
            Opt("--aux-coeff", 0.02, "load-balancing loss coefficient", float),
            Opt("--z-coeff", 0.001, "router z-loss coefficient", float),
            Opt("--router-std", 0.02, "std of the normal init for baseline routers", float),
            Opt("--seed", 0, "seed for baseline router init", int),
            Opt("--out", None, "output MoE checkpoint directory", str, required=True),
        ],
    ),
    "train-moe": (
        "Train an upcycled MoE checkpoint.",
        [Opt("--ckpt", None, "MoE checkpoint directory", str, required=True, input_path=True)] + _TRAIN,
    ),
    "analyze": (
        "Routing-diversity and expert-specialization reports for an MoE checkpoint.",
        [
            Opt("--ckpt", None, "MoE checkpoint directory", str, required=True, input_path=True),
            Opt("--corpus", None, "corpus root directory", str, required=True, input_path=True),
            Opt("--out-dir", None, "directory for diversity.csv, specialization.csv and summary.json", str, required=True),
            Opt("--probe-seed", 0, "seed for the specialization probe windows", int),
            Opt("--probe-tokens", 4096, "tokens in the specialization probe", int),
            Opt("--seq", 64, "evaluation window length", int),
            Opt("--rows", 8, "windows per evaluation batch", int),
            Opt("--max-batches", 4, "evaluation batches per domain", int),
            Opt("--layers", None, "comma-separated layer indices (default: all)", str),
            Opt("--traces", False, "also write per-token routing traces to traces.jsonl", is_bool=True),
        ],
    ),
    "compare": (
        "Align metrics logs by step and report lm_loss deltas against the first log.",
        [
            Opt("--out-dir", None, "write comparison.csv, curves.csv and summary.json here (default: print CSV)", str),
        ],
    ),
}


def _add_opt(p: argparse.ArgumentParser, o: Opt) -> None:
    text = o.help + ("" if o.default is None else f" (default: {o.default})")
    if o.required:
        text += " [required]"
    if o.is_bool:
        p.add_argument(o.flag, action=argparse.BooleanOptionalAction, default=None, help=text)
    else:
        p.add_argument(o.flag, type=o.type, choices=o.choices, default=None, help=text)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog=PROG, description=__doc__.split("\n\n")[0])
    ap.add_argument("--log-level", default="INFO", help="logging level for stderr (default: INFO)")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (desc, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", default=None, help="JSON file of option values (a run.json also works); flags override it")
        if name == "compare":
            p.add_argument("logs", nargs="*", metavar="[LABEL=]LOG", help="metrics logs; label defaults to the file stem")
        for o in opts:
            _add_opt(p, o)
    return ap


def resolve_options(command: str, args: argparse.Namespace, env=None) -> dict:
    """Merge defaults, MRF_SEED, the --config document and explicit flags."""
    env = os.environ if env is None else env
    opts = COMMANDS[command][1]
    known = {o.dest: o for o in opts}
    values = {o.dest: o.default for o in opts}
    if "seed" in values and env.get("MRF_SEED"):
        try:
            values["seed"] = int(env["MRF_SEED"])
        except ValueError as exc:
            raise ConfigError(f"MRF_SEED must be an integer, got {env['MRF_SEED']!r}") from exc
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if isinstance(doc, dict) and "options" in doc and "command" in doc:
            if doc["command"] != command:
                raise ConfigError(f"{args.config} records a {doc['command']!r} run, not {command!r}")
            doc = doc["options"]
        if not isinstance(doc, dict):
            raise ConfigError("--config must hold a JSON object")
        for key, value in doc.items():
            dest = key.replace("-", "_")
            if dest == "logs" and command == "compare":
                values["logs"] = value
                continue
            if dest not in known:
                raise ConfigError(f"unknown option {key!r} in {args.config}")
            values[dest] = value
    for dest in known:
        v = getattr(args, dest, None)
        if v is not None:
            values[dest] = v
    if command == "compare":
        if args.logs:
            values["logs"] = list(args.logs)
        if not values.get("logs"):
            raise UsageError("compare needs at least one metrics log")
    missing = [known[d].flag for d in known if known[d].required and values[d] is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    # absolute paths keep run.json replayable from any working directory
    for dest in PATH_OPTIONS & values.keys():
        if values[dest] is not None:
            values[dest] = str(Path(values[dest]).resolve())
    if command == "compare":
        values["logs"] = [f"{label}={Path(path).resolve()}" for label, path in _parse_logs(values["logs"])]
    return values


# --- run manifest ----------------------------------------------------------


def _blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path) -> str:
    """Git-style hash: a blob hash for files, a hash over sorted (path, blob) lines for directories."""
    path = Path(path)
    if path.is_file():
        return _blob_hash(path.read_bytes())
    if not path.is_dir():
        raise FileNotFoundError(f"input {path} does not exist")
    lines = []
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name != MANIFEST_NAME):
        lines.append(f"{f.relative_to(path).as_posix()} {_blob_hash(f.read_bytes())}")
    return hashlib.sha1("\n".join(lines).encode()).hexdigest()


def config_hash(command: str, options: dict) -> str:
    doc = json.dumps({"command": command, "options": options}, sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    options: dict
    seed: int | None
    config_hash: str
    input_hashes: dict[str, str]
    started: str
    finished: str | None = None
    status: str = "running"
    outputs: list[str] = field(default_factory=list)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.__dict__, indent=1, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _input_paths(command: str, options: dict) -> dict[str, str]:
    out = {}
    for o in COMMANDS[command][1]:
        if o.input_path and options.get(o.dest):
            out[o.dest] = options[o.dest]
    if command == "compare":
        for label, path in _parse_logs(options["logs"]):
            out[f"log:{label}"] = path
    return out


def _output_dir(command: str, options: dict) -> str | None:
    return options.get("out_dir") if command in ("analyze", "compare") else options.get("out")


# --- commands --------------------------------------------------------------


def _train_cfg(o: dict) -> TrainConfig:
    return TrainConfig(
        max_lr=o["max_lr"],
        warmup_frac=o["warmup_frac"],
        clip_norm=o["clip_norm"],
        weight_decay=o["weight_decay"],
        total_steps=o["steps"],
        batch_tokens=o["batch_tokens"],
        seq=o["seq"],
        seed=o["seed"],
    )


def _log_path(o: dict) -> Path:
    return Path(o["log"]) if o.get("log") else Path(o["out"]) / "metrics.jsonl"


def cmd_train_dense(o: dict) -> list[str]:
    model = ModelConfig(
        d_model=o["d_model"],
        n_heads=o["n_heads"],
        head_dim=o["head_dim"],
        n_layers=o["n_layers"],
        ffn_hidden=o["ffn_hidden"],
        seq_len=o["seq_len"],
    )
    corpus = load_corpus(o["corpus"])
    log_path = _log_path(o)
    ckpt, records = train_dense(model, corpus, o["steps"], o["seed"], _train_cfg(o), log_path)
    checkpoint.save(ckpt, o["out"])
    log.info("dense loss %.4f -> %.4f", records[0]["lm_loss"], records[-1]["lm_loss"])
    return [str(Path(o["out"]) / "weights.bin"), str(log_path)]


def cmd_collect_keys(o: dict) -> list[str]:
    ckpt = checkpoint.load(o["ckpt"])
    if isinstance(ckpt, MoECheckpoint):
        raise CheckpointError("collect-keys needs a dense checkpoint")
    stats = collect_key_stats(ckpt.freeze(), load_corpus(o["corpus"]), o["iters"], o["batch"], o["seq"])
    stats.save(o["out"])
    log.info("averaged keys over %d tokens", stats.token_count)
    return [str(Path(o["out"]) / "weights.bin")]


def cmd_upcycle(o: dict) -> list[str]:
    dense = checkpoint.load(o["ckpt"])
    if isinstance(dense, MoECheckpoint):
        raise CheckpointError("upcycle needs a dense checkpoint")
    cfg = MoEConfig.for_model(
        dense.config,
        n_experts=o["experts"],
        n_routers=o["routers"],
        top_k=o["topk"],
        router_mode=o["router_mode"],
        mixture=o["mixture"],
        split_heads=o["split_heads"],
        train_keys=o["train_keys"],
        aux_coeff=o["aux_coeff"],
        z_coeff=o["z_coeff"],
        router_std=o["router_std"],
    )
    bank = None
    if cfg.router_mode == "mixture":
        if not o.get("keys"):
            raise ConfigError("mixture routing needs --keys from collect-keys")
        bank = build_router_bank(HeadStats.load(o["keys"]), cfg)
    moe = upcycle(dense.freeze(), bank, cfg, seed=o["seed"])
    checkpoint.save(moe, o["out"])
    return [str(Path(o["out"]) / "weights.bin")]


def cmd_train_moe(o: dict) -> list[str]:
    ckpt = checkpoint.load(o["ckpt"])
    if not isinstance(ckpt, MoECheckpoint):
        raise CheckpointError("train-moe needs an MoE checkpoint; run upcycle first")
    log_path = _log_path(o)
    trained, _ = train_moe(ckpt, load_corpus(o["corpus"]), _train_cfg(o), log_path)
    checkpoint.save(trained, o["out"])
    return [str(Path(o["out"]) / "weights.bin"), str(log_path)]


def _parse_layers(text: str | None, n_layers: int) -> list[int]:
    if not text:
        return list(range(n_layers))
    try:
        layers = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"--layers must be comma-separated integers, got {text!r}") from exc
    bad = [x for x in layers if not 0 <= x < n_layers]
    if bad:
        raise ConfigError(f"layer(s) {bad} out of range for {n_layers} layers")
    return layers


def cmd_analyze(o: dict) -> list[str]:
    ckpt = checkpoint.load(o["ckpt"])
    if not isinstance(ckpt, MoECheckpoint):
        raise CheckpointError("analyze needs an MoE checkpoint")
    corpus = load_corpus(o["corpus"])
    layers = _parse_layers(o["layers"], ckpt.config.n_layers)
    out = Path(o["out_dir"])
    div = analysis.routing_diversity(ckpt, corpus, layers, o["seq"], o["rows"], o["max_batches"])
    probe = analysis.probe_tokens(corpus, o["probe_tokens"], o["seq"], o["probe_seed"])
    spec = analysis.expert_specialization(ckpt, probe, layers)
    div.write_csv(out / "diversity.csv")
    spec.write_csv(out / "specialization.csv")
    summary = {
        "gates": analysis.GATE_KIND,
        "gate_std": {f"{lay}/{dom}": div.std(lay, dom) for lay, dom in sorted(div.mean_gates)},
        "gate_entropy_bits": {f"{lay}/{dom}": div.entropy(lay, dom) for lay, dom in sorted(div.mean_gates)},
        "mean_pairwise_cosine": {str(lay): spec.mean_pairwise(lay) for lay in sorted(spec.matrices)},
        "tokens_per_domain": div.token_counts,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    written = [str(out / n) for n in ("diversity.csv", "specialization.csv", "summary.json")]
    if o["traces"]:
        with open(out / "traces.jsonl", "w") as fp:
            for domain in corpus.names:
                for batch in eval_batches(corpus, domain, o["seq"], o["rows"], o["max_batches"]):
                    _, traces, _ = moe_forward_ckpt(ckpt, batch.inputs)
                    for layer in layers:
                        write_trace_jsonl(fp, traces[layer], layer, domain)
        written.append(str(out / "traces.jsonl"))
    return written


def _parse_logs(specs: list[str]) -> list[tuple[str, str]]:
    out = []
    for s in specs:
        label, sep, path = str(s).partition("=")
        if not sep:
            label, path = Path(s).stem, s
        out.append((label, path))
    labels = [lbl for lbl, _ in out]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate log labels {labels}; name them LABEL=PATH")
    return out


def cmd_compare(o: dict) -> list[str]:
    logs = {label: read_log(path) for label, path in _parse_logs(o["logs"])}
    for label, recs in logs.items():
        if not recs:
            raise ConfigError(f"log {label!r} is empty")
    table = analysis.compare_runs(logs)
    groups: dict[str, list] = {}
    for label, recs in logs.items():
        groups.setdefault(label.split("#")[0], []).append(recs)
    summary = {
        "final_deltas": analysis.final_deltas(table),
        "final_lm_loss": {k: {"mean": m, "std": s} for k, (m, s) in analysis.summarize_final(groups).items()},
    }
    if not o.get("out_dir"):
        w = csv.DictWriter(sys.stdout, fieldnames=list(table[0].keys()))
        w.writeheader()
        w.writerows(table)
        print(json.dumps(summary), file=sys.stderr)
        return []
    out = Path(o["out_dir"])
    analysis.write_comparison_csv(out / "comparison.csv", table)
    analysis.write_curves_csv(out / "curves.csv", logs)
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return [str(out / n) for n in ("comparison.csv", "curves.csv", "summary.json")]


HANDLERS = {
    "train-dense": cmd_train_dense,
    "collect-keys": cmd_collect_keys,
    "upcycle": cmd_upcycle,
    "train-moe": cmd_train_moe,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
}


def _category(exc: Exception) -> str:
    if isinstance(exc, analysis.StepGridError):
        return "step-grid-mismatch"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, CorpusError):
        return "corpus"
    if isinstance(exc, TrainingError):
        return "training"
    if isinstance(exc, (ConfigError, ValueError, json.JSONDecodeError)):
        return "validation"
    if isinstance(exc, OSError):
        return "io"
    return "runtime"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(message)s")
    command = args.command
    manifest, out_dir = None, None
    try:
        options = resolve_options(command, args)
        inputs = {k: content_hash(p) for k, p in _input_paths(command, options).items()}
        manifest = RunManifest(
            command=command,
            options=options,
            seed=options.get("seed"),
            config_hash=config_hash(command, options),
            input_hashes=inputs,
            started=_now(),
        )
        out_dir = _output_dir(command, options)
        if out_dir is not None:
            manifest.write(out_dir)
        outputs = HANDLERS[command](options)
        if out_dir is not None:
            manifest.outputs = outputs
            manifest.finished = _now()
            manifest.status = "ok"
            manifest.write(out_dir)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{PROG} {command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure maps to one error line
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if manifest is not None and out_dir is not None:
            manifest.status = f"failed: {_category(exc)}"
            manifest.finished = _now()
            manifest.write(out_dir)
        print(f"error[{_category(exc)}]: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
