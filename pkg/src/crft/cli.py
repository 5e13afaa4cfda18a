"""``crft`` command line: pretrain, identify, train, eval, perturb, ablate, heatmap, replay.

Every command writes into a run directory (``--out``, else
``$CRFT_RUN_DIR/<command>-<timestamp>``, else ``runs/...``) and finishes by
writing ``manifest.json``, which records the fully resolved configuration so
``crft replay manifest.json --out DIR`` can regenerate identical metrics.

Configuration precedence: built-in defaults < ``--config`` JSON file < flags.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable

import torch

from . import bench, tasks
from .info_flow import CrftConfig, identify_batch
from .io import atomic_write, export_heatmap, load_checkpoint, save_checkpoint
from .model import MicroTransformer, ModelConfig
from .training import TrainConfig, pretrain, train_crft

log = logging.getLogger("crft")

COMMANDS = ("pretrain", "identify", "train", "eval", "perturb", "ablate", "heatmap")

DEFAULTS: dict = {
    # inv_from / rule_noise only shape the pretraining split; every other split is plain.
    "task": {"n_steps": 4, "n_filler": 16, "modulus": 10, "shots": 0, "inv_from": 4, "rule_noise": 0.1,
             "train_size": 8000, "crft_train_size": 1000, "val_size": 300, "test_size": 500, "data_seed": 0},
    "model": {"n_layers": 2, "n_heads": 4, "d_model": 64, "d_ff": 256, "max_seq": 64, "dropout": 0.0},
    "pretrain": {"max_steps": 2000, "lr": 3e-3, "batch_size": 32, "weight_decay": 0.01, "warmup": 200,
                 "target_acc": None, "check_every": 250, "seed": 0},
    "crft": CrftConfig().to_dict(),
    "train": {**TrainConfig().to_dict(), "learning_rate": 1e-2},
    "perturb": {"noise_levels": [0.0, 1.0, 2.0, 4.0, 8.0], "top_k": 5, "bottom_k": 5,
                "trials": 4, "seed": 0, "rms_scale": False},
    "ablate": {"axes": ["threshold"]},
    "heatmap": {"layer": 0, "kind": "attention", "format": "pgm", "example": 0, "head": None},
    "paths": {"checkpoint": None, "interventions": None, "data": None, "test_data": None},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _layers(text: str) -> list[int]:
    try:
        a, b = text.split(":")
        return [int(a), int(b)]
    except ValueError:
        raise argparse.ArgumentTypeError("layer range must look like A:B") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers") from None


# flag -> (section, key)
FLAG_MAP = {
    "strategy": ("crft", "strategy"), "alpha": ("crft", "alpha"), "beta": ("crft", "beta"),
    "k_int": ("crft", "k_int"), "criteria": ("crft", "criteria"), "chain": ("crft", "chain_mode"),
    "layers": ("crft", "layer_range"), "rank": ("crft", "rank"), "train_r": ("crft", "train_R"),
    "segments": ("crft", "segment_grouping"), "prefix": ("crft", "prefix"), "suffix": ("crft", "suffix"),
    "epochs": ("train", "epochs"), "lr": ("train", "learning_rate"), "batch_size": ("train", "batch_size"),
    "grad_accum": ("train", "grad_accum_steps"), "weight_decay": ("train", "weight_decay"),
    "dropout": ("train", "dropout"), "warmup_ratio": ("train", "warmup_ratio"),
    "noise_levels": ("perturb", "noise_levels"), "trials": ("perturb", "trials"),
    "rms_scale": ("perturb", "rms_scale"), "axis": ("ablate", "axes"),
    "layer": ("heatmap", "layer"), "kind": ("heatmap", "kind"), "format": ("heatmap", "format"),
    "example": ("heatmap", "example"), "head": ("heatmap", "head"),
    "checkpoint": ("paths", "checkpoint"), "interventions": ("paths", "interventions"),
    "data": ("paths", "data"), "test_data": ("paths", "test_data"),
    "n_steps": ("task", "n_steps"), "n_filler": ("task", "n_filler"), "modulus": ("task", "modulus"),
    "shots": ("task", "shots"), "train_size": ("task", "train_size"), "test_size": ("task", "test_size"),
    "data_seed": ("task", "data_seed"), "inv_from": ("task", "inv_from"),
    "rule_noise": ("task", "rule_noise"), "target_acc": ("pretrain", "target_acc"),
    "max_steps": ("pretrain", "max_steps"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crft", description="Critical-representation fine-tuning lab")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--out", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--checkpoint", type=str)
        p.add_argument("--interventions", type=str)
        p.add_argument("--data", type=str)
        p.add_argument("--test-data", type=str)
        p.add_argument("--n-steps", type=int)
        p.add_argument("--n-filler", type=int)
        p.add_argument("--modulus", type=int)
        p.add_argument("--shots", type=int)
        p.add_argument("--train-size", type=int)
        p.add_argument("--test-size", type=int)
        p.add_argument("--data-seed", type=int)
        p.add_argument("--inv-from", type=int)
        p.add_argument("--rule-noise", type=float)
        p.add_argument("--strategy", type=str.upper, choices=["SAF", "SSF", "MAF", "MSF", "UNION_ATTN",
                                                              "UNION_SAL", "FIXED", "RANDOM"])
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--k-int", type=int)
        p.add_argument("--criteria", choices=["order", "score", "random"])
        p.add_argument("--chain", choices=["inherit", "fresh"])
        p.add_argument("--layers", type=_layers)
        p.add_argument("--rank", type=int)
        p.add_argument("--train-r", action="store_const", const=True)
        p.add_argument("--segments", action="store_const", const=True)
        p.add_argument("--prefix", type=int)
        p.add_argument("--suffix", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--grad-accum", type=int)
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--dropout", type=float)
        p.add_argument("--warmup-ratio", type=float)
        p.add_argument("--noise-levels", type=_floats)
        p.add_argument("--trials", type=int)
        p.add_argument("--rms-scale", action="store_const", const=True)
        p.add_argument("--axis", action="append", choices=list(bench.AXES))
        p.add_argument("--layer", type=int)
        p.add_argument("--kind", choices=["attention", "saliency"])
        p.add_argument("--format", choices=["csv", "pgm"])
        p.add_argument("--example", type=int)
        p.add_argument("--head", type=int)
        p.add_argument("--target-acc", type=float)
        p.add_argument("--max-steps", type=int)
    rp = sub.add_parser("replay")
    rp.add_argument("manifest", type=Path)
    rp.add_argument("--out", type=Path)
    return parser


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
    for flag, (section, key) in FLAG_MAP.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    if getattr(args, "seed", None) is not None:
        for section in ("crft", "train", "pretrain", "perturb"):
            cfg[section]["seed"] = args.seed
    for key in ("checkpoint", "interventions", "data", "test_data"):
        if cfg["paths"][key]:
            cfg["paths"][key] = str(Path(cfg["paths"][key]).resolve())
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _crft_cfg(cfg: dict) -> CrftConfig:
    return CrftConfig(**cfg["crft"])


def _train_cfg(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def _task_data(cfg: dict, split: str, size_key: str) -> list[tasks.TaskSample]:
    t = cfg["task"]
    seed = t["data_seed"] * 10 + {"train": 1, "val": 2, "test": 3, "crft": 4}[split]
    mixed = {"inv_from": t["inv_from"], "rule_noise": t["rule_noise"]} if split == "train" else {}
    return tasks.gen_chain_arith(t[size_key], n_steps=t["n_steps"], modulus=t["modulus"], seed=seed,
                                 split="train" if split == "crft" else split,
                                 n_filler=t["n_filler"], shots=t["shots"], **mixed)


def _data(cfg: dict, key: str, split: str, size_key: str) -> list[tasks.TaskSample]:
    path = cfg["paths"][key]
    return tasks.load_dataset(path) if path else _task_data(cfg, split, size_key)


def _model(cfg: dict) -> MicroTransformer:
    path = cfg["paths"]["checkpoint"]
    if not path:
        raise UsageError("this command needs --checkpoint")
    model = load_checkpoint(path)
    if not isinstance(model, MicroTransformer):
        raise UsageError(f"{path} is not a model checkpoint")
    return model


def _interventions(cfg: dict):
    path = cfg["paths"]["interventions"]
    if not path:
        return None, None
    params = load_checkpoint(path)
    crft_cfg = getattr(params, "crft_config", None) or _crft_cfg(cfg)
    return params, crft_cfg


# --- commands ------------------------------------------------------------------

def cmd_pretrain(cfg: dict, out: Path) -> dict:
    train = _data(cfg, "data", "train", "train_size")
    val = _task_data(cfg, "val", "val_size")
    test = _data(cfg, "test_data", "test", "test_size")
    mcfg = ModelConfig(vocab_size=tasks.VOCAB_SIZE, **cfg["model"])
    pc = cfg["pretrain"]
    model = MicroTransformer(mcfg, seed=pc["seed"])
    checks = []

    def stop(step, m):
        acc = bench.evaluate(m, val).accuracy
        checks.append({"step": step, "val_accuracy": acc})
        return pc["target_acc"] is not None and acc >= pc["target_acc"]

    history = pretrain(model, train, pc["max_steps"], lr=pc["lr"], batch_size=pc["batch_size"],
                       weight_decay=pc["weight_decay"], warmup=pc["warmup"], seed=pc["seed"], stop=stop,
                       check_every=pc["check_every"])
    save_checkpoint(out / "base.ckpt", model)
    history.write_jsonl(out / "history.jsonl")
    for name, data in (("train", train), ("val", val), ("test", test)):
        tasks.save_dataset(data, out / f"{name}.jsonl")
    metrics = {"steps": model.step, "val_accuracy": checks[-1]["val_accuracy"] if checks else None,
               "test_accuracy": bench.evaluate(model, test).accuracy, "checks": checks}
    _write_json(out / "metrics.json", metrics)
    return {"base.ckpt": out / "base.ckpt", "metrics.json": out / "metrics.json",
            "history.jsonl": out / "history.jsonl"}


def cmd_identify(cfg: dict, out: Path) -> dict:
    model = _model(cfg)
    data = _data(cfg, "data", "test", "test_size")
    crft_cfg = _crft_cfg(cfg)
    lines = []
    total = 0
    for i, s in enumerate(data):
        cs = identify_batch(model, [s.prompt], [len(s.prompt)], crft_cfg, segment_maps=[s.segments])[0]
        rec = {"index": i, "layers": cs.layers, "positions": cs.positions.tolist(), "groups": cs.groups.tolist()}
        total += int((cs.positions >= 0).sum())
        lines.append(json.dumps(rec, sort_keys=True))
    atomic_write(out / "critical_sets.jsonl", ("\n".join(lines) + "\n").encode())
    _write_json(out / "metrics.json", {"n_examples": len(data),
                                       "mean_positions_per_layer": total / max(len(data) * len(crft_cfg.layers), 1)})
    return {"critical_sets.jsonl": out / "critical_sets.jsonl", "metrics.json": out / "metrics.json"}


def cmd_train(cfg: dict, out: Path) -> dict:
    model = _model(cfg)
    train = _data(cfg, "data", "crft", "crft_train_size")
    test = _data(cfg, "test_data", "test", "test_size")
    crft_cfg, train_cfg = _crft_cfg(cfg), _train_cfg(cfg)
    params, history = train_crft(model, train, crft_cfg, train_cfg)
    save_checkpoint(out / "interventions.ckpt", params, crft_cfg)
    history.write_jsonl(out / "history.jsonl")
    n_base = sum(p.numel() for p in model.parameters())
    metrics = {
        "baseline_accuracy": bench.evaluate(model, test).accuracy,
        "crft_accuracy": bench.evaluate(model, test, params, crft_cfg).accuracy,
        "trainable_parameters": params.n_trainable(),
        "trainable_fraction": params.n_trainable() / n_base,
        "steps": len(history.steps),
    }
    _write_json(out / "metrics.json", metrics)
    return {"interventions.ckpt": out / "interventions.ckpt", "history.jsonl": out / "history.jsonl",
            "metrics.json": out / "metrics.json"}


def cmd_eval(cfg: dict, out: Path) -> dict:
    model = _model(cfg)
    data = _data(cfg, "data", "test", "test_size")
    params, crft_cfg = _interventions(cfg)
    res = bench.evaluate(model, data, params, crft_cfg)
    lines = [json.dumps({k: r[k] for k in ("index", "output", "answer", "expected", "correct")}, sort_keys=True)
             for r in res.records]
    atomic_write(out / "records.jsonl", ("\n".join(lines) + "\n").encode())
    _write_json(out / "metrics.json", {"accuracy": res.accuracy, "n_examples": len(data),
                                       "interventions": params is not None})
    return {"records.jsonl": out / "records.jsonl", "metrics.json": out / "metrics.json"}


def cmd_perturb(cfg: dict, out: Path) -> dict:
    model = _model(cfg)
    data = _data(cfg, "data", "test", "test_size")
    pc = cfg["perturb"]
    curve = bench.noise_experiment(model, data, _crft_cfg(cfg), pc["top_k"], pc["bottom_k"], pc["noise_levels"],
                                   pc["trials"], pc["seed"], pc["rms_scale"])
    _write_json(out / "metrics.json", curve.to_dict())
    return {"metrics.json": out / "metrics.json"}


def cmd_ablate(cfg: dict, out: Path) -> dict:
    model = _model(cfg)
    train = _data(cfg, "data", "crft", "crft_train_size")
    test = _data(cfg, "test_data", "test", "test_size")
    axes = {a: bench.AXES[a] for a in cfg["ablate"]["axes"]}
    rows = bench.ablation_suite(model, train, test, _crft_cfg(cfg), _train_cfg(cfg), axes)
    atomic_write(out / "ablation.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode())
    _write_json(out / "metrics.json", {"cells": [{k: v for k, v in r.items() if k != "config"} for r in rows]})
    return {"ablation.jsonl": out / "ablation.jsonl", "metrics.json": out / "metrics.json"}


def cmd_heatmap(cfg: dict, out: Path) -> dict:
    from .info_flow import attention_gradients, attention_grid, saliency_grid

    model = _model(cfg)
    data = _data(cfg, "data", "test", "test_size")
    hc = cfg["heatmap"]
    if not 0 <= hc["example"] < len(data):
        raise UsageError(f"--example {hc['example']} outside dataset of size {len(data)}")
    sample = data[hc["example"]]
    params, crft_cfg = _interventions(cfg)
    edits = None
    if params is not None:
        sets = bench.inference_sets(model, [sample.prompt], crft_cfg, [sample.segments])
        from .info_flow import edits_for_batch
        edits = edits_for_batch(sets, params)
    tokens = torch.tensor([sample.prompt])
    if hc["kind"] == "attention":
        with torch.no_grad():
            grid = attention_grid(model.run(tokens, edits), hc["layer"], head=hc["head"])
    else:
        trace = model.run(tokens, edits)
        grid = saliency_grid(trace, hc["layer"], attention_gradients(trace), head=hc["head"])
    path = export_heatmap(grid, out / f"heatmap.{hc['format']}", hc["format"])
    _write_json(out / "metrics.json", {"layer": hc["layer"], "kind": hc["kind"], "size": grid.size})
    return {path.name: path, "metrics.json": out / "metrics.json"}


HANDLERS: dict[str, Callable[[dict, Path], dict]] = {
    "pretrain": cmd_pretrain, "identify": cmd_identify, "train": cmd_train, "eval": cmd_eval,
    "perturb": cmd_perturb, "ablate": cmd_ablate, "heatmap": cmd_heatmap,
}


def run_dir(command: str, out: Path | None) -> Path:
    if out is not None:
        return Path(out)
    root = Path(os.environ.get("CRFT_RUN_DIR", "runs"))
    return root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"


def execute(command: str, cfg: dict, out: Path, argv: list[str]) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    outputs = HANDLERS[command](cfg, out)
    manifest = {
        "command": command,
        "argv": argv,
        "config": cfg,
        "seed": cfg["train"]["seed"],
        "inputs": {k: v for k, v in cfg["paths"].items() if v},
        "outputs": {k: str(Path(v).resolve()) for k, v in sorted(outputs.items())},
        "digests": {k: _sha256(Path(v)) for k, v in sorted(outputs.items())},
        "duration_s": time.perf_counter() - t0,
    }
    _write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def run_command(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        if args.command == "replay":
            try:
                manifest = json.loads(Path(args.manifest).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from None
            command, cfg = manifest["command"], manifest["config"]
            out = run_dir(command, args.out)
        else:
            command, cfg = args.command, resolve_config(args)
            out = run_dir(command, args.out)
        try:
            _crft_cfg(cfg)
            _train_cfg(cfg)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from None
    except UsageError as exc:
        print(exc, file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    try:
        path = execute(command, cfg, out, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.exception("command %s failed", command)
        print(f"crft {command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


def main() -> None:
    logging.basicConfig(level=os.environ.get("CRFT_LOG", "WARNING"))
    sys.exit(run_command())


if __name__ == "__main__":
    main()
