"""Evaluation and the validation experiments built on top of it."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .info_flow import CriticalSet, CrftConfig, NoiseEdit, edits_for_batch, identify_batch
from .intervention import InterventionParams
from .model import MicroTransformer, greedy_decode
from .tasks import EOS, TaskSample, extract_answer

log = logging.getLogger(__name__)


@dataclass
class EvalResult:
    accuracy: float
    records: list[dict]

    @property
    def correct(self) -> list[bool]:
        return [r["correct"] for r in self.records]


@dataclass
class RetentionCurve:
    levels: list[float]
    top: list[float]
    bottom: list[float]
    n_examples: int = 0
    sigma_scale: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"levels": self.levels, "top": self.top, "bottom": self.bottom, "n_examples": self.n_examples}


def _by_prompt_len(dataset: Sequence[TaskSample]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(dataset):
        groups.setdefault(len(s.prompt), []).append(i)
    return groups


def inference_sets(model: MicroTransformer, prompts: Sequence[Sequence[int]], cfg: CrftConfig,
                   segment_maps=None) -> list[CriticalSet]:
    """Prompt-only identification (self-predicted labels for saliency)."""
    n = len(prompts[0])
    return identify_batch(model, [list(p) for p in prompts], [n] * len(prompts), cfg, labels=None,
                          segment_maps=segment_maps)


@torch.no_grad()
def evaluate(
    model: MicroTransformer,
    dataset: Sequence[TaskSample],
    params: InterventionParams | None = None,
    crft_cfg: CrftConfig | None = None,
    chunk: int = 512,
) -> EvalResult:
    """Greedy-decode every prompt; correct iff the extracted final answer matches."""
    if not dataset:
        raise ValueError("empty dataset")
    if params is not None and crft_cfg is None:
        raise ValueError("edit parameters need the identification config that goes with them")
    records: list[dict | None] = [None] * len(dataset)
    for idx_all in _by_prompt_len(dataset).values():
        for start in range(0, len(idx_all), chunk):
            idx = idx_all[start:start + chunk]
            prompts = [dataset[i].prompt for i in idx]
            max_new = max(len(dataset[i].target) for i in idx) + 2
            edits = None
            if params is not None and crft_cfg.k_int > 0:
                with torch.enable_grad():
                    sets = inference_sets(model, prompts, crft_cfg, [dataset[i].segments for i in idx])
                edits = edits_for_batch(sets, params)
            outs = greedy_decode(model, torch.tensor(prompts), max_new, edits, stop_token=EOS)
            for i, out in zip(idx, outs):
                got = extract_answer(out)
                records[i] = {"index": i, "output": out, "answer": got, "expected": dataset[i].answer,
                              "correct": got == dataset[i].answer}
    acc = sum(r["correct"] for r in records) / len(records)
    return EvalResult(acc, records)  # type: ignore[arg-type]


def rank_positions(cs: CriticalSet, layer: int, k: int, top: bool) -> list[int]:
    scores = cs.scores[cs.layers.index(layer)]
    order = sorted(scores, key=lambda p: (-scores[p], p)) if top else sorted(scores, key=lambda p: (scores[p], -p))
    return order[:k]


@torch.no_grad()
def noise_experiment(
    model: MicroTransformer,
    dataset: Sequence[TaskSample],
    identify_cfg: CrftConfig,
    top_k: int = 5,
    bottom_k: int = 5,
    noise_levels: Sequence[float] = (0.0, 0.01, 0.02),
    trials: int = 4,
    seed: int = 0,
    rms_scale: bool = False,
) -> RetentionCurve:
    """Retention of originally-correct answers when the top/bottom scored
    representations of every layer receive Gaussian noise.

    Positions are ranked by score among the candidates that pass
    ``identify_cfg``'s filter on the prompt, layer by layer.  With
    ``rms_scale`` the noise std is multiplied by the RMS of the hidden states
    being perturbed.
    """
    base = evaluate(model, dataset)
    kept = [s for s, ok in zip(dataset, base.correct) if ok]
    if not kept:
        raise ValueError("no correctly answered examples to perturb")
    rank_cfg = replace(identify_cfg, chain_mode="fresh",
                       layer_range=(0, model.cfg.n_layers - 1), k_int=max(top_k, bottom_k, 1))
    gen = torch.Generator().manual_seed(seed)
    d = model.cfg.d_model
    top_ret, bot_ret = [], []
    for sigma in noise_levels:
        res = {}
        for which, k in (("top", top_k), ("bottom", bottom_k)):
            hits = total = 0
            for idx in _by_prompt_len(kept).values():
                group = [kept[i] for i in idx]
                prompts = torch.tensor([s.prompt for s in group])
                with torch.enable_grad():
                    sets = inference_sets(model, prompts.tolist(), rank_cfg)
                scale = None
                if rms_scale:
                    hid = model.run(prompts).hidden
                    scale = [float(h.pow(2).mean().sqrt()) for h in hid[1:]]
                B = len(group) * trials
                batch = prompts.repeat_interleave(trials, dim=0)
                edits = {}
                for layer in range(model.cfg.n_layers):
                    pos = torch.tensor([rank_positions(cs, layer, k, which == "top") for cs in sets])
                    pos = pos.repeat_interleave(trials, dim=0)
                    std = sigma * (scale[layer] if scale else 1.0)
                    noise = torch.randn(B, pos.shape[1], d, generator=gen, dtype=torch.float64) * std
                    edits[layer] = NoiseEdit(pos, noise)
                max_new = max(len(s.target) for s in group) + 2
                outs = greedy_decode(model, batch, max_new, edits, stop_token=EOS)
                answers = [s.answer for s in group for _ in range(trials)]
                hits += sum(extract_answer(o) == a for o, a in zip(outs, answers))
                total += B
            res[which] = hits / total
        top_ret.append(res["top"])
        bot_ret.append(res["bottom"])
        log.info("sigma=%g top=%.3f bottom=%.3f", sigma, res["top"], res["bottom"])
    return RetentionCurve(list(noise_levels), top_ret, bot_ret, len(kept))


def layer_ranges(n_layers: int) -> dict[str, tuple[int, int]]:
    half = max(n_layers // 2, 1)
    return {
        "first": (0, 0),
        "last": (n_layers - 1, n_layers - 1),
        "first-half": (0, half - 1),
        "second-half": (min(half, n_layers - 1), n_layers - 1),
        "all": (0, n_layers - 1),
    }


AXES = {
    "threshold": [1.0, 0.25, 0.05, 0.01],
    "k_int": [0, 14, 20, 30],
    "criteria": ["order", "score", "random"],
    "layers": ["first", "last", "first-half", "second-half", "all"],
    "random_seed": list(range(37, 48)),
}


def ablation_cells(base_cfg: CrftConfig, axes: dict[str, Sequence], n_layers: int) -> list[tuple[dict, CrftConfig]]:
    """Cartesian product of the requested axes applied on top of ``base_cfg``."""
    names = list(axes)
    ranges = layer_ranges(n_layers)
    cells = []
    for combo in itertools.product(*(axes[n] for n in names)):
        cfg = replace(base_cfg)
        for name, value in zip(names, combo):
            if name == "threshold":
                cfg = replace(cfg, alpha=value, beta=value)
            elif name == "k_int":
                cfg = replace(cfg, k_int=value)
            elif name == "criteria":
                cfg = replace(cfg, criteria=value)
            elif name == "layers":
                cfg = replace(cfg, layer_range=ranges[value])
            elif name == "random_seed":
                cfg = replace(cfg, strategy="RANDOM", seed=value)
            else:
                raise ValueError(f"unknown ablation axis {name!r}")
        cells.append((dict(zip(names, combo)), cfg))
    return cells


def ablation_suite(
    model: MicroTransformer,
    train_data: Sequence[TaskSample],
    test_data: Sequence[TaskSample],
    base_cfg: CrftConfig,
    train_cfg,
    axes: dict[str, Sequence] | None = None,
) -> list[dict]:
    """Train and evaluate one CRFT run per grid cell, sequentially."""
    from .training import train_crft

    axes = axes or {"threshold": AXES["threshold"]}
    baseline = None
    rows = []
    for values, cfg in ablation_cells(base_cfg, axes, model.cfg.n_layers):
        if cfg.k_int == 0:
            if baseline is None:
                baseline = evaluate(model, test_data).accuracy
            acc = baseline
        else:
            params, _ = train_crft(model, train_data, cfg, train_cfg)
            acc = evaluate(model, test_data, params, cfg).accuracy
        row = {**values, "accuracy": acc, "config": cfg.to_dict(), "seed": train_cfg.seed}
        log.info("ablation %s -> %.4f", values, acc)
        rows.append(row)
    return rows
