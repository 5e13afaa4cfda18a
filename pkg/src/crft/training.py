"""Optimisation: AdamW, the linear schedule, base pretraining and CRFT training.

During CRFT training the base model's parameters have ``requires_grad``
switched off and gradients are requested only for the edit parameters, so
the base weights cannot move.  Every step checks that no base tensor has
picked up a gradient.
"""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .autodiff import DTYPE
from .info_flow import CriticalSet, CrftConfig, edits_for_batch, identify_batch
from .intervention import InterventionParams, init_params
from .model import MicroTransformer, freeze_digest
from .tasks import PAD, TaskSample

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 2
    grad_accum_steps: int = 16
    learning_rate: float = 9e-4
    warmup_ratio: float = 0.0
    weight_decay: float = 0.06
    dropout: float = 0.05
    seed: int = 42
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.batch_size < 1 or self.grad_accum_steps < 1 or self.epochs < 1:
            raise ValueError("epochs, batch_size and grad_accum_steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class RunHistory:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def log_step(self, step: int, loss: float, lr: float, grad_norm: float) -> None:
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("step counter must increase")
        self.steps.append({"step": step, "loss": loss, "lr": lr, "grad_norm": grad_norm})

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path: str | Path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_ratio * total_steps``, then linear decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_ratio * total_steps
    if step < warm:
        return cfg.learning_rate * step / warm
    return cfg.learning_rate * (total_steps - step) / (total_steps - warm)


def optimizer_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: dict,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """In-place AdamW update with decoupled weight decay.

    ``state`` holds the step count and per-tensor moments; pass the same
    dict on every call.
    """
    b1, b2 = betas
    t = state["t"] = state.get("t", 0) + 1
    moments = state.setdefault("moments", {})
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m, v = moments.setdefault(i, (torch.zeros_like(p), torch.zeros_like(p)))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.mul_(1 - lr * weight_decay)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


# --- batching ----------------------------------------------------------------

def teacher_forced(sample: TaskSample) -> tuple[list[int], list[int], list[bool]]:
    """Input ids, next-token labels and the answer-span mask for one sample."""
    seq = sample.prompt + sample.target
    inputs, labels = seq[:-1], seq[1:]
    n = len(sample.prompt)
    scored = [i >= n - 1 for i in range(len(inputs))]
    return inputs, labels, scored


def collate(samples: Sequence[TaskSample]):
    rows = [teacher_forced(s) for s in samples]
    width = max(len(r[0]) for r in rows)
    inputs = torch.full((len(rows), width), PAD, dtype=torch.long)
    labels = torch.full((len(rows), width), PAD, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.bool)
    for b, (x, y, s) in enumerate(rows):
        inputs[b, : len(x)] = torch.tensor(x)
        labels[b, : len(y)] = torch.tensor(y)
        mask[b, : len(s)] = torch.tensor(s)
    return inputs, labels, mask


def answer_loss(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-example mean NLL over answer positions, averaged over the batch."""
    logp = torch.log_softmax(logits, dim=-1).gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    per_example = -(logp * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1)
    return per_example.mean()


def identify_dataset(model: MicroTransformer, dataset: Sequence[TaskSample], cfg: CrftConfig,
                     chunk: int = 256) -> list[CriticalSet]:
    """Teacher-forced identification for every sample, batched by length."""
    out: list[CriticalSet | None] = [None] * len(dataset)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(dataset):
        by_len.setdefault(len(s.prompt) + len(s.target) - 1, []).append(i)
    for idx in by_len.values():
        for start in range(0, len(idx), chunk):
            part = idx[start:start + chunk]
            rows = [teacher_forced(dataset[i]) for i in part]
            sets = identify_batch(
                model,
                [r[0] for r in rows],
                [len(dataset[i].prompt) for i in part],
                cfg,
                labels=[r[1] for r in rows],
                segment_maps=[dataset[i].segments for i in part],
            )
            for i, cs in zip(part, sets):
                out[i] = cs
    return out  # type: ignore[return-value]


def _base_grad_free(model: MicroTransformer) -> bool:
    return all(p.grad is None and not p.requires_grad for p in model.parameters())


def train_crft(
    model: MicroTransformer,
    dataset: Sequence[TaskSample],
    crft_cfg: CrftConfig,
    train_cfg: TrainConfig,
    on_epoch: Callable[[int, InterventionParams], dict] | None = None,
    critical_sets: Sequence[CriticalSet] | None = None,
    step_hook: Callable[[int, InterventionParams], None] | None = None,
) -> tuple[InterventionParams, RunHistory]:
    """Fit edit parameters on ``dataset`` with the base model frozen.

    Critical positions are identified once on the frozen base (teacher
    forced, ground-truth labels); since neither the base nor the data
    change, re-identifying every epoch would give the same sets.
    """
    if not dataset:
        raise TrainingError("empty dataset")
    crft_cfg.check_model(model.cfg.n_layers)
    digest = freeze_digest(model)
    groups = (0, 1) if crft_cfg.segment_grouping else (0,)
    params = init_params(model.cfg.d_model, crft_cfg.rank, crft_cfg.layers, groups,
                         seed=train_cfg.seed, train_R=crft_cfg.train_R)
    history = RunHistory()

    saved_flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
        p.grad = None
    try:
        if critical_sets is None:
            critical_sets = identify_dataset(model, dataset, crft_cfg)
        trainable = params.trainable()
        n_micro = math.ceil(len(dataset) / train_cfg.batch_size)
        per_epoch = math.ceil(n_micro / train_cfg.grad_accum_steps)
        total = per_epoch * train_cfg.epochs
        if train_cfg.max_steps is not None:
            total = min(total, train_cfg.max_steps)
        rng = random.Random(train_cfg.seed)
        torch_gen_state = torch.random.get_rng_state()
        torch.manual_seed(train_cfg.seed)
        state: dict = {}
        step = 0
        for epoch in range(train_cfg.epochs):
            order = list(range(len(dataset)))
            rng.shuffle(order)
            micro = [order[i:i + train_cfg.batch_size] for i in range(0, len(order), train_cfg.batch_size)]
            for start in range(0, len(micro), train_cfg.grad_accum_steps):
                if step >= total:
                    break
                group = micro[start:start + train_cfg.grad_accum_steps]
                acc = [torch.zeros_like(t) for t in trainable]
                loss_sum = 0.0
                for idx in group:
                    inputs, labels, mask = collate([dataset[i] for i in idx])
                    edits = edits_for_batch([critical_sets[i] for i in idx], params, train_cfg.dropout)
                    logits = model.run(inputs, edits, train=True).logits
                    loss = answer_loss(logits, labels, mask)
                    if not torch.isfinite(loss):
                        raise TrainingError(f"non-finite loss at step {step}, epoch {epoch}: {loss.item()}")
                    grads = torch.autograd.grad(loss / len(group), trainable, allow_unused=True)
                    for a, g in zip(acc, grads):
                        if g is not None:
                            a.add_(g)
                    loss_sum += loss.item()
                if not _base_grad_free(model):
                    raise TrainingError("a base-model tensor received a gradient")
                lr = lr_at(step, total, train_cfg)
                grad_norm = float(torch.sqrt(sum((a**2).sum() for a in acc)))
                optimizer_step(trainable, acc, state, lr, train_cfg.weight_decay, train_cfg.betas, train_cfg.eps)
                if crft_cfg.train_R:
                    params.orthonormalize_()
                step += 1
                history.log_step(step, loss_sum / len(group), lr, grad_norm)
                if step_hook is not None:
                    step_hook(step, params)
            if on_epoch is not None:
                rec = {"epoch": epoch + 1, **on_epoch(epoch + 1, params)}
                history.epochs.append(rec)
                log.info("epoch %d %s", epoch + 1, rec)
            if step >= total:
                break
        torch.random.set_rng_state(torch_gen_state)
    finally:
        for p, flag in zip(model.parameters(), saved_flags):
            p.requires_grad_(flag)
    if freeze_digest(model) != digest:
        raise TrainingError("base model weights changed during CRFT training")
    for t in params.trainable():
        t.grad = None
    return params, history


def pretrain(
    model: MicroTransformer,
    dataset: Sequence[TaskSample],
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 64,
    weight_decay: float = 0.01,
    warmup: int = 200,
    seed: int = 0,
    stop: Callable[[int, MicroTransformer], bool] | None = None,
    check_every: int = 100,
) -> RunHistory:
    """Full-parameter next-token training on the target span.

    ``stop(step, model)`` is polled every ``check_every`` steps and ends
    training early when it returns True.
    """
    if not dataset:
        raise TrainingError("empty dataset")
    history = RunHistory()
    params = [p for p in model.parameters()]
    for p in params:
        p.requires_grad_(True)
    state: dict = {}
    gen = random.Random(seed)
    torch_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        for step in range(1, steps + 1):
            idx = [gen.randrange(len(dataset)) for _ in range(batch_size)]
            inputs, labels, mask = collate([dataset[i] for i in idx])
            logits = model.run(inputs, train=True).logits
            loss = answer_loss(logits, labels, mask)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at pretraining step {step}")
            grads = torch.autograd.grad(loss, params)
            cur = lr * min(1.0, step / max(warmup, 1))
            optimizer_step(params, grads, state, cur, weight_decay)
            model.step += 1
            gn = float(torch.sqrt(sum((g**2).sum() for g in grads)))
            history.log_step(step, loss.item(), cur, gn)
            if stop is not None and step % check_every == 0 and stop(step, model):
                break
    finally:
        torch.random.set_rng_state(torch_state)
        for p in params:
            p.grad = None
    return history
