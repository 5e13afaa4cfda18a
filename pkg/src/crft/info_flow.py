"""Information-flow grids and the filters that pick positions to edit.

A grid for layer ``l`` is an ``N x N`` causal matrix whose cell ``(i, j)``
measures how much position ``i`` draws on position ``j`` inside block ``l``.
Two valuations exist: head-averaged attention, and saliency (attention
times the loss gradient w.r.t. attention, in magnitude, head-averaged and
row-normalised).

Layer conventions follow :mod:`crft.model`: editing layer ``l`` means
editing the output of block ``l``.  The self-referential filter for layer
``l`` reads block ``l``'s grid (the attention that produced those states);
the multi-referential filter reads block ``l + 1``'s grid, i.e. how later
positions consume the states being edited, falling back to block ``l`` on
the last layer or when ``align_grids`` is set.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .autodiff import GradTape, cross_entropy_self
from .intervention import SENTINEL, InterventionParams, LayerEdit
from .model import ForwardTrace, MicroTransformer, greedy_decode

STRATEGIES = ("SAF", "SSF", "MAF", "MSF", "UNION_ATTN", "UNION_SAL", "FIXED", "RANDOM")
CRITERIA = ("order", "score", "random")
CHAIN_MODES = ("inherit", "fresh")

Scored = dict[int, float]


class DegenerateGridError(ValueError):
    pass


@dataclass
class InfoGrid:
    layer: int
    values: np.ndarray
    kind: str

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass
class CrftConfig:
    strategy: str = "SAF"
    alpha: float = 0.05
    beta: float = 0.05
    k_int: int = 14
    criteria: str = "order"
    chain_mode: str = "fresh"
    layer_range: tuple[int, int] = (0, 1)
    rank: int = 8
    train_R: bool = False
    segment_grouping: bool = False
    prefix: int = 7
    suffix: int = 7
    seed: int = 42
    align_grids: bool = False
    head: int | None = None

    def __post_init__(self):
        self.strategy = self.strategy.upper()
        self.layer_range = tuple(int(x) for x in self.layer_range)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.criteria not in CRITERIA:
            raise ValueError(f"unknown selection criteria {self.criteria!r}")
        if self.chain_mode not in CHAIN_MODES:
            raise ValueError(f"unknown chain mode {self.chain_mode!r}")
        if self.k_int < 0:
            raise ValueError("k_int must be >= 0")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        lo, hi = self.layer_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad layer range {self.layer_range}")
        for name in ("alpha", "beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def layers(self) -> list[int]:
        return list(range(self.layer_range[0], self.layer_range[1] + 1))

    def check_model(self, n_layers: int) -> None:
        if self.layer_range[1] >= n_layers:
            raise ValueError(f"layer range {self.layer_range} exceeds model depth {n_layers}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_range"] = list(self.layer_range)
        return d


@dataclass
class CriticalSet:
    """Fixed-width position lists per layer, ``-1``-padded, plus group ids."""

    layers: list[int]
    positions: np.ndarray
    groups: np.ndarray
    scores: list[Scored] = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(len(self.layers), -1)
        self.groups = np.asarray(self.groups, dtype=np.int64).reshape(self.positions.shape)

    @property
    def width(self) -> int:
        return self.positions.shape[1]

    def at(self, layer: int) -> list[int]:
        return self.positions[self.layers.index(layer)].tolist()

    def selected(self, layer: int) -> list[int]:
        return [p for p in self.at(layer) if p != SENTINEL]

    def as_edits(self, params: InterventionParams, dropout: float = 0.0) -> dict[int, LayerEdit]:
        return edits_for_batch([self], params, dropout)


def edits_for_batch(sets: Sequence[CriticalSet], params: InterventionParams, dropout: float = 0.0) -> dict[int, LayerEdit]:
    """Stack per-example critical sets into one ``LayerEdit`` per layer."""
    if not sets or sets[0].width == 0:
        return {}
    layers = sets[0].layers
    out = {}
    for li, layer in enumerate(layers):
        pos = torch.as_tensor(np.stack([s.positions[li] for s in sets]))
        grp = torch.as_tensor(np.stack([s.groups[li] for s in sets]))
        out[layer] = LayerEdit(params, layer, pos, grp, dropout=dropout)
    return out


# --- grids -----------------------------------------------------------------

def _check_layer(trace: ForwardTrace, layer: int) -> None:
    if not 0 <= layer < trace.n_layers:
        raise IndexError(f"layer {layer} outside [0, {trace.n_layers - 1}]")


def attention_grid(trace: ForwardTrace, layer: int, batch_index: int = 0, head: int | None = None) -> InfoGrid:
    """Head-mean (or single-head) post-softmax attention of block ``layer``."""
    _check_layer(trace, layer)
    attn = trace.attention[layer][batch_index].detach()
    vals = attn[head] if head is not None else attn.mean(dim=0)
    return InfoGrid(layer, vals.numpy().copy(), "attention")


def saliency_grid(
    trace: ForwardTrace,
    layer: int,
    gradients: Sequence[torch.Tensor] | Mapping[int, torch.Tensor] | None,
    batch_index: int = 0,
    head: int | None = None,
) -> InfoGrid:
    """``|A * dL/dA|``, head-averaged, each row scaled to sum 1 over its prefix.

    Rows with no saliency mass at all are left as zeros; a grid that is zero
    everywhere raises :class:`DegenerateGridError`.
    """
    _check_layer(trace, layer)
    if gradients is None:
        raise ValueError("saliency needs attention gradients; run a backward pass first")
    try:
        grad = gradients[layer]
    except (KeyError, IndexError):
        raise ValueError(f"missing attention gradient for layer {layer}") from None
    attn = trace.attention[layer][batch_index].detach()
    raw = (attn * grad[batch_index]).abs()
    raw = raw[head] if head is not None else raw.mean(dim=0)
    raw = raw.numpy()
    totals = raw.sum(axis=1, keepdims=True)
    if not np.any(totals > 0):
        raise DegenerateGridError(f"saliency grid for layer {layer} is identically zero")
    vals = np.divide(raw, totals, out=np.zeros_like(raw), where=totals > 0)
    return InfoGrid(layer, vals, "saliency")


def attention_gradients(trace: ForwardTrace, labels=None, mask=None) -> list[torch.Tensor]:
    """Gradient of the (per-example summed) cross-entropy w.r.t. every attention map.

    ``labels=None`` scores the model against its own argmax predictions.
    Examples in a batch are independent, so summing their losses leaves each
    example's gradient untouched.
    """
    logits = trace.logits
    tape = GradTape()
    for layer, attn in enumerate(trace.attention):
        tape.watch(f"attn{layer}", attn)
    B = logits.shape[0]
    if labels is None:
        labels = logits.detach().argmax(dim=-1)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(B, -1)
    mask = None if mask is None else torch.as_tensor(mask, dtype=torch.bool).reshape(B, -1)
    loss = sum(
        cross_entropy_self(logits[b], labels[b], None if mask is None else mask[b]) for b in range(B)
    )
    grads = tape.backward(loss)
    return [grads[f"attn{layer}"] for layer in range(trace.n_layers)]


# --- filters ---------------------------------------------------------------

def self_referential_filter(grid: InfoGrid | np.ndarray, alpha: float, limit: int | None = None) -> Scored:
    """Positions whose diagonal cell reaches ``alpha`` (``>=``), scored by it."""
    vals = grid.values if isinstance(grid, InfoGrid) else np.asarray(grid)
    n = vals.shape[0] if limit is None else min(limit, vals.shape[0])
    diag = np.diagonal(vals)[:n]
    return {int(i): float(diag[i]) for i in np.flatnonzero(diag >= alpha)}


def column_means(vals: np.ndarray) -> np.ndarray:
    N = vals.shape[0]
    return np.tril(vals).sum(axis=0) / (N - np.arange(N))


def multi_referential_filter(grid: InfoGrid | np.ndarray, beta: float, limit: int | None = None) -> Scored:
    """Positions whose mean outgoing flow (column mean over rows ``i >= j``) reaches ``beta``."""
    vals = grid.values if isinstance(grid, InfoGrid) else np.asarray(grid)
    n = vals.shape[0] if limit is None else min(limit, vals.shape[0])
    means = column_means(vals)[:n]
    return {int(j): float(means[j]) for j in np.flatnonzero(means >= beta)}


def union_filter(a: Scored, b: Scored) -> Scored:
    out = dict(a)
    for pos, score in b.items():
        out[pos] = max(score, out[pos]) if pos in out else score
    return dict(sorted(out.items()))


def chain_inherit(previous: Sequence[int] | None, current: Scored) -> Scored:
    """Keep only candidates that were selected on the previous layer."""
    if previous is None:
        return dict(current)
    keep = {p for p in previous if p != SENTINEL}
    return {p: s for p, s in current.items() if p in keep}


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def select_positions(candidates: Scored | Sequence[int], k_int: int, criteria: str = "order", seed: int = 0) -> list[int]:
    if k_int < 1:
        raise ValueError("k_int must be >= 1")
    if not isinstance(candidates, Mapping):
        candidates = {int(p): 0.0 for p in candidates}
    pos = sorted(candidates)
    if criteria == "order":
        chosen = pos[:k_int]
    elif criteria == "score":
        chosen = sorted(pos, key=lambda p: (-candidates[p], p))[:k_int]
    elif criteria == "random":
        rng = np.random.default_rng(seed)
        take = min(k_int, len(pos))
        chosen = sorted(int(p) for p in rng.choice(pos, size=take, replace=False)) if take else []
    else:
        raise ValueError(f"unknown selection criteria {criteria!r}")
    return list(chosen) + [SENTINEL] * (k_int - len(chosen))


# --- identification --------------------------------------------------------

def _needs_saliency(strategy: str) -> bool:
    return strategy in ("SSF", "MSF", "UNION_SAL")


def _candidates(cfg: CrftConfig, grids: Mapping[str, list[InfoGrid]], layer: int, n_layers: int, limit: int) -> Scored:
    s = cfg.strategy
    nxt = layer if cfg.align_grids or layer + 1 >= n_layers else layer + 1
    kind = "saliency" if _needs_saliency(s) else "attention"
    g = grids[kind]
    self_ref = lambda: self_referential_filter(g[layer], cfg.alpha, limit)
    multi_ref = lambda: multi_referential_filter(g[nxt], cfg.beta, limit)
    if s in ("SAF", "SSF"):
        return self_ref()
    if s in ("MAF", "MSF"):
        return multi_ref()
    return union_filter(self_ref(), multi_ref())


def identify_batch(
    model: MicroTransformer,
    tokens,
    prompt_lens: Sequence[int],
    cfg: CrftConfig,
    labels=None,
    segment_maps: Sequence | None = None,
    label_mask=None,
) -> list[CriticalSet]:
    """Critical sets for equal-length sequences in one forward(/backward) pass.

    Runs on the frozen base with no edits active.  Candidates are limited to
    each example's prompt positions.  Saliency strategies score against
    ``labels`` when given, else against the model's own predictions.
    """
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    B, N = tokens.shape
    L = model.cfg.n_layers
    cfg.check_model(L)
    layers = cfg.layers
    if cfg.k_int == 0:
        empty = np.zeros((len(layers), 0), dtype=np.int64)
        return [CriticalSet(layers, empty, empty) for _ in range(B)]

    grids: dict[str, list[list[InfoGrid]]] = {}
    if cfg.strategy not in ("FIXED", "RANDOM"):
        if _needs_saliency(cfg.strategy):
            with torch.enable_grad():
                trace = model.run(tokens)
                grads = attention_gradients(trace, labels, label_mask)
            grids["saliency"] = [
                [saliency_grid(trace, l, grads, b, cfg.head) for l in range(L)] for b in range(B)
            ]
        else:
            with torch.no_grad():
                trace = model.run(tokens)
            grids["attention"] = [[attention_grid(trace, l, b, cfg.head) for l in range(L)] for b in range(B)]

    out = []
    for b in range(B):
        n = int(prompt_lens[b])
        seq = tuple(tokens[b, :n].tolist())
        rows, scores = [], []
        prev: list[int] | None = None
        for layer in layers:
            if cfg.strategy == "FIXED":
                if cfg.prefix + cfg.suffix > cfg.k_int:
                    raise ValueError("prefix + suffix exceeds k_int")
                fixed = sorted(set(range(min(cfg.prefix, n))) | set(range(max(n - cfg.suffix, 0), n)))
                cand = {p: 0.0 for p in fixed}
                row = select_positions(cand, cfg.k_int, "order")
            elif cfg.strategy == "RANDOM":
                cand = {p: 0.0 for p in range(n)}
                row = select_positions(cand, cfg.k_int, "random", _stable_seed(cfg.seed, layer, seq))
            else:
                per_kind = {k: v[b] for k, v in grids.items()}
                cand = _candidates(cfg, per_kind, layer, L, n)
                if cfg.chain_mode == "inherit":
                    cand = chain_inherit(prev, cand)
                row = select_positions(cand, cfg.k_int, cfg.criteria, _stable_seed(cfg.seed, layer, seq))
            prev = row
            rows.append(row)
            scores.append(cand)
        pos = np.array(rows, dtype=np.int64)
        if segment_maps is not None:
            gid = np.array(segment_maps[b].group_ids(cfg.segment_grouping), dtype=np.int64)
            groups = np.where(pos == SENTINEL, 0, gid[np.clip(pos, 0, None)])
        else:
            groups = np.zeros_like(pos)
        out.append(CriticalSet(layers, pos, groups, scores))
    return out


def identify(model: MicroTransformer, tokens, segment_map=None, cfg: CrftConfig | None = None,
             labels=None, prompt_len: int | None = None) -> CriticalSet:
    """Critical set for one sequence.  ``prompt_len`` defaults to the whole sequence."""
    cfg = cfg or CrftConfig()
    tokens = list(tokens)
    n = len(tokens) if prompt_len is None else prompt_len
    lab = None if labels is None else [list(labels)]
    return identify_batch(model, [tokens], [n], cfg, lab, None if segment_map is None else [segment_map])[0]


# --- perturbation ----------------------------------------------------------

class NoiseEdit:
    """Adds a fixed noise vector at given positions of one layer's output."""

    def __init__(self, positions: torch.Tensor, noise: torch.Tensor):
        self.positions = torch.as_tensor(positions, dtype=torch.long)
        self.noise = noise

    def __call__(self, h: torch.Tensor, train: bool = False) -> torch.Tensor:
        B = h.shape[0]
        rows = torch.arange(B).unsqueeze(1).expand_as(self.positions)
        valid = self.positions != SENTINEL
        out = h.clone()
        out[rows[valid], self.positions[valid]] += self.noise[valid]
        return out


def _default_extract(generated: Sequence[int], stop_token: int | None):
    if stop_token is None:
        return generated[-1] if generated else None
    if stop_token not in generated:
        return None
    cut = generated[: list(generated).index(stop_token)]
    return cut[-1] if cut else None


def perturbation_oracle(
    model: MicroTransformer,
    tokens: Sequence[int],
    expected_answer,
    epsilon: float,
    trials: int,
    seed: int = 0,
    max_new: int = 8,
    stop_token: int | None = None,
    extract: Callable[[Sequence[int]], object] | None = None,
    layers: Sequence[int] | None = None,
) -> np.ndarray:
    """Flip rate of answer correctness when one representation is perturbed.

    Returns an ``(n_layers, len(tokens))`` array; entry ``(l, p)`` is the
    fraction of ``trials`` in which Gaussian noise of std ``epsilon`` added to
    position ``p`` of layer ``l``'s output changes whether the greedy answer
    is correct.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    extract = extract or (lambda g: _default_extract(g, stop_token))
    prompt = torch.as_tensor(list(tokens), dtype=torch.long)
    n, d = len(prompt), model.cfg.d_model
    layers = list(range(model.cfg.n_layers)) if layers is None else list(layers)
    base_ok = extract(greedy_decode(model, prompt, max_new, stop_token=stop_token)) == expected_answer
    gen = torch.Generator().manual_seed(seed)
    rates = np.zeros((model.cfg.n_layers, n))
    batch = prompt.unsqueeze(0).expand(trials, -1)
    for layer in layers:
        for p in range(n):
            noise = torch.randn(trials, 1, d, generator=gen, dtype=torch.float64) * epsilon
            edit = NoiseEdit(torch.full((trials, 1), p), noise)
            outs = greedy_decode(model, batch, max_new, {layer: edit}, stop_token=stop_token)
            flips = sum((extract(o) == expected_answer) != base_ok for o in outs)
            rates[layer, p] = flips / trials
    return rates
