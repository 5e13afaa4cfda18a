"""Pre-norm decoder-only transformer whose forward pass records everything.

Layer ``l`` (``0 <= l < n_layers``) denotes block ``l``.  ``trace.hidden[0]``
is the embedding output and ``trace.hidden[l + 1]`` the residual stream
leaving block ``l``; edits registered for layer ``l`` act on that output
before block ``l + 1`` reads it.  ``trace.attention[l]`` is block ``l``'s
post-softmax attention, kept as a live graph node so saliency can
differentiate through it.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import torch
from torch import nn

from .autodiff import DTYPE, softmax_causal

Edit = Callable[..., torch.Tensor]


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 32
    max_seq: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardTrace:
    hidden: list[torch.Tensor]
    attention: list[torch.Tensor]
    logits: torch.Tensor
    batched: bool = True

    def hidden_stack(self) -> torch.Tensor:
        out = torch.stack(self.hidden)
        return out if self.batched else out[:, 0]

    def attention_stack(self) -> torch.Tensor:
        out = torch.stack(self.attention)
        return out if self.batched else out[:, 0]

    def final_logits(self) -> torch.Tensor:
        return self.logits if self.batched else self.logits[0]

    @property
    def n_layers(self) -> int:
        return len(self.attention)

    @property
    def seq_len(self) -> int:
        return self.logits.shape[-2]


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, dtype=DTYPE)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
        self.fc1 = nn.Linear(cfg.d_model, cfg.d_ff, dtype=DTYPE)
        self.fc2 = nn.Linear(cfg.d_ff, cfg.d_model, dtype=DTYPE)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (t.view(B, n, self.n_heads, self.d_head).transpose(1, 2) for t in (q, k, v))
        attn = softmax_causal(q @ k.transpose(-1, -2) / math.sqrt(self.d_head))
        mixed = (attn @ v).transpose(1, 2).reshape(B, n, d)
        x = x + self.drop(self.proj(mixed))
        x = x + self.drop(self.fc2(torch.nn.functional.gelu(self.fc1(self.ln2(x)))))
        return x, attn


class MicroTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.step = 0
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.tok = nn.Embedding(cfg.vocab_size, cfg.d_model, dtype=DTYPE)
            self.pos = nn.Embedding(cfg.max_seq, cfg.d_model, dtype=DTYPE)
            self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
            self.ln_f = nn.LayerNorm(cfg.d_model, dtype=DTYPE)
            self.unembed = nn.Linear(cfg.d_model, cfg.vocab_size, dtype=DTYPE)
            for p in self.parameters():
                if p.dim() == 2:
                    nn.init.normal_(p, std=0.02)
        self.eval()

    def run(
        self,
        tokens: torch.Tensor,
        edits: Mapping[int, Edit | list[Edit]] | None = None,
        train: bool = False,
    ) -> ForwardTrace:
        """Batched forward over ``(B, n)`` token ids."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.dim() != 2:
            raise ValueError("run() expects a (batch, seq) token tensor")
        B, n = tokens.shape
        if n > self.cfg.max_seq:
            raise ValueError(f"sequence length {n} exceeds max_seq {self.cfg.max_seq}")
        if n == 0:
            raise ValueError("empty sequence")
        if int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size:
            raise ValueError(f"token index outside vocabulary of size {self.cfg.vocab_size}")
        if edits:
            bad = [l for l in edits if not 0 <= l < self.cfg.n_layers]
            if bad:
                raise ValueError(f"edit layers {bad} outside [0, {self.cfg.n_layers - 1}]")
        self.train(train)
        x = self.tok(tokens) + self.pos(torch.arange(n))
        hidden = [x]
        attention = []
        for layer, block in enumerate(self.blocks):
            x, attn = block(x)
            attention.append(attn)
            if edits and layer in edits:
                fns = edits[layer]
                for fn in fns if isinstance(fns, (list, tuple)) else [fns]:
                    x = fn(x, train=train)
            hidden.append(x)
        logits = self.unembed(self.ln_f(x))
        self.eval()
        return ForwardTrace(hidden=hidden, attention=attention, logits=logits)


def forward(
    model: MicroTransformer,
    tokens,
    interventions: Mapping[int, Edit | list[Edit]] | None = None,
    mode: str = "eval",
) -> ForwardTrace:
    """Forward one sequence (1-D ids) or a batch (2-D ids) and capture the trace."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    t = torch.as_tensor(tokens, dtype=torch.long)
    single = t.dim() == 1
    trace = model.run(t.unsqueeze(0) if single else t, interventions, train=mode == "train")
    trace.batched = not single
    return trace


@torch.no_grad()
def greedy_decode(
    model: MicroTransformer,
    prompt,
    max_new: int,
    interventions: Mapping[int, Edit | list[Edit]] | None = None,
    stop_token: int | None = None,
) -> list[int] | list[list[int]]:
    """Greedy continuation of a prompt (1-D) or equal-length prompts (2-D).

    Edits are re-applied on every step; their positions index into the
    prompt, so newly generated positions are never edited.  Generation
    stops at ``stop_token`` (included in the output) or after ``max_new``.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    seq = torch.as_tensor(prompt, dtype=torch.long)
    single = seq.dim() == 1
    if single:
        seq = seq.unsqueeze(0)
    if seq.shape[1] == 0:
        raise ValueError("prompt must be non-empty")
    if seq.shape[1] > model.cfg.max_seq:
        raise ValueError(f"prompt length {seq.shape[1]} exceeds max_seq {model.cfg.max_seq}")
    B = seq.shape[0]
    out: list[list[int]] = [[] for _ in range(B)]
    done = torch.zeros(B, dtype=torch.bool)
    for _ in range(max_new):
        logits = model.run(seq, interventions).logits
        nxt = logits[:, -1].argmax(dim=-1)
        for i in range(B):
            if not done[i]:
                out[i].append(int(nxt[i]))
                if stop_token is not None and int(nxt[i]) == stop_token:
                    done[i] = True
        if bool(done.all()) or seq.shape[1] == model.cfg.max_seq:
            break
        seq = torch.cat([seq, nxt.unsqueeze(1)], dim=1)
    return out[0] if single else out


def freeze_digest(model: nn.Module) -> str:
    """SHA-256 over every named base tensor (name, shape, raw float64 bytes)."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes())
    return h.hexdigest()
