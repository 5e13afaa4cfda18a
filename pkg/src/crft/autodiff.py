"""Reverse-mode differentiation primitives used by the model and the saliency path.

Tensors are ``torch.float64`` tensors; torch's autograd is the tape.  This
module adds the pieces the rest of the package needs on top of it: a causal
softmax whose output is a first-class graph node, a cross-entropy that can
score against the model's own argmax predictions, and :class:`GradTape`,
which tracks named intermediate tensors (attention matrices) and hands back
their gradients after a single backward pass.
"""
from __future__ import annotations

import torch

DTYPE = torch.float64


class TapeError(RuntimeError):
    pass


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def causal_mask(n: int, device=None) -> torch.Tensor:
    """Boolean ``n x n`` mask, True strictly above the diagonal."""
    return torch.ones(n, n, dtype=torch.bool, device=device).triu(1)


def softmax_causal(scores: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax over the lower triangle of the trailing square dims.

    Entries above the diagonal come out as exact zeros.
    """
    if scores.dim() < 2 or scores.shape[-1] != scores.shape[-2]:
        raise ValueError(f"softmax_causal needs square trailing dims, got {tuple(scores.shape)}")
    n = scores.shape[-1]
    if n == 0:
        raise ValueError("softmax_causal on an empty matrix")
    masked = scores.masked_fill(causal_mask(n, scores.device), float("-inf"))
    return torch.softmax(masked, dim=-1)


def cross_entropy_self(
    logits: torch.Tensor,
    labels: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean negative log-probability over scored positions.

    ``logits`` has shape ``(..., n, V)``.  With ``labels=None`` the labels are
    the argmax of ``logits`` itself (self-predicted mode).  ``mask`` selects
    the scored positions; by default every position is scored.
    """
    vocab = logits.shape[-1]
    if labels is None:
        labels = logits.detach().argmax(dim=-1)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}")
    if mask is None:
        mask = torch.ones_like(labels, dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    scored = labels[mask]
    if scored.numel() == 0:
        raise ValueError("cross_entropy_self: no scored positions")
    if int(scored.min()) < 0 or int(scored.max()) >= vocab:
        raise ValueError(f"label index out of range for vocab size {vocab}")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, labels.clamp(0, vocab - 1).unsqueeze(-1)).squeeze(-1)
    return -(picked[mask]).mean()


class GradTape:
    """Named-tensor watcher around one autograd graph.

    ``watch`` marks a tensor (leaf or intermediate) whose gradient should be
    kept; ``backward`` runs once and returns ``{name: grad}``.  Watched
    tensors unreachable from the loss get all-zero gradients.
    """

    def __init__(self) -> None:
        self._watched: dict[str, torch.Tensor] = {}
        self._done = False

    def watch(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if self._done:
            raise TapeError("tape already consumed by backward()")
        if tensor.is_leaf and not tensor.requires_grad:
            tensor.requires_grad_(True)
        elif not tensor.is_leaf:
            tensor.retain_grad()
        self._watched[name] = tensor
        return tensor

    @property
    def names(self) -> list[str]:
        return list(self._watched)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._watched[name]

    def backward(self, loss: torch.Tensor) -> dict[str, torch.Tensor]:
        if self._done:
            raise TapeError("backward() called twice on one tape")
        if loss.numel() != 1 or loss.dim() != 0:
            raise TapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
        self._done = True
        tensors = list(self._watched.values())
        connected = [t for t in tensors if t.requires_grad]
        grads = torch.autograd.grad(loss, connected, allow_unused=True) if connected else []
        by_id = {id(t): g for t, g in zip(connected, grads)}
        out = {}
        for name, t in self._watched.items():
            g = by_id.get(id(t))
            out[name] = torch.zeros_like(t) if g is None else g.detach()
        return out


def backward(loss: torch.Tensor, tensors: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """One-shot convenience: gradients of ``loss`` for every tensor in ``tensors``."""
    tape = GradTape()
    for name, t in tensors.items():
        tape.watch(name, t)
    return tape.backward(loss)
