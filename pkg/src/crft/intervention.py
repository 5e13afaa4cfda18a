"""Low-rank representation edits.

An edit overwrites the coordinates of a hidden vector ``h`` inside the
``r``-dimensional subspace spanned by the orthonormal rows of ``R`` with a
learned linear source::

    phi(h) = h + R^T (W h + b - R h)

Components of ``h`` orthogonal to that subspace pass through untouched.
One ``(R, W, b)`` triple is shared by every selected position of a given
(layer, group) pair.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import torch

from .autodiff import DTYPE

SENTINEL = -1


class RankError(ValueError):
    pass


def orthonormalize(R: torch.Tensor, tol: float = 1e-10) -> torch.Tensor:
    """Orthonormal rows spanning the row space of ``R`` (Householder QR).

    Row signs are fixed so that an already-orthonormal input comes back
    unchanged up to rounding.
    """
    R = torch.as_tensor(R, dtype=DTYPE)
    if R.dim() != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {tuple(R.shape)}")
    r, d = R.shape
    if r > d:
        raise RankError(f"{r} rows cannot be orthonormal in dimension {d}")
    q, s = torch.linalg.qr(R.detach().T, mode="reduced")
    diag = torch.diagonal(s)
    scale = float(torch.linalg.matrix_norm(R.detach(), ord=2)) if r else 0.0
    if r and float(diag.abs().min()) <= tol * max(scale, 1.0):
        raise RankError("rank-deficient input to orthonormalize")
    signs = torch.where(diag < 0, -1.0, 1.0).to(DTYPE)
    return (q * signs).T.contiguous()


def orthonormality_error(R: torch.Tensor) -> float:
    eye = torch.eye(R.shape[0], dtype=R.dtype)
    R = R.detach()
    return float((R @ R.T - eye).abs().max())


@dataclass
class ParamSet:
    R: torch.Tensor
    W: torch.Tensor
    b: torch.Tensor

    def apply(self, h: torch.Tensor, dropout: float = 0.0, train: bool = False) -> torch.Tensor:
        return apply(h, self, dropout=dropout, train=train)


def apply(h: torch.Tensor, params: ParamSet, dropout: float = 0.0, train: bool = False) -> torch.Tensor:
    """``h + R^T (W h + b - R h)`` over the trailing dimension of ``h``."""
    d = params.R.shape[1]
    if h.shape[-1] != d or params.W.shape != params.R.shape or params.b.shape != (params.R.shape[0],):
        raise ValueError(
            f"dimension mismatch: h {tuple(h.shape)}, R {tuple(params.R.shape)}, "
            f"W {tuple(params.W.shape)}, b {tuple(params.b.shape)}"
        )
    source = h @ params.W.T + params.b
    if train and dropout > 0:
        source = torch.nn.functional.dropout(source, p=dropout, training=True)
    return h + (source - h @ params.R.T) @ params.R


class InterventionParams:
    """Edit parameters keyed by ``(layer, group)``.

    ``train_R=False`` (the default) keeps ``R`` at its random orthonormal
    initialisation and trains only ``W`` and ``b``.
    """

    def __init__(self, d: int, rank: int, sets: dict[tuple[int, int], ParamSet], train_R: bool = False):
        self.d = d
        self.rank = rank
        self.sets = dict(sorted(sets.items()))
        self.train_R = train_R
        for ps in self.sets.values():
            ps.W.requires_grad_(True)
            ps.b.requires_grad_(True)
            ps.R.requires_grad_(train_R)

    @property
    def layers(self) -> list[int]:
        return sorted({layer for layer, _ in self.sets})

    @property
    def groups(self) -> list[int]:
        return sorted({g for _, g in self.sets})

    def __getitem__(self, key: tuple[int, int]) -> ParamSet:
        return self.sets[key]

    def named_tensors(self) -> Iterable[tuple[str, torch.Tensor]]:
        for (layer, group), ps in self.sets.items():
            for name in ("R", "W", "b"):
                yield f"layer{layer}.group{group}.{name}", getattr(ps, name)

    def trainable(self) -> list[torch.Tensor]:
        out = []
        for ps in self.sets.values():
            if self.train_R:
                out.append(ps.R)
            out.extend([ps.W, ps.b])
        return out

    def n_trainable(self) -> int:
        return sum(t.numel() for t in self.trainable())

    @torch.no_grad()
    def orthonormalize_(self) -> None:
        for ps in self.sets.values():
            ps.R.copy_(orthonormalize(ps.R))

    def max_orthonormality_error(self) -> float:
        return max(orthonormality_error(ps.R.detach()) for ps in self.sets.values())


def init_params(
    d: int,
    rank: int,
    layers: Iterable[int],
    groups: Iterable[int] = (0,),
    seed: int = 0,
    train_R: bool = False,
    w_std: float = 1e-3,
) -> InterventionParams:
    if rank > d:
        raise RankError(f"rank {rank} exceeds model dimension {d}")
    if rank < 1:
        raise RankError("rank must be at least 1")
    gen = torch.Generator().manual_seed(seed)
    sets = {}
    for layer in sorted(set(layers)):
        for group in sorted(set(groups)):
            R = orthonormalize(torch.randn(rank, d, generator=gen, dtype=DTYPE))
            W = torch.randn(rank, d, generator=gen, dtype=DTYPE) * w_std
            b = torch.zeros(rank, dtype=DTYPE)
            sets[(layer, group)] = ParamSet(R=R, W=W, b=b)
    return InterventionParams(d, rank, sets, train_R=train_R)


def param_count(rank: int, d: int, n_layers: int, n_groups: int = 1, train_R: bool = False) -> int:
    """Trainable parameter count: ``W`` and ``b`` per (layer, group), plus ``R`` when trained."""
    per_set = (2 if train_R else 1) * rank * d + rank
    return n_layers * n_groups * per_set


class LayerEdit:
    """Applies grouped edits at listed positions of one layer's output.

    ``positions`` and ``groups`` are ``(B, k)`` integer tensors; ``-1``
    entries are skipped.  Unselected positions are returned bit-for-bit.
    """

    def __init__(self, params: InterventionParams, layer: int, positions, groups=None, dropout: float = 0.0):
        self.params = params
        self.layer = layer
        self.positions = torch.as_tensor(positions, dtype=torch.long)
        if self.positions.dim() == 1:
            self.positions = self.positions.unsqueeze(0)
        if groups is None:
            groups = torch.zeros_like(self.positions)
        self.groups = torch.as_tensor(groups, dtype=torch.long).reshape(self.positions.shape)
        self.dropout = dropout

    def __call__(self, h: torch.Tensor, train: bool = False) -> torch.Tensor:
        B, n, _ = h.shape
        pos = self.positions
        if pos.shape[0] == 1 and B > 1:
            pos = pos.expand(B, -1)
            grp = self.groups.expand(B, -1)
        else:
            grp = self.groups
        if pos.shape[0] != B:
            raise ValueError(f"positions batch {pos.shape[0]} does not match hidden batch {B}")
        if bool((pos < SENTINEL).any()) or bool((pos >= n).any()):
            raise IndexError(f"intervention position out of range for sequence length {n}")
        valid = pos != SENTINEL
        if not bool(valid.any()):
            return h
        out = h
        rows = torch.arange(B).unsqueeze(1).expand_as(pos)
        for g in torch.unique(grp[valid]).tolist():
            sel = valid & (grp == g)
            if not bool(sel.any()):
                continue
            mask = torch.zeros(B, n, dtype=torch.bool)
            mask[rows[sel], pos[sel]] = True
            ps = self.params[(self.layer, g)]
            edited = apply(h, ps, dropout=self.dropout, train=train)
            out = torch.where(mask.unsqueeze(-1), edited, out)
        return out
