"""Soft sparsification: scale kept shapes by score, fuse the rest into one row."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


def keep_count(num_shapes: int, eta: float) -> int:
    """How many shapes the top-eta fraction keeps; never fewer than one."""
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    if num_shapes < 1:
        raise ValueError("num_shapes must be positive")
    # +1e-9 guards float representation, e.g. 0.3 * 10 == 2.999...
    return max(1, int(math.floor(eta * num_shapes + 1e-9)))


def select_top_eta(
    scores: torch.Tensor, eta: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Split shape indices into (kept, dropped) by score rank.

    Keeps the `keep_count` highest-scoring indices, breaking ties toward the
    smaller index. Both returned index tensors are sorted ascending. Accepts
    (J,) scores or a (B, J) batch.
    """
    scores = torch.as_tensor(scores)
    j = scores.shape[-1]
    k = keep_count(j, eta)
    order = torch.argsort(scores, dim=-1, descending=True, stable=True)
    kept = order[..., :k].sort(dim=-1).values
    dropped = order[..., k:].sort(dim=-1).values
    return kept, dropped


@dataclass
class SparsifiedShapes:
    """Ordered soft shapes; the fused row, when present, is last.

    `matrix` is (Num, d) or (B, Num, d); `kept` holds the input indices of the
    kept rows (ascending, per sample when batched).
    """

    matrix: torch.Tensor
    kept: torch.Tensor
    has_fused: bool
    eta: float

    @property
    def num_shapes(self) -> int:
        return self.matrix.shape[-2]


def sparsify(
    embeddings: torch.Tensor,
    scores: torch.Tensor,
    eta: float,
    drop_fused: bool = False,
    selection: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> SparsifiedShapes:
    """Scale the top-eta shapes by their scores and fuse the remainder.

    Kept rows stay in their original order, each multiplied by its score; the
    dropped rows collapse into a single appended row holding the sum of their
    score-weighted embeddings. With ``drop_fused`` the low-scored shapes are
    discarded outright (hard sparsification). ``selection`` replays a frozen
    (kept, dropped) split instead of re-ranking the scores.
    """
    squeeze = embeddings.dim() == 2
    if squeeze:
        embeddings = embeddings.unsqueeze(0)
        scores = torch.as_tensor(scores).unsqueeze(0)
    if scores.shape != embeddings.shape[:2]:
        raise ValueError(
            f"scores shape {tuple(scores.shape)} does not match embeddings "
            f"{tuple(embeddings.shape[:2])}"
        )
    if selection is None:
        kept, dropped = select_top_eta(scores, eta)
    else:
        kept, dropped = selection
        if kept.dim() == 1:
            kept = kept.unsqueeze(0)
            dropped = dropped.unsqueeze(0)

    dim = embeddings.shape[-1]
    soft = embeddings * scores.unsqueeze(-1)
    rows = torch.gather(soft, 1, kept.unsqueeze(-1).expand(-1, -1, dim))
    has_fused = dropped.shape[-1] > 0 and not drop_fused
    if has_fused:
        fused = torch.gather(soft, 1, dropped.unsqueeze(-1).expand(-1, -1, dim)).sum(dim=1)
        rows = torch.cat([rows, fused.unsqueeze(1)], dim=1)
    if squeeze:
        rows = rows.squeeze(0)
        kept = kept.squeeze(0)
    return SparsifiedShapes(matrix=rows, kept=kept, has_fused=has_fused, eta=eta)
