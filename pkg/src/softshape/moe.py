"""Top-k routed experts for intra-shape patterns, with balancing losses."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

CV_EPS = 1e-10


def coefficient_of_variation(values) -> torch.Tensor:
    """Population standard deviation over mean (epsilon-guarded)."""
    v = values if torch.is_tensor(values) else torch.tensor(values, dtype=torch.float64)
    if v.numel() < 1:
        raise ValueError("need at least one value")
    return v.std(correction=0) / (v.mean() + CV_EPS)


class GateStats:
    """Per-batch accumulator of router mass for the balancing losses.

    `importance` sums the truncated softmax gates, `soft_load` the
    renormalized gates of the selected experts (both keep the autograd
    graph); `hard_load` counts selections for telemetry only.
    """

    def __init__(self, num_experts: int, dtype=torch.float32):
        self.num_experts = num_experts
        self.importance = torch.zeros(num_experts, dtype=dtype)
        self.soft_load = torch.zeros(num_experts, dtype=dtype)
        self.hard_load = torch.zeros(num_experts, dtype=torch.long)
        self.shapes_routed = 0

    def update(self, truncated: torch.Tensor, gates: torch.Tensor, mask: torch.Tensor):
        self.importance = self.importance + truncated.sum(dim=0)
        self.soft_load = self.soft_load + gates.sum(dim=0)
        self.hard_load = self.hard_load + mask.sum(dim=0)
        self.shapes_routed += truncated.shape[0]


def aux_losses(stats: GateStats) -> tuple[torch.Tensor, torch.Tensor]:
    """Squared coefficient of variation of importance and of soft load."""
    if stats.shapes_routed < 1:
        raise ValueError("stats must cover at least one shape")
    return (
        coefficient_of_variation(stats.importance) ** 2,
        coefficient_of_variation(stats.soft_load) ** 2,
    )


class TopKRouter(nn.Module):
    """Softmax router keeping the k largest gates, renormalized to sum 1."""

    def __init__(self, dim: int, num_experts: int, k: int = 1):
        super().__init__()
        if not 1 <= k <= num_experts:
            raise ValueError(f"k must be in [1, {num_experts}], got {k}")
        self.num_experts = num_experts
        self.k = k
        self.weight = nn.Parameter(torch.empty(num_experts, dim))
        nn.init.normal_(self.weight, mean=0.0, std=0.02)

    def forward(
        self, rows: torch.Tensor, mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(S, d) -> (gates, truncated, mask), each (S, num_experts).

        `truncated` zeroes the softmax outside the top k (ties to the smaller
        expert index); `gates` renormalizes the survivors. A precomputed mask
        can be supplied to replay a frozen selection.
        """
        probs = torch.softmax(rows @ self.weight.t(), dim=-1)
        if mask is None:
            if self.k == self.num_experts:
                mask = torch.ones_like(probs, dtype=torch.bool)
            else:
                order = torch.argsort(probs, dim=-1, descending=True, stable=True)
                mask = torch.zeros_like(probs, dtype=torch.bool)
                mask.scatter_(-1, order[..., : self.k], True)
        truncated = probs * mask
        if self.k == self.num_experts:
            gates = probs
        else:
            gates = truncated / truncated.sum(dim=-1, keepdim=True)
        return gates, truncated, mask


def route_topk(embedding: torch.Tensor, router: TopKRouter) -> torch.Tensor:
    """Gate vector for a single d-dimensional embedding; exactly k nonzeros."""
    gates, _, _ = router(embedding.unsqueeze(0))
    return gates.squeeze(0)


class ExpertSet(nn.Module):
    """One GeLU projection per expert; only routed rows are evaluated.

    `evaluations` counts (row, expert) forward evaluations, so tests can
    check the at-most-k compute contract.
    """

    def __init__(self, dim: int, num_experts: int):
        super().__init__()
        self.experts = nn.ModuleList(nn.Linear(dim, dim) for _ in range(num_experts))
        self.evaluations = 0

    def forward(
        self, rows: torch.Tensor, gates: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        """Residual mixture: rows + sum_e gate_e * GeLU(W_e rows + b_e)."""
        mixture = rows.new_zeros(rows.shape)
        for e, expert in enumerate(self.experts):
            idx = mask[:, e].nonzero(as_tuple=True)[0]
            if idx.numel() == 0:
                continue
            hidden = F.gelu(expert(rows[idx]))
            mixture = mixture.index_add(0, idx, hidden * gates[idx, e].unsqueeze(-1))
            self.evaluations += idx.numel()
        return rows + mixture


class IntraShapeMoe(nn.Module):
    """Router plus expert set; parameters are shared across block depths."""

    def __init__(self, dim: int, num_experts: int, k: int = 1):
        super().__init__()
        self.router = TopKRouter(dim, num_experts, k)
        self.experts = ExpertSet(dim, num_experts)

    def forward(
        self,
        rows: torch.Tensor,
        stats: GateStats | None = None,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        gates, truncated, mask = self.router(rows, mask=mask)
        if stats is not None:
            stats.update(truncated, gates, mask)
        return self.experts(rows, gates, mask)


def expert_mixture(
    embedding: torch.Tensor, moe: IntraShapeMoe, stats: GateStats | None = None
) -> torch.Tensor:
    """Residual expert mixture for a single d-dimensional embedding."""
    return moe(embedding.unsqueeze(0), stats=stats).squeeze(0)
