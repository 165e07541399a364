"""Gated attention head scoring each shape embedding in (0, 1)."""

from __future__ import annotations

import torch
from torch import nn


class GatedAttentionHead(nn.Module):
    """Two-layer tanh/sigmoid head: sigmoid(W2 tanh(W1 x + b1) + b2).

    Scores are independent per row, so batch application over J shapes costs
    O(J). A single instance is shared by every learning block.
    """

    def __init__(self, dim: int, hidden_dim: int = 8):
        super().__init__()
        if hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        self.hidden = nn.Linear(dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, 1)

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        """(..., d) -> (...,) contribution scores, each strictly in (0, 1)."""
        return torch.sigmoid(self.out(torch.tanh(self.hidden(rows)))).squeeze(-1)
