"""Sliding-window shape embeddings with learnable positional terms."""

from __future__ import annotations

import math

import torch
from torch import nn


def count_shapes(series_length: int, window: int, stride: int) -> int:
    """Number of windows of length `window` at the given stride."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if window > series_length:
        raise ValueError(f"window {window} exceeds series length {series_length}")
    return (series_length - window) // stride + 1


class ShapeEmbedding(nn.Module):
    """Project every length-m window of a series to a d-dimensional row.

    The default projection is a single full-window convolution (d filters of
    length m, stride q) plus a per-channel bias. With ``linear=True`` the
    windows are flattened and passed through a plain linear layer instead.
    Each row then receives a learnable per-position term.
    """

    def __init__(
        self,
        series_length: int,
        window: int,
        stride: int,
        dim: int,
        linear: bool = False,
    ):
        super().__init__()
        self.series_length = series_length
        self.window = window
        self.stride = stride
        self.dim = dim
        self.linear = linear
        self.num_shapes = count_shapes(series_length, window, stride)
        if linear:
            self.proj = nn.Linear(window, dim)
        else:
            self.conv = nn.Conv1d(1, dim, kernel_size=window, stride=stride)
            bound = math.sqrt(1.0 / window)
            nn.init.uniform_(self.conv.weight, -bound, bound)
            nn.init.uniform_(self.conv.bias, -bound, bound)
        self.positions = nn.Parameter(torch.empty(self.num_shapes, dim))
        nn.init.normal_(self.positions, mean=0.0, std=0.02)

    @property
    def shape_starts(self) -> list[int]:
        """Start timestep of each window."""
        return [j * self.stride for j in range(self.num_shapes)]

    def forward(self, series: torch.Tensor) -> torch.Tensor:
        """(B, T) -> (B, J, d); also accepts a single (T,) series -> (J, d)."""
        squeeze = series.dim() == 1
        if squeeze:
            series = series.unsqueeze(0)
        if series.shape[-1] != self.series_length:
            raise ValueError(
                f"expected series of length {self.series_length}, got {series.shape[-1]}"
            )
        if self.linear:
            windows = series.unfold(-1, self.window, self.stride)
            out = self.proj(windows)
        else:
            out = self.conv(series.unsqueeze(1)).transpose(1, 2)
        out = out + self.positions
        return out.squeeze(0) if squeeze else out
