"""Shared multi-kernel convolutional expert over the shape axis."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class SharedConvExpert(nn.Module):
    """Inception-style module treating each soft shape as one sequence point.

    The (B, Num, d) shape stack is transposed to (B, d, Num), optionally
    passed through a 1x1 bottleneck, then through three same-padded
    convolutions of distinct odd kernel sizes whose outputs are averaged.
    Kernels longer than the current sequence are clamped to its length
    (center taps, forced odd), so any Num >= 1 works.
    """

    def __init__(
        self,
        dim: int,
        kernel_sizes: tuple[int, ...] = (3, 5, 9),
        bottleneck: bool = True,
    ):
        super().__init__()
        if any(k < 1 or k % 2 == 0 for k in kernel_sizes):
            raise ValueError(f"kernel sizes must be odd and positive, got {kernel_sizes}")
        self.kernel_sizes = tuple(kernel_sizes)
        self.bottleneck = nn.Conv1d(dim, dim, kernel_size=1, bias=False) if bottleneck else None
        self.branches = nn.ModuleList(
            nn.Conv1d(dim, dim, kernel_size=k, padding=k // 2) for k in kernel_sizes
        )

    def forward(self, shapes: torch.Tensor) -> torch.Tensor:
        """(B, Num, d) -> (B, Num, d); also accepts (Num, d)."""
        squeeze = shapes.dim() == 2
        if squeeze:
            shapes = shapes.unsqueeze(0)
        seq = shapes.transpose(1, 2)
        if self.bottleneck is not None:
            seq = self.bottleneck(seq)
        num = seq.shape[-1]
        outs = []
        for conv in self.branches:
            size = conv.kernel_size[0]
            effective = min(size, num)
            if effective % 2 == 0:
                effective -= 1
            if effective == size:
                outs.append(conv(seq))
            else:
                lo = (size - effective) // 2
                weight = conv.weight[:, :, lo : lo + effective]
                outs.append(F.conv1d(seq, weight, conv.bias, padding=effective // 2))
        mixed = torch.stack(outs).mean(dim=0).transpose(1, 2)
        return mixed.squeeze(0) if squeeze else mixed
