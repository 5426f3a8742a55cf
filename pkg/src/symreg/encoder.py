"""Permutation-invariant point-set encoder.

Three kernel-size-1 conv stages (3 -> E -> 2E -> 4E), each followed by batch
normalization and a rectifier, then a global max over the point axis and two
dense layers (4E -> 2E -> E, rectifier after the first only). The max-pool
makes the embedding invariant to point order and duplication and independent
of the number of points N.

The target coordinate (last input column) is compressed pointwise with
sign(y) * log1p(|y|) before the first stage. The inputs x1, x2 are bounded
by the corpus design but y is not; a single point set with |y| ~ 1e8 in a
batch otherwise dominates the batch-norm statistics and collapses the
condition embeddings of everything else. The compression is per point, so
it changes none of the invariances.

Eval mode computes the per-point stages in fixed-shape chunks of
POINT_CHUNK rows. GEMM kernels round identically for identical row content
at any position within a fixed shape, but not across different row counts,
so chunking is what makes the invariances hold bit-exactly for any N.
Train mode uses the plain vectorized path (batch statistics couple points
there anyway).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonFiniteInput, ShapeMismatch

POINT_CHUNK = 128


class PointEncoder(nn.Module):
    def __init__(self, embed_dim: int, in_dim: int = 3, bn_momentum: float = 0.1):
        super().__init__()
        e = embed_dim
        self.embed_dim = e
        self.in_dim = in_dim
        self.conv1 = nn.Conv1d(in_dim, e, 1)
        self.bn1 = nn.BatchNorm1d(e, momentum=bn_momentum)
        self.conv2 = nn.Conv1d(e, 2 * e, 1)
        self.bn2 = nn.BatchNorm1d(2 * e, momentum=bn_momentum)
        self.conv3 = nn.Conv1d(2 * e, 4 * e, 1)
        self.bn3 = nn.BatchNorm1d(4 * e, momentum=bn_momentum)
        self.fc1 = nn.Linear(4 * e, 2 * e)
        self.fc2 = nn.Linear(2 * e, e)

    @staticmethod
    def compress(points: torch.Tensor) -> torch.Tensor:
        """Replace the last coordinate y with sign(y) * log1p(|y|)."""
        y = points[..., -1:]
        return torch.cat([points[..., :-1], torch.sign(y) * torch.log1p(y.abs())], dim=-1)

    def _stages_train(self, points: torch.Tensor) -> torch.Tensor:
        x = points.transpose(1, 2)  # (B, C, N)
        x = torch.relu(self.bn1(self.conv1(x)))
        x = torch.relu(self.bn2(self.conv2(x)))
        x = torch.relu(self.bn3(self.conv3(x)))
        return x.transpose(1, 2)  # (B, N, 4E)

    def _stages_eval(self, points: torch.Tensor) -> torch.Tensor:
        b, n, _ = points.shape
        rows = points.reshape(b * n, self.in_dim)
        pad = (-rows.shape[0]) % POINT_CHUNK
        if pad:
            rows = torch.cat([rows, rows[0:1].expand(pad, self.in_dim)])
        outs = []
        for lo in range(0, rows.shape[0], POINT_CHUNK):
            h = rows[lo:lo + POINT_CHUNK]
            h = torch.relu(self.bn1(F.linear(h, self.conv1.weight[:, :, 0], self.conv1.bias)))
            h = torch.relu(self.bn2(F.linear(h, self.conv2.weight[:, :, 0], self.conv2.bias)))
            h = torch.relu(self.bn3(F.linear(h, self.conv3.weight[:, :, 0], self.conv3.bias)))
            outs.append(h)
        feats = torch.cat(outs)
        if pad:
            feats = feats[: b * n]
        return feats.reshape(b, n, 4 * self.embed_dim)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        """(B, N, in_dim) -> (B, embed_dim). Train mode uses batch statistics
        for the normalization layers; eval mode uses running statistics."""
        if points.dim() != 3 or points.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"expected (B, N, {self.in_dim}) points, got {tuple(points.shape)}")
        if points.shape[1] < 1:
            raise ShapeMismatch("need at least one point")
        if not torch.isfinite(points).all():
            raise NonFiniteInput("points contain NaN or infinity")
        points = self.compress(points)
        feats = self._stages_train(points) if self.training else self._stages_eval(points)
        x = feats.max(dim=1).values  # (B, 4E)
        x = torch.relu(self.fc1(x))
        return self.fc2(x)
