"""Silhouette and skeleton feature encoders.

Tensor layouts at module boundaries are channels-last:
silhouettes ``[B, T, H, W]``, skeleton streams ``[B, T, K, C]``.
Internally the graph blocks work on ``[B, C, T, K]``.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import GeometryError, InvalidInputError
from .skeleton import SkeletonTopology


def build_adjacency(topology: SkeletonTopology, mode: str = "joint") -> np.ndarray:
    """Symmetrically normalized adjacency ``D^-1/2 (A + I) D^-1/2``.

    ``joint`` mode uses the skeleton tree; ``bone`` mode uses its line graph,
    where two bones are adjacent when they share a joint.
    """
    if mode == "joint":
        k = topology.num_joints
        a = np.zeros((k, k))
        for p, c in topology.edges:
            a[p, c] = a[c, p] = 1.0
    elif mode == "bone":
        k = topology.num_bones
        a = np.zeros((k, k))
        for i, ei in enumerate(topology.edges):
            for j, ej in enumerate(topology.edges):
                if i != j and set(ei) & set(ej):
                    a[i, j] = 1.0
    else:
        raise InvalidInputError(f"adjacency mode must be 'joint' or 'bone', got {mode!r}")
    a += np.eye(k)
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return d[:, None] * a * d[None, :]


class SpatialGraphConv(nn.Module):
    """Pointwise linear map followed by adjacency-weighted mixing of nodes."""

    def __init__(self, in_channels, out_channels, adjacency, bias=True):
        super().__init__()
        self.linear = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.register_buffer("A", torch.as_tensor(np.asarray(adjacency), dtype=torch.float32))

    def mix(self, x):
        x = torch.einsum("bctv,vw->bctw", x, self.A)
        if self.bias is not None:
            x = x + self.bias.view(1, -1, 1, 1)
        return x

    def forward(self, x):
        return self.mix(self.linear(x))


class STGCNBlock(nn.Module):
    """Graph convolution, temporal convolution, residual (when widths match), ReLU."""

    def __init__(self, in_channels, out_channels, adjacency, temporal_kernel=9):
        super().__init__()
        if temporal_kernel % 2 != 1:
            raise GeometryError(f"temporal kernel must be odd, got {temporal_kernel}")
        self.gcn = SpatialGraphConv(in_channels, out_channels, adjacency)
        self.tcn = nn.Conv2d(out_channels, out_channels, (temporal_kernel, 1),
                             padding=(temporal_kernel // 2, 0))
        self.residual = in_channels == out_channels

    def forward(self, x, pre=None):
        # ``pre`` lets a caller supply an already-computed graph-conv output
        h = F.relu(self.gcn(x) if pre is None else pre)
        h = self.tcn(h)
        if self.residual:
            h = h + x
        return F.relu(h)


class STGCNEncoder(nn.Module):
    """Multi-layer spatial-temporal graph network with mean pooling over frames and nodes."""

    def __init__(self, adjacency, in_channels=2, hidden=(64, 64, 128, 128), out_channels=64,
                 temporal_kernel=9):
        super().__init__()
        widths = [in_channels, *hidden, out_channels]
        self.num_nodes = int(np.asarray(adjacency).shape[0])
        self.in_channels = in_channels
        self.blocks = nn.ModuleList(
            STGCNBlock(a, b, adjacency, temporal_kernel) for a, b in zip(widths[:-1], widths[1:])
        )

    def forward(self, x):
        """``x``: ``[B, T, K, in]`` -> (per-node ``[B, T, K, C]``, pooled ``[B, C]``)."""
        if x.dim() != 4 or x.shape[2] != self.num_nodes or x.shape[3] != self.in_channels:
            raise InvalidInputError(
                f"expected [B, T, {self.num_nodes}, {self.in_channels}], got {tuple(x.shape)}"
            )
        h = x.permute(0, 3, 1, 2)
        for block in self.blocks:
            h = block(h)
        per_node = h.permute(0, 2, 3, 1)
        return per_node, per_node.mean(dim=(1, 2))


def pool_strips(fm, num_strips):
    """Split ``[B, C, M, N]`` into horizontal strips and reduce each by max + mean.

    Returns ``[B, num_strips, C]``.
    """
    b, c, m, n = fm.shape
    if m % num_strips:
        raise GeometryError(f"feature height {m} is not divisible into {num_strips} strips")
    strips = fm.reshape(b, c, num_strips, (m // num_strips) * n)
    pooled = strips.amax(dim=-1) + strips.mean(dim=-1)
    return pooled.transpose(1, 2)


class HorizontalPyramidPool(nn.Module):
    """Finest pyramid level only: ``2**(P-1)`` strips, each with its own projection."""

    def __init__(self, in_channels, out_channels, scale=5, height=16):
        super().__init__()
        self.num_strips = 2 ** (scale - 1)
        if height % self.num_strips:
            raise GeometryError(
                f"feature height {height} is not divisible by 2**(P-1) = {self.num_strips}"
            )
        self.proj = nn.Parameter(torch.empty(self.num_strips, in_channels, out_channels))
        nn.init.xavier_uniform_(self.proj)

    def forward(self, fm):
        return torch.einsum("bsc,scd->bsd", pool_strips(fm, self.num_strips), self.proj)


class SilhouetteEncoder(nn.Module):
    """Framewise conv stack, max over time, horizontal pyramid pooling -> ``[B, 2**(P-1), C]``.

    Three 3x3 conv stages; the first two have stride 2, so a 64x44 frame
    becomes a 16x11 map.
    """

    def __init__(self, channels=(32, 64, 128), out_channels=64, hpp_scale=5, height=64, width=44):
        super().__init__()
        self.height, self.width = height, width
        c1, c2, c3 = channels
        self.convs = nn.ModuleList([
            nn.Conv2d(1, c1, 3, stride=2, padding=1),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.Conv2d(c2, c3, 3, padding=1),
        ])
        if height % 4:
            raise GeometryError(f"silhouette height {height} must be divisible by 4")
        self.hpp = HorizontalPyramidPool(c3, out_channels, hpp_scale, height // 4)

    def frame_features(self, sils):
        """``[B, T, H, W]`` -> per-frame maps ``[B, T, C_mid, M, N]``."""
        if sils.dim() != 4 or tuple(sils.shape[2:]) != (self.height, self.width):
            raise InvalidInputError(
                f"expected silhouettes [B, T, {self.height}, {self.width}], got {tuple(sils.shape)}"
            )
        b, t = sils.shape[:2]
        h = sils.reshape(b * t, 1, self.height, self.width)
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.01)
        return h.reshape(b, t, *h.shape[1:])

    def forward(self, sils):
        return self.hpp(self.frame_features(sils).amax(dim=1))
