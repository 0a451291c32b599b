"""Minimal ST-GCN style skeleton encoder with classifier and projection heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import GraphTopology
from .errors import ConfigError, ProjectionError, ShapeError


@dataclass
class EncoderConfig:
    widths: tuple = (32, 64, 128)
    temporal_kernel: int = 9
    strides: tuple = (1, 2, 2)
    feature_dim: int = 128
    num_classes: int = 6
    init_seed: int = 0
    in_channels: int = 3

    def validate(self):
        widths = tuple(self.widths)
        if not widths or any(int(w) < 1 for w in widths):
            raise ConfigError("widths", "must be a nonempty list of positive integers")
        if len(tuple(self.strides)) != len(widths):
            raise ConfigError("strides", "need one stride per block")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError("temporal_kernel", "must be an odd positive integer")
        if self.feature_dim != widths[-1]:
            raise ConfigError("feature_dim", f"must equal final block width {widths[-1]}")
        if self.num_classes < 1:
            raise ConfigError("num_classes", "must be positive")


def normalize_adjacency(topology: GraphTopology) -> np.ndarray:
    """Symmetric normalization D^-1/2 (A + I) D^-1/2 of the joint graph."""
    A = topology.adjacency() + np.eye(topology.num_joints)
    deg = A.sum(1)
    if np.any(deg <= 0):
        raise ConfigError("edges", "isolated joint")
    inv = 1.0 / np.sqrt(deg)
    return inv[:, None] * A * inv[None, :]


def _init_(module: nn.Module, gen: torch.Generator):
    # Explicit generator keeps initialization independent of global RNG state.
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)
        elif p.dim() > 1:
            fan_in = p[0].numel()
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * math.sqrt(2.0 / fan_in))
        else:
            nn.init.ones_(p)  # batch-norm scale


class STGCNBlock(nn.Module):
    def __init__(self, cin, cout, kernel, stride, A: torch.Tensor):
        super().__init__()
        self.register_buffer("A", A)
        self.spatial = nn.Conv2d(cin, cout, 1)
        self.bn1 = nn.BatchNorm2d(cout)
        self.temporal = nn.Conv2d(cout, cout, (kernel, 1), stride=(stride, 1), padding=(kernel // 2, 0))
        self.bn2 = nn.BatchNorm2d(cout)
        if cin == cout and stride == 1:
            self.residual = None
        else:
            self.residual = nn.Conv2d(cin, cout, 1, stride=(stride, 1))

    def forward(self, x):  # x: [N, C, T, V]
        y = torch.einsum("nctv,vw->nctw", self.spatial(x), self.A)
        y = F.relu(self.bn1(y))
        y = self.bn2(self.temporal(y))
        res = x if self.residual is None else self.residual(x)
        return F.relu(y + res)


class SkeletonEncoder(nn.Module):
    """GCN backbone producing features x0, plus classifier and text-space projection.

    ``encode`` maps a batch [B, C, T, V, M] to features [B, D] by running the
    block stack on every actor and averaging over frames, joints and actors.
    """

    def __init__(self, config: EncoderConfig, topology: GraphTopology, text_dim: int,
                 dtype=torch.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.topology = topology
        self.text_dim = text_dim
        A = torch.as_tensor(normalize_adjacency(topology), dtype=dtype)
        blocks = []
        cin = config.in_channels
        for w, s in zip(config.widths, config.strides):
            blocks.append(STGCNBlock(cin, w, config.temporal_kernel, s, A))
            cin = w
        self.blocks = nn.ModuleList(blocks)
        self.classifier = nn.Linear(config.feature_dim, config.num_classes)
        self.projection = nn.Linear(config.feature_dim, text_dim)
        self.to(dtype)
        gen = torch.Generator().manual_seed(int(config.init_seed))
        _init_(self, gen)

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("projection.")]

    def _check(self, x: torch.Tensor):
        if x.dim() != 5:
            raise ShapeError("rank", 5, x.dim())
        if x.shape[1] != self.config.in_channels:
            raise ShapeError("channels", self.config.in_channels, x.shape[1])
        if x.shape[3] != self.topology.num_joints:
            raise ShapeError("joints", self.topology.num_joints, x.shape[3])

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        B, C, T, V, M = x.shape
        h = x.permute(0, 4, 1, 2, 3).reshape(B * M, C, T, V)
        for block in self.blocks:
            h = block(h)
        return h.mean(dim=(2, 3)).reshape(B, M, -1).mean(dim=1)

    def classify(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() != 2 or features.shape[1] != self.config.feature_dim:
            raise ShapeError("features", self.config.feature_dim, tuple(features.shape))
        return self.classifier(features)

    def project(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() != 2 or features.shape[1] != self.config.feature_dim:
            raise ShapeError("features", self.config.feature_dim, tuple(features.shape))
        z = self.projection(features)
        norm = z.norm(dim=1, keepdim=True)
        if torch.any(norm == 0):
            raise ProjectionError("degenerate feature: zero-norm projection")
        return z / norm

    def forward(self, x):
        return self.classify(self.encode(x))
