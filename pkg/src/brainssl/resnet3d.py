"""3D ResNet-18 encoder: 2D basic blocks inflated to cubic kernels.

First convolution 7x7x7 stride 2, then 3x3x3 max-pool stride 2, four
stages of two basic blocks (stage strides 1, 2, 2, 2), global average
pooling. Five stride-2 stages total, so every input axis must be at
least 32 voxels.
"""

from __future__ import annotations

import torch
import torch.nn as nn

MIN_INPUT_AXIS = 32


def conv_output_extent(n: int) -> int:
    # k=7 s=2 p=3, k=3 s=2 p=1 and k=3 s=1 p=1 stride-2 variants all
    # reduce an axis as (n - 1) // 2 + 1
    return (n - 1) // 2 + 1


def feature_map_trace(input_shape) -> list[tuple[int, int, int]]:
    """Spatial extents after each stride-2 stage (conv1, pool, stages 2-4)."""
    shape = tuple(int(n) for n in input_shape)
    trace = []
    for _ in range(5):
        shape = tuple(conv_output_extent(n) for n in shape)
        trace.append(shape)
    return trace


class BasicBlock3d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv3d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm3d(out_channels),
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResNet3d(nn.Module):
    def __init__(self, widths=(64, 128, 256, 512), in_channels: int = 1):
        super().__init__()
        w = widths[0]
        self.conv1 = nn.Conv3d(in_channels, w, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm3d(w)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool3d(3, 2, 1)
        stages = []
        current = w
        for i, out_channels in enumerate(widths):
            stride = 1 if i == 0 else 2
            stages.append(BasicBlock3d(current, out_channels, stride))
            stages.append(BasicBlock3d(out_channels, out_channels))
            current = out_channels
        self.stages = nn.Sequential(*stages)
        self.avgpool = nn.AdaptiveAvgPool3d(1)
        self.embed_dim = widths[-1]

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.stages(x)
        return torch.flatten(self.avgpool(x), 1)


class ProjectionHead(nn.Module):
    """MLP mapping embeddings into the contrastive space.

    Default is two layers with a nonlinearity; layers=1 gives a single
    linear map (bias optional), useful for analytic checks.
    """

    def __init__(self, embed_dim: int, hidden_dim: int, out_dim: int, layers: int = 2, bias: bool = True):
        super().__init__()
        if layers == 1:
            self.net = nn.Linear(embed_dim, out_dim, bias=bias)
        elif layers == 2:
            self.net = nn.Sequential(
                nn.Linear(embed_dim, hidden_dim, bias=bias),
                nn.ReLU(inplace=True),
                nn.Linear(hidden_dim, out_dim, bias=bias),
            )
        else:
            raise ValueError(f"projection head supports 1 or 2 layers, got {layers}")

    def forward(self, h):
        return self.net(h)
