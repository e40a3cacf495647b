"""Convolutional feature extractors used as the frozen first stage.

All backbones are returned without a classification top and randomly
initialised. Parameter counts follow the Keras convention: BatchNorm running
statistics are counted alongside weights, since they are part of the frozen
state of the network.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
import torchvision
from torch import nn

from .errors import UnknownBackbone

BACKBONES = ("densenet169", "resnet50v2", "mobilenetv2", "tiny")

# BatchNorm epsilon used by the Keras reference implementation of ResNet50V2.
_RESNET_BN_EPS = 1.001e-5


class _PreactBlock(nn.Module):
    """Bottleneck residual unit with pre-activation (identity mappings variant)."""

    def __init__(self, in_ch: int, filters: int, stride: int = 1, conv_shortcut: bool = False):
        super().__init__()
        self.stride = stride
        self.preact_bn = nn.BatchNorm2d(in_ch, eps=_RESNET_BN_EPS)
        self.shortcut = (
            nn.Conv2d(in_ch, 4 * filters, 1, stride=stride) if conv_shortcut else None
        )
        self.conv1 = nn.Conv2d(in_ch, filters, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(filters, eps=_RESNET_BN_EPS)
        self.conv2 = nn.Conv2d(filters, filters, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(filters, eps=_RESNET_BN_EPS)
        self.conv3 = nn.Conv2d(filters, 4 * filters, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        preact = F.relu(self.preact_bn(x))
        if self.shortcut is not None:
            shortcut = self.shortcut(preact)
        elif self.stride > 1:
            shortcut = x[:, :, :: self.stride, :: self.stride]
        else:
            shortcut = x
        out = F.relu(self.bn1(self.conv1(preact)))
        out = F.relu(self.bn2(self.conv2(out)))
        return shortcut + self.conv3(out)


def _stack(in_ch: int, filters: int, blocks: int, stride: int = 2) -> tuple[nn.Sequential, int]:
    # v2 stacks downsample in their last unit, not the first
    layers = [_PreactBlock(in_ch, filters, conv_shortcut=True)]
    layers += [_PreactBlock(4 * filters, filters) for _ in range(blocks - 2)]
    layers.append(_PreactBlock(4 * filters, filters, stride=stride))
    return nn.Sequential(*layers), 4 * filters


class ResNet50V2Features(nn.Module):
    """ResNet50V2 trunk: 7x7 stem, four bottleneck stacks (3, 4, 6, 3), final BN-ReLU."""

    def __init__(self, channels: int = 3):
        super().__init__()
        self.stem = nn.Conv2d(channels, 64, 7, stride=2, padding=3)
        stacks = []
        in_ch = 64
        for filters, blocks, stride in ((64, 3, 2), (128, 4, 2), (256, 6, 2), (512, 3, 1)):
            stack, in_ch = _stack(in_ch, filters, blocks, stride)
            stacks.append(stack)
        self.stacks = nn.Sequential(*stacks)
        self.post_bn = nn.BatchNorm2d(in_ch, eps=_RESNET_BN_EPS)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        # zero padding, not -inf: the stem output is not rectified yet
        x = F.max_pool2d(F.pad(x, (1, 1, 1, 1)), 3, stride=2)
        x = self.stacks(x)
        return F.relu(self.post_bn(x))


class TinyFeatures(nn.Module):
    """Three conv blocks (conv3x3 -> ReLU -> average pool) for desk-scale runs.

    A 128x128 input yields a 16x4x4 feature map (256 values).
    """

    widths = (8, 16, 16)
    pools = (4, 4, 2)

    def __init__(self, channels: int = 1):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = channels
        for width, pool in zip(self.widths, self.pools):
            layers += [nn.Conv2d(in_ch, width, 3, padding=1), nn.ReLU(), nn.AvgPool2d(pool)]
            in_ch = width
        self.body = nn.Sequential(*layers)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class _WithReLU(nn.Module):
    # torchvision's DenseNet applies the final ReLU outside of `features`
    def __init__(self, features: nn.Module):
        super().__init__()
        self.features = features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.features(x))


def build_backbone(kind: str, channels: int = 1) -> nn.Module:
    """Return the feature extractor for ``kind`` with a ``channels``-wide stem.

    Weights are drawn from each architecture's default initialiser under the
    current torch RNG state; seed beforehand for reproducible builds.
    """
    if kind == "resnet50v2":
        return ResNet50V2Features(channels)
    if kind == "densenet169":
        features = torchvision.models.densenet169(weights=None).features
        features.conv0 = nn.Conv2d(channels, 64, 7, stride=2, padding=3, bias=False)
        nn.init.kaiming_normal_(features.conv0.weight)
        return _WithReLU(features)
    if kind == "mobilenetv2":
        features = torchvision.models.mobilenet_v2(weights=None).features
        features[0][0] = nn.Conv2d(channels, 32, 3, stride=2, padding=1, bias=False)
        nn.init.kaiming_normal_(features[0][0].weight, mode="fan_out")
        return features
    if kind == "tiny":
        return TinyFeatures(channels)
    raise UnknownBackbone(f"unknown backbone {kind!r}; expected one of {', '.join(BACKBONES)}")


def backbone_state_count(module: nn.Module) -> int:
    """Number of weights plus BatchNorm running statistics in ``module``."""
    params = sum(p.numel() for p in module.parameters())
    stats = sum(
        b.numel() for name, b in module.named_buffers() if not name.endswith("num_batches_tracked")
    )
    return params + stats
