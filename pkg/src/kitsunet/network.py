"""Multi-scale supervised 3D U-Net.

Encoder levels downsample with stride-2 convolutions, decoder levels upsample
with transposed convolutions and concatenate the matching encoder features.
Every decoder level listed in ``supervised_levels`` carries its own 1x1x1
segmentation head, so ``forward`` returns one logit tensor per supervised
resolution, full resolution first.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Sequence

import torch
from torch import nn


class ShapeError(ValueError):
    """Patch or volume shape incompatible with the network geometry."""


@dataclass(frozen=True)
class NetworkSpec:
    levels: int = 5
    base_features: int = 30
    convs_per_level: int = 2
    num_classes: int = 3
    supervised_levels: int = 4
    in_channels: int = 1

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))

    def violations(self) -> List[str]:
        errs = []
        if self.levels < 2:
            errs.append(f"levels must be >= 2, got {self.levels}")
        if self.base_features < 1:
            errs.append(f"base_features must be >= 1, got {self.base_features}")
        if self.convs_per_level < 1:
            errs.append(f"convs_per_level must be >= 1, got {self.convs_per_level}")
        if self.num_classes < 1:
            errs.append(f"num_classes must be >= 1, got {self.num_classes}")
        if not 1 <= self.supervised_levels <= self.levels - 1:
            errs.append(
                f"supervised_levels must be in [1, levels-1={self.levels - 1}], "
                f"got {self.supervised_levels}")
        return errs

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def features(self, level: int) -> int:
        return self.base_features * 2 ** level

    def check_patch(self, shape: Sequence[int]) -> None:
        bad = [int(s) for s in shape if int(s) % self.divisor]
        if len(shape) != 3 or bad:
            raise ShapeError(
                f"patch shape {tuple(shape)} must be 3D with every dim divisible "
                f"by 2^(levels-1) = {self.divisor}")
        if all(int(s) == self.divisor for s in shape):
            # instance normalization needs more than one voxel at the bottleneck
            raise ShapeError(f"patch shape {tuple(shape)} leaves a single bottleneck voxel")

    def head_shapes(self, patch: Sequence[int]) -> List[tuple]:
        self.check_patch(patch)
        return [tuple(int(s) // 2 ** l for s in patch) for l in range(self.supervised_levels)]

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    # conv bias is dead weight in front of instance norm
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(0.01, inplace=True),
    )


def _stage(cin: int, cout: int, n: int, first_stride: int = 1) -> nn.Sequential:
    blocks = [_conv_block(cin, cout, first_stride)]
    blocks += [_conv_block(cout, cout) for _ in range(n - 1)]
    return nn.Sequential(*blocks)


class MultiScaleUNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        f = spec.features
        n = spec.convs_per_level
        self.encoder = nn.ModuleList()
        for level in range(spec.levels):
            cin = spec.in_channels if level == 0 else f(level - 1)
            self.encoder.append(_stage(cin, f(level), n, first_stride=1 if level == 0 else 2))
        # decoder[l] produces level-l features from level l+1
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in range(spec.levels - 1):
            self.up.append(nn.ConvTranspose3d(f(level + 1), f(level), 2, stride=2, bias=False))
            self.decoder.append(_stage(2 * f(level), f(level), n))
        self.heads = nn.ModuleList(
            nn.Conv3d(f(level), spec.num_classes, 1) for level in range(spec.supervised_levels))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        self.spec.check_patch(x.shape[2:])
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        x = skips.pop()
        outputs = {}
        for level in reversed(range(self.spec.levels - 1)):
            x = self.up[level](x)
            x = self.decoder[level](torch.cat([skips[level], x], dim=1))
            if level < self.spec.supervised_levels:
                outputs[level] = self.heads[level](x)
        return [outputs[l] for l in range(self.spec.supervised_levels)]


def build(spec: NetworkSpec, seed: int = 0) -> MultiScaleUNet:
    """Construct a network with parameters initialized from ``seed`` only."""
    gen = torch.Generator().manual_seed(int(seed))
    net = MultiScaleUNet(spec)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
                fan_in = module.weight[0].numel() if isinstance(module, nn.Conv3d) \
                    else module.weight.shape[0] * module.weight[0, 0].numel()
                # He init for leaky rectifiers
                std = (2.0 / ((1 + 0.01 ** 2) * fan_in)) ** 0.5
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
                if module.bias is not None:
                    module.bias.zero_()
    return net


def parameter_count(spec: NetworkSpec) -> int:
    """Closed-form trainable parameter count for ``spec``."""
    f = spec.features
    k = 27
    total = 0

    def stage(cin, cout):
        t = cin * cout * k + 2 * cout
        t += (spec.convs_per_level - 1) * (cout * cout * k + 2 * cout)
        return t

    for level in range(spec.levels):
        total += stage(spec.in_channels if level == 0 else f(level - 1), f(level))
    for level in range(spec.levels - 1):
        total += f(level + 1) * f(level) * 8
        total += stage(2 * f(level), f(level))
    for level in range(spec.supervised_levels):
        total += f(level) * spec.num_classes + spec.num_classes
    return total
