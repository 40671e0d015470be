"""High-resolution feature extractor used for both the RGB and the LWIR stream.

A three-stage multi-branch network: stage ``s`` keeps ``s`` parallel branches
at full, half and quarter resolution, exchanging information between them at
the end of every stage.  The stem never downsamples, so the extracted feature
map has the same spatial size as the input patch.

SiLU is used throughout instead of ReLU: it keeps the loss smooth in the
parameters, which finite-difference gradient checks rely on.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = ("scales", "stages", "x1", "x2", "x3")


class ConfigError(ValueError):
    pass


@dataclass
class ExtractorConfig:
    input_channels: int = 3
    patch_size: int = 36
    base_channels: int = 32
    stage_channels: list[list[int]] = field(
        default_factory=lambda: [[32], [32, 64], [32, 64, 128]])
    blocks: int = 2
    output_channels: int = 64
    variant: str = "scales"

    def validate(self):
        if self.patch_size <= 0 or self.patch_size % 4:
            raise ConfigError(f"patch_size must be a positive multiple of 4, got {self.patch_size}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown extractor variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.stage_channels) != 3:
            raise ConfigError("exactly three stages are supported")
        for s, widths in enumerate(self.stage_channels, start=1):
            if len(widths) != s:
                raise ConfigError(f"stage {s} needs {s} branch widths, got {widths}")
        if self.blocks < 1 or self.output_channels < 1 or self.input_channels < 1:
            raise ConfigError("blocks, output_channels and input_channels must be positive")
        return self


def tiny_config(input_channels=3, variant="scales"):
    """The small configuration used for gradient checks and synthetic runs."""
    return ExtractorConfig(input_channels=input_channels, patch_size=12, base_channels=8,
                           stage_channels=[[8], [8, 16], [8, 16, 32]], blocks=2,
                           output_channels=16, variant=variant)


def conv_bn_act(cin, cout, stride=1, act=True):
    layers = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), nn.BatchNorm2d(cout)]
    if act:
        layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class BasicBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = conv_bn_act(channels, channels)
        self.conv2 = conv_bn_act(channels, channels, act=False)

    def forward(self, x):
        return F.silu(x + self.conv2(self.conv1(x)))


class Exchange(nn.Module):
    """Fuses every branch into every other one by summation.

    Lower-resolution inputs are resized (nearest) and projected with a 1x1
    convolution; higher-resolution inputs go through a chain of stride-2
    3x3 convolutions.
    """

    def __init__(self, widths):
        super().__init__()
        self.widths = list(widths)
        n = len(widths)
        self.paths = nn.ModuleList()
        for i in range(n):
            row = nn.ModuleList()
            for j in range(n):
                if j == i:
                    row.append(nn.Identity())
                elif j > i:
                    row.append(nn.Sequential(nn.Conv2d(widths[j], widths[i], 1, bias=False),
                                             nn.BatchNorm2d(widths[i])))
                else:
                    chain = [conv_bn_act(widths[j], widths[j], stride=2) for _ in range(i - j - 1)]
                    chain.append(conv_bn_act(widths[j], widths[i], stride=2, act=False))
                    row.append(nn.Sequential(*chain))
            self.paths.append(row)

    def forward(self, xs):
        out = []
        for i, row in enumerate(self.paths):
            size = xs[i].shape[-2:]
            acc = xs[i]
            for j, path in enumerate(row):
                if j == i:
                    continue
                y = path(xs[j])
                if j > i:
                    y = F.interpolate(y, size=size, mode="nearest")
                acc = acc + y
            out.append(F.silu(acc))
        return out


class Stage(nn.Module):
    def __init__(self, widths, blocks):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Sequential(*[BasicBlock(w) for _ in range(blocks)]) for w in widths)
        self.exchange = Exchange(widths) if len(widths) > 1 else None

    def forward(self, xs):
        xs = [branch(x) for branch, x in zip(self.branches, xs)]
        if self.exchange is not None:
            xs = self.exchange(xs)
        return xs


class Transition(nn.Module):
    """Adapts existing branch widths and spawns a new half-resolution branch."""

    def __init__(self, prev_widths, next_widths):
        super().__init__()
        self.adapt = nn.ModuleList(
            nn.Identity() if a == b else conv_bn_act(a, b)
            for a, b in zip(prev_widths, next_widths))
        self.spawn = conv_bn_act(prev_widths[-1], next_widths[-1], stride=2)

    def forward(self, xs):
        return [f(x) for f, x in zip(self.adapt, xs)] + [self.spawn(xs[-1])]


class Extractor(nn.Module):
    """Maps a ``(N, C_in, H, W)`` patch batch to ``(N, C_out, H, W)`` features."""

    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.config = config.validate()
        widths = config.stage_channels
        self.stem = nn.Sequential(conv_bn_act(config.input_channels, config.base_channels),
                                  conv_bn_act(config.base_channels, widths[0][0]))
        self.stage1 = Stage(widths[0], config.blocks)
        self.trans12 = Transition(widths[0], widths[1])
        self.stage2 = Stage(widths[1], config.blocks)
        self.trans23 = Transition(widths[1], widths[2])
        self.stage3 = Stage(widths[2], config.blocks)

        v = config.variant
        if v == "scales":
            proj_in = sum(widths[2])
        elif v == "stages":
            proj_in = widths[1][0] + widths[2][0]
        else:
            proj_in = widths[int(v[1]) - 1][0]
        self.project = nn.Conv2d(proj_in, config.output_channels, 1)

    def forward(self, x):
        if x.shape[-3] != self.config.input_channels:
            raise ValueError(f"expected {self.config.input_channels} input channels, got {x.shape[-3]}")
        if x.shape[-2] % 4:
            raise ValueError(f"patch height must be divisible by 4, got {x.shape[-2]}")
        x1 = self.stage1([self.stem(x)])
        x2 = self.stage2(self.trans12(x1))
        x3 = self.stage3(self.trans23(x2))

        v = self.config.variant
        if v == "scales":
            size = x3[0].shape[-2:]
            feats = torch.cat([x3[0]] + [F.interpolate(b, size=size, mode="nearest") for b in x3[1:]], dim=1)
        elif v == "stages":
            feats = torch.cat([x2[0], x3[0]], dim=1)
        else:
            feats = {"x1": x1, "x2": x2, "x3": x3}[v][0]
        return self.project(feats)


def build_extractor(config: ExtractorConfig, seed: int) -> Extractor:
    """Builds an extractor whose weights are a deterministic function of ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Extractor(config)
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
    return net


def extract(extractor: Extractor, patch: torch.Tensor) -> torch.Tensor:
    """Runs one stream; accepts a single ``(C, H, W)`` patch or a batch.

    Raises FloatingPointError if the features contain NaN or Inf.
    """
    single = patch.dim() == 3
    out = extractor(patch.unsqueeze(0) if single else patch)
    if not torch.isfinite(out).all():
        raise FloatingPointError("extractor produced non-finite features")
    return out[0] if single else out
