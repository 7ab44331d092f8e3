"""3D residual U-Net with an optional graph-reasoning block."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from . import tensor_core as tc
from .gir import GirBlock, GirConfig


@dataclass
class UNetConfig:
    level_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    bottleneck_channels: int = 128
    convs_per_level: int = 2
    kernel: int = 3
    upsample: str = "transpose"
    gir_enabled: bool = True
    # "bottleneck" or "encoder.levelK" (1-based)
    gir_position: str = "bottleneck"
    in_channels: int = 1
    out_channels: int = 1

    def validate(self) -> None:
        if not self.level_channels or min(self.level_channels) < 1:
            raise ValueError(f"level_channels must be non-empty positive ints, got {self.level_channels}")
        if self.convs_per_level < 1:
            raise ValueError("convs_per_level must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.upsample not in ("transpose", "nearest"):
            raise ValueError(f"upsample must be 'transpose' or 'nearest', got {self.upsample!r}")
        if self.gir_enabled:
            c = self.gir_channels()
            if c % 4:
                raise ValueError(f"GIR needs channels divisible by 4, position {self.gir_position!r} has {c}")

    def gir_channels(self) -> int:
        if self.gir_position == "bottleneck":
            return self.bottleneck_channels
        prefix = "encoder.level"
        if not self.gir_position.startswith(prefix):
            raise ValueError(f"unknown gir_position {self.gir_position!r}")
        k = int(self.gir_position[len(prefix):])
        if not 1 <= k <= len(self.level_channels):
            raise ValueError(f"gir_position {self.gir_position!r} outside 1..{len(self.level_channels)}")
        return self.level_channels[k - 1]

    @property
    def divisor(self) -> int:
        return 2 ** len(self.level_channels)


class Conv(nn.Module):
    def __init__(self, cin: int, cout: int, k: int):
        super().__init__()
        self.padding = k // 2
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k, k))
        self.bias = nn.Parameter(torch.zeros(cout))
        tc.kaiming_uniform_(self.weight, cin * k**3)

    def forward(self, x):
        return tc.conv3d(x, self.weight, self.bias, padding=self.padding)


class BatchNorm(nn.Module):
    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = nn.Parameter(torch.ones(c))
        self.bias = nn.Parameter(torch.zeros(c))
        self.register_buffer("running_mean", torch.zeros(c))
        self.register_buffer("running_var", torch.ones(c))

    def forward(self, x):
        return tc.batchnorm3d(
            x, self.weight, self.bias, self.eps, self.training, self.running_mean, self.running_var, self.momentum
        )


class ResidualBlock(nn.Module):
    """conv-BN-ReLU stages, the last one without ReLU; ReLU after the sum."""

    def __init__(self, cin: int, cout: int, n_convs: int = 2, k: int = 3):
        super().__init__()
        self.n_convs = n_convs
        for i in range(1, n_convs + 1):
            setattr(self, f"conv{i}", Conv(cin if i == 1 else cout, cout, k))
            setattr(self, f"bn{i}", BatchNorm(cout))
        self.shortcut = Conv(cin, cout, 1) if cin != cout else None

    def forward(self, x):
        h = x
        for i in range(1, self.n_convs + 1):
            h = getattr(self, f"bn{i}")(getattr(self, f"conv{i}")(h))
            if i < self.n_convs:
                h = tc.relu(h)
        skip = x if self.shortcut is None else self.shortcut(x)
        return tc.relu(skip + h)


def residual_block(x, block: ResidualBlock, training: bool = True):
    block.train(training)
    return block(x)


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: int, mode: str):
        super().__init__()
        self.mode = mode
        if mode == "transpose":
            self.weight = nn.Parameter(torch.empty(cin, cout, 2, 2, 2))
            self.bias = nn.Parameter(torch.zeros(cout))
            tc.kaiming_uniform_(self.weight, cin * 8)
        self.out_channels = cout if mode == "transpose" else cin

    def forward(self, x):
        if self.mode == "transpose":
            return tc.upsample2x(x, "transpose", self.weight, self.bias)
        return tc.upsample2x(x, "nearest")


class DecoderLevel(nn.Module):
    def __init__(self, cin: int, skip: int, cout: int, cfg: UNetConfig):
        super().__init__()
        self.up = Upsample(cin, cout, cfg.upsample)
        self.block = ResidualBlock(skip + self.up.out_channels, cout, cfg.convs_per_level, cfg.kernel)

    def forward(self, x, skip):
        return self.block(torch.cat([skip, self.up(x)], dim=1))


class Head(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin, 1, 1, 1))
        self.bias = nn.Parameter(torch.zeros(cout))
        tc.kaiming_uniform_(self.weight, cin)

    def forward(self, x):
        return tc.conv3d(x, self.weight, self.bias)


class ResUNet3d(nn.Module):
    """Encoder levels -> bottleneck (+ GIR) -> mirrored decoder -> 1x1x1 logit head.

    Parameter names follow ``encoder.levelK.*``, ``bottleneck.*``, ``gir.*``,
    ``decoder.levelK.*`` and ``head.*``.
    """

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        cfg = cfg or UNetConfig()
        cfg.validate()
        self.cfg = cfg
        chans = cfg.level_channels
        self.encoder = nn.ModuleDict()
        cin = cfg.in_channels
        for k, c in enumerate(chans, start=1):
            self.encoder[f"level{k}"] = ResidualBlock(cin, c, cfg.convs_per_level, cfg.kernel)
            cin = c
        self.bottleneck = ResidualBlock(cin, cfg.bottleneck_channels, cfg.convs_per_level, cfg.kernel)
        self.gir = GirBlock(GirConfig.from_channels(cfg.gir_channels())) if cfg.gir_enabled else None
        self.decoder = nn.ModuleDict()
        cin = cfg.bottleneck_channels
        for k in range(len(chans), 0, -1):
            c = chans[k - 1]
            self.decoder[f"level{k}"] = DecoderLevel(cin, c, c, cfg)
            cin = c
        self.head = Head(chans[0], cfg.out_channels)

    def _check_input(self, x) -> None:
        if x.dim() != 5:
            raise tc.ShapeError(f"model input must be (B, C, D, H, W), got {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise tc.ShapeError(f"channel axis has {x.shape[1]} channels, model expects {self.cfg.in_channels}")
        d = self.cfg.divisor
        for axis, n in zip(tc.SPATIAL_AXES, x.shape[2:]):
            if n % d:
                raise tc.ShapeError(f"{axis} extent {n} is not divisible by {d}; pad the input first")

    def forward(self, x):
        self._check_input(x)
        gir_at = self.cfg.gir_position if self.gir is not None else None
        skips = []
        h = x
        for name, block in self.encoder.items():
            h = block(h)
            if gir_at == f"encoder.{name}":
                h = self.gir(h)
            skips.append(h)
            h = tc.pool3d(h, "max", k=2, stride=2, padding=0)
        h = self.bottleneck(h)
        if gir_at == "bottleneck":
            h = self.gir(h)
        for name, skip in zip(self.decoder.keys(), reversed(skips)):
            h = self.decoder[name](h, skip)
        return self.head(h)


def forward(model: ResUNet3d, volume, training: bool = False):
    model.train(training)
    return model(volume)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
