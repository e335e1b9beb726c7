"""Small frozen CNN producing mid- and high-level feature maps.

Stand-in for a pretrained extractor: a stride-1 conv block followed by
stride-2 conv blocks down to the mid level, then further stride-2 blocks
down to the high level. Every block is conv3x3 -> ReLU.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import DEFAULT_DTYPE, Tensor, conv2d, relu
from .params import ParamSet


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    mid_channels: int = 32
    high_channels: int = 32
    mid_factor: int = 4
    high_factor: int = 8

    def validate(self) -> None:
        for field_name in ("in_channels", "mid_channels", "high_channels"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name} must be positive, got {getattr(self, field_name)}")
        for f in (self.mid_factor, self.high_factor):
            if f < 1 or f & (f - 1):
                raise ConfigError(f"downsample factors must be powers of two, got {f}")
        if self.high_factor < self.mid_factor:
            raise ConfigError("high_factor must be >= mid_factor")

    def layers(self) -> list[tuple[str, int, int, int]]:
        """(name, c_in, c_out, stride) per block, in order."""
        n_mid = int(math.log2(self.mid_factor))
        n_high = int(math.log2(self.high_factor // self.mid_factor))
        first = max(self.mid_channels // 2, 1) if n_mid else self.mid_channels
        specs = [("backbone.conv0", self.in_channels, first, 1)]
        c = first
        for i in range(n_mid):
            specs.append((f"backbone.mid{i}", c, self.mid_channels, 2))
            c = self.mid_channels
        for i in range(n_high):
            specs.append((f"backbone.high{i}", c, self.high_channels, 2))
            c = self.high_channels
        if n_high == 0 and self.high_channels != self.mid_channels:
            specs.append(("backbone.high_proj", c, self.high_channels, 1))
        return specs


class FeaturePair(NamedTuple):
    mid: Tensor
    high: Tensor


def build_backbone(cfg: BackboneConfig, seed: int) -> ParamSet:
    cfg.validate()
    rng = np.random.default_rng([int(seed), 0xB0B])
    tensors = {}
    for name, cin, cout, _ in cfg.layers():
        bound = math.sqrt(6.0 / (cin * 9))
        tensors[name + ".w"] = Tensor(rng.uniform(-bound, bound, size=(cout, cin, 3, 3)))
        tensors[name + ".b"] = Tensor(np.zeros(cout))
    return ParamSet(tensors, frozen=set(tensors), meta={"backbone": asdict(cfg)}).astype(DEFAULT_DTYPE)


def backbone_config(params: ParamSet) -> BackboneConfig:
    return BackboneConfig(**params.meta["backbone"])


def extract_features(params: ParamSet, image: Tensor) -> FeaturePair:
    """Run the backbone on one ``3 x H0 x W0`` image (values in [0, 1])."""
    cfg = backbone_config(params)
    if image.data.ndim != 3 or image.shape[0] != cfg.in_channels:
        raise DimensionError(f"expected {cfg.in_channels} x H x W image, got {image.shape}")
    h0, w0 = image.shape[1:]
    if h0 % cfg.high_factor or w0 % cfg.high_factor or h0 % cfg.mid_factor or w0 % cfg.mid_factor:
        raise DimensionError(
            f"image extent {h0}x{w0} not divisible by downsample factors {cfg.mid_factor}/{cfg.high_factor}"
        )
    x = (image - 0.5) * 4.0
    mid = None
    for name, _, _, stride in cfg.layers():
        x = relu(conv2d(x, params[name + ".w"], params[name + ".b"], stride=stride, padding=1))
        if name.startswith("backbone.mid") or (name == "backbone.conv0" and cfg.mid_factor == 1):
            mid = x
    if mid is None:
        mid = x
    return FeaturePair(mid, x)
