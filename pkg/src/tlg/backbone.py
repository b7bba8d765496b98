"""Thirteen-tap hierarchical feature extractors.

Taps 0-3 form the low level, 4-9 the middle level and 10-12 the high level.
The toy backbone is a frozen, seeded residual CNN shaped like a small
ResNet pyramid.  A pretrained network can be attached through
:class:`ExternalBackbone`, which only needs a callable returning the 13 maps.

Reference tap tables for real extractors (channels per tap, stride):

* ResNet50: bottleneck outputs of layer2 (4 blocks, 512 ch, stride 8),
  layer3 (6 blocks, 1024 ch, stride 16), layer4 (3 blocks, 2048 ch, stride 32).
* VGG16: the 13 conv layers, channels 64,64,128,128,256,256,256,512x6 at
  strides 1,1,2,2,4,4,4,8,8,8,16,16,16.

Which concrete block maps to which tap is the adapter's responsibility.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError

N_TAPS = 13
LEVELS = ("low", "middle", "high")
LEVEL_TAPS = {"low": (0, 1, 2, 3), "middle": (4, 5, 6, 7, 8, 9), "high": (10, 11, 12)}
# channel reduction exponent per level: channels / 2**alpha
LEVEL_ALPHA = {"low": 4, "middle": 2, "high": 1}

RESNET50_TAPS = tuple([(512, 8)] * 4 + [(1024, 16)] * 6 + [(2048, 32)] * 3)
VGG16_TAPS = ((64, 1), (64, 1), (128, 2), (128, 2), (256, 4), (256, 4), (256, 4),
              (512, 8), (512, 8), (512, 8), (512, 16), (512, 16), (512, 16))


def level_of(tap: int) -> str:
    for level, taps in LEVEL_TAPS.items():
        if tap in taps:
            return level
    raise ConfigError(f"invalid tap index {tap}; taps are 0-{N_TAPS - 1}")


@dataclass(frozen=True)
class TapSpec:
    tap_index: int
    level: str
    channels: int
    stride: int
    spatial: tuple[int, int]


def _parse_taps(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(t) for t in text)
    out: list[int] = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return tuple(out)


@dataclass(frozen=True)
class LayerSelection:
    """Support and query tap choices.

    The default form is one tap per level for each branch; a branch may also
    use several taps of a level (e.g. the full 0-12 set), in which case the
    level's projected taps are summed.
    """

    support_layers: tuple[int, ...] = (3, 9, 12)
    query_layers: tuple[int, ...] = (0, 4, 10)

    def __post_init__(self):
        for name in ("support_layers", "query_layers"):
            taps = tuple(getattr(self, name))
            object.__setattr__(self, name, taps)
            if len(set(taps)) != len(taps):
                raise ConfigError(f"{name}: duplicate taps in {taps}")
            levels = [level_of(t) for t in taps]
            for lv in LEVELS:
                if lv not in levels:
                    raise ConfigError(f"{name}: no {lv}-level tap in {taps}")

    @classmethod
    def parse(cls, support, query) -> "LayerSelection":
        try:
            return cls(_parse_taps(support), _parse_taps(query))
        except ValueError as err:
            raise ConfigError(f"cannot parse layer selection: {err}") from None

    def swapped(self) -> "LayerSelection":
        return LayerSelection(self.query_layers, self.support_layers)

    def by_level(self, branch: str) -> dict[str, tuple[int, ...]]:
        taps = self.support_layers if branch == "support" else self.query_layers
        return {lv: tuple(t for t in taps if level_of(t) == lv) for lv in LEVELS}

    @property
    def is_triple(self) -> bool:
        return len(self.support_layers) == 3 and len(self.query_layers) == 3

    def label(self, branch: str) -> str:
        taps = self.support_layers if branch == "support" else self.query_layers
        if taps == tuple(range(N_TAPS)):
            return "0-12"
        return ", ".join(map(str, taps))


class FeatureTapSet(Mapping):
    """Requested tap features keyed by tap index, with their specs."""

    def __init__(self, features: dict[int, torch.Tensor], specs: dict[int, TapSpec]):
        self.features = features
        self.specs = specs

    def __getitem__(self, tap):
        return self.features[tap]

    def __iter__(self):
        return iter(sorted(self.features))

    def __len__(self):
        return len(self.features)


class _Block(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.skip = None if (cin == cout and stride == 1) else nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        identity = x if self.skip is None else self.skip(x)
        return _rms_norm(identity + F.relu(self.conv(x)))


def _rms_norm(x, eps=1e-6):
    # parameter-free, per pixel across channels: keeps random features O(1) at every depth
    return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


class ToyBackbone(nn.Module):
    """Frozen seeded CNN with taps at strides 4 (0-3), 8 (4-9) and 16 (10-12)."""

    STRIDES = (4,) * 4 + (8,) * 6 + (16,) * 3
    BASE_CHANNELS = {"low": 32, "middle": 64, "high": 128}

    def __init__(self, seed: int = 0, width_multiplier: int = 1):
        super().__init__()
        if int(width_multiplier) < 1:
            raise ConfigError(f"width_multiplier must be >= 1, got {width_multiplier}")
        self.seed = seed
        self.width_multiplier = int(width_multiplier)
        self.channels = tuple(self.BASE_CHANNELS[level_of(t)] * self.width_multiplier for t in range(N_TAPS))
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.stem = nn.Conv2d(3, self.channels[0], 4, stride=4)
            blocks = []
            cin = self.channels[0]
            for t in range(N_TAPS):
                stride = self.STRIDES[t] // (self.STRIDES[t - 1] if t else 4)
                blocks.append(_Block(cin, self.channels[t], stride))
                cin = self.channels[t]
            self.blocks = nn.ModuleList(blocks)
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                    nn.init.zeros_(m.bias)
        finally:
            torch.random.set_rng_state(gen_state)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen: always behaves as in eval mode
        return super().train(False)

    @property
    def total_stride(self) -> int:
        return max(self.STRIDES)

    def tap_specs(self, image_size: int) -> dict[int, TapSpec]:
        return {t: TapSpec(t, level_of(t), self.channels[t], self.STRIDES[t],
                           (image_size // self.STRIDES[t],) * 2) for t in range(N_TAPS)}

    def forward(self, images: torch.Tensor, taps: Iterable[int]) -> dict[int, torch.Tensor]:
        taps = sorted(set(taps))
        for t in taps:
            level_of(t)
        h, w = images.shape[-2:]
        if h % self.total_stride or w % self.total_stride:
            raise ConfigError(f"image size {h}x{w} not divisible by backbone stride {self.total_stride}")
        out = {}
        if not taps:
            return out
        x = self.stem(images - 0.5)
        for t in range(taps[-1] + 1):
            x = self.blocks[t](x)
            if t in taps:
                out[t] = x
        return out


class ExternalBackbone(nn.Module):
    """Wraps a callable ``images -> sequence of 13 maps`` (e.g. a pretrained ResNet50)."""

    def __init__(self, fn: Callable[[torch.Tensor], Sequence[torch.Tensor]],
                 tap_table: Sequence[tuple[int, int]] = RESNET50_TAPS):
        super().__init__()
        if len(tap_table) != N_TAPS:
            raise ConfigError(f"tap table must list {N_TAPS} taps")
        self.fn = fn
        self.channels = tuple(c for c, _ in tap_table)
        self.strides = tuple(s for _, s in tap_table)

    @property
    def total_stride(self) -> int:
        return max(self.strides)

    def tap_specs(self, image_size: int) -> dict[int, TapSpec]:
        return {t: TapSpec(t, level_of(t), self.channels[t], self.strides[t],
                           (image_size // self.strides[t],) * 2) for t in range(N_TAPS)}

    def forward(self, images, taps):
        with torch.no_grad():
            maps = self.fn(images)
        return {t: maps[t] for t in sorted(set(taps))}


def toy_backbone(seed: int = 0, width_multiplier: int = 1) -> ToyBackbone:
    return ToyBackbone(seed, width_multiplier)


def extract_taps(backbone: nn.Module, image: torch.Tensor, requested_taps: Iterable[int]) -> FeatureTapSet:
    """Features for ``requested_taps`` only; accepts (3,H,W) or (B,3,H,W)."""
    requested = sorted(set(requested_taps))
    single = image.dim() == 3
    x = image[None] if single else image
    with torch.no_grad():
        feats = backbone(x, requested)
    if single:
        feats = {t: f[0] for t, f in feats.items()}
    specs = backbone.tap_specs(int(x.shape[-1]))
    return FeatureTapSet(feats, {t: specs[t] for t in requested})
