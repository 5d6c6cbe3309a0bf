"""Feature extraction encoder: a strided toy backbone with three taps, one
extraction branch per tap, and channel-wise aggregation of the branch outputs.

Tensors flowing through the modules are NCHW; the public ``FeatureMap`` type
stores a single image's map as (h, w, c) together with its stride.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError, ValidationError

LEVELS = ("low", "mid", "high")

# Which branches survive each ablation mode. "none" drops every branch and
# decodes the top tap directly (the conventional single-level pipeline).
ABLATIONS = {
    "full": ("low", "mid", "high"),
    "hb": ("high",),
    "hb+lb": ("low", "high"),
    "hb+mb": ("mid", "high"),
    "none": (),
}


def round_half_up(x: float) -> int:
    # 1e-9 absorbs binary representation error such as 1.1 * 320 = 352.00000000000006
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class ImageTensor:
    data: np.ndarray
    id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ShapeError(f"image {self.id!r}: expected (h, w, 3), got {data.shape}")
        h, w = data.shape[:2]
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise ShapeError(f"image {self.id!r}: height and width must be positive multiples of 32, got {h}x{w}")
        if not np.all(np.isfinite(data)) or data.min() < 0 or data.max() > 1:
            raise ValidationError(f"image {self.id!r}: values must be finite and within [0, 1]")


@dataclass(frozen=True)
class FeatureMap:
    data: torch.Tensor  # (h, w, c)
    stride: int

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    def nchw(self) -> torch.Tensor:
        return self.data.permute(2, 0, 1).unsqueeze(0)

    @classmethod
    def from_nchw(cls, x: torch.Tensor, stride: int) -> FeatureMap:
        if x.ndim != 4 or x.shape[0] != 1:
            raise ShapeError(f"expected a single-image NCHW tensor, got {tuple(x.shape)}")
        return cls(x[0].permute(1, 2, 0), stride)


@dataclass(frozen=True)
class BranchSpec:
    tap_index: int
    channel_multiplier: float
    target_stride: int

    def out_channels(self, tap_channels: int) -> int:
        return round_half_up(self.channel_multiplier * tap_channels)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture description.

    ``backbone_channels`` lists one channel count per stride-2 stage, so stage
    ``k`` (0-based) outputs stride ``2 ** (k + 1)``. ``stage_repeats`` adds that
    many stride-1 3x3 convs after each stage's downsampling conv.
    """

    backbone_channels: tuple[int, ...] = (128, 24, 128, 64, 320)
    stage_repeats: tuple[int, ...] = (6, 1, 3, 1, 2)
    tap_strides: tuple[int, int, int] = (4, 16, 32)
    branch_specs: tuple[BranchSpec, BranchSpec, BranchSpec] = (
        BranchSpec(0, 3.0, 2),
        BranchSpec(1, 1.5, 2),
        BranchSpec(2, 1.1, 2),
    )
    geometry_name: str = "mobilenet-like"
    seed: int = 0
    ablation: str = "full"
    branch_conv: str = "depthwise"
    global_dim: int = 256

    def __post_init__(self):
        object.__setattr__(self, "backbone_channels", tuple(int(c) for c in self.backbone_channels))
        repeats = self.stage_repeats or (0,) * len(self.backbone_channels)
        object.__setattr__(self, "stage_repeats", tuple(int(r) for r in repeats))
        object.__setattr__(self, "tap_strides", tuple(int(s) for s in self.tap_strides))
        specs = tuple(s if isinstance(s, BranchSpec) else BranchSpec(**s) for s in self.branch_specs)
        object.__setattr__(self, "branch_specs", specs)
        self.validate()

    @classmethod
    def mobilenet_like(cls, **overrides) -> NetworkConfig:
        return cls(**overrides)

    @classmethod
    def vgg_like(cls, **overrides) -> NetworkConfig:
        kw = dict(
            backbone_channels=(64, 256, 512, 512),
            stage_repeats=(1, 2, 2, 2),
            tap_strides=(4, 8, 16),
            branch_specs=(BranchSpec(0, 1.0, 4), BranchSpec(1, 0.25, 4), BranchSpec(2, 0.25, 4)),
            geometry_name="vgg-like",
        )
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def tiny(cls, **overrides) -> NetworkConfig:
        """MobileNet multipliers on a narrow backbone; cheap enough to train on one CPU."""
        kw = dict(
            backbone_channels=(8, 8, 16, 16, 32),
            stage_repeats=(0, 1, 0, 1, 0),
            geometry_name="tiny",
        )
        kw.update(overrides)
        return cls(**kw)

    def validate(self) -> None:
        n_stages = len(self.backbone_channels)
        if n_stages == 0 or any(c <= 0 for c in self.backbone_channels):
            raise ConfigError("backbone_channels must be a non-empty list of positive integers")
        if len(self.stage_repeats) != n_stages or any(r < 0 for r in self.stage_repeats):
            raise ConfigError("stage_repeats must give a non-negative count for every stage")
        if len(self.tap_strides) != 3:
            raise ConfigError("exactly three tap strides are required")
        for s in self.tap_strides:
            if s < 2 or s & (s - 1) or s > 2 ** n_stages:
                raise ConfigError(
                    f"tap stride {s} is not reachable: stages produce strides "
                    f"{[2 ** (k + 1) for k in range(n_stages)]}"
                )
        if list(self.tap_strides) != sorted(set(self.tap_strides)):
            raise ConfigError("tap strides must be strictly increasing (low, mid, high)")
        if len(self.branch_specs) != 3:
            raise ConfigError("exactly three branch specs are required")
        if sorted(b.tap_index for b in self.branch_specs) != [0, 1, 2]:
            raise ConfigError("branch specs must cover tap indices 0, 1, 2 once each")
        if len({b.target_stride for b in self.branch_specs}) != 1:
            raise ConfigError("all branches must share one target stride")
        for b in self.branch_specs:
            tap_stride = self.tap_strides[b.tap_index]
            if b.channel_multiplier <= 0:
                raise ConfigError("channel multipliers must be positive")
            if b.out_channels(self.tap_channels[b.tap_index]) < 1:
                raise ConfigError(f"branch on tap {b.tap_index} rounds to zero channels")
            if b.target_stride < 1 or tap_stride % b.target_stride:
                raise ConfigError(
                    f"target stride {b.target_stride} does not divide tap stride {tap_stride}"
                )
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {sorted(ABLATIONS)}")
        if self.branch_conv not in ("depthwise", "dense"):
            raise ConfigError("branch_conv must be 'depthwise' or 'dense'")
        if self.global_dim < 1:
            raise ConfigError("global_dim must be positive")

    @property
    def tap_stages(self) -> tuple[int, ...]:
        return tuple(int(math.log2(s)) - 1 for s in self.tap_strides)

    @property
    def tap_channels(self) -> tuple[int, ...]:
        return tuple(self.backbone_channels[k] for k in self.tap_stages)

    @property
    def active_levels(self) -> tuple[str, ...]:
        return ABLATIONS[self.ablation]

    def branch_spec(self, level: str) -> BranchSpec:
        return next(b for b in self.branch_specs if b.tap_index == LEVELS.index(level))

    def branch_channels(self, level: str) -> int:
        spec = self.branch_spec(level)
        return spec.out_channels(self.tap_channels[spec.tap_index])

    @property
    def output_stride(self) -> int:
        if not self.active_levels:
            return self.tap_strides[2]
        return self.branch_specs[0].target_stride

    @property
    def dense_channels(self) -> int:
        if not self.active_levels:
            return self.tap_channels[2]
        return sum(self.branch_channels(level) for level in self.active_levels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["stage_repeats"] = list(self.stage_repeats)
        d["tap_strides"] = list(self.tap_strides)
        d["branch_specs"] = [asdict(b) for b in self.branch_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config fields: {sorted(unknown)}")
        d = dict(d)
        if "branch_specs" in d:
            d["branch_specs"] = tuple(BranchSpec(**b) if isinstance(b, dict) else b for b in d["branch_specs"])
        return cls(**d)

    def with_ablation(self, ablation: str) -> NetworkConfig:
        return replace(self, ablation=ablation)


def _he_init(conv: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = conv.in_channels // conv.groups * conv.kernel_size[0] * conv.kernel_size[1]
    with torch.no_grad():
        w = torch.randn(conv.weight.shape, generator=gen, dtype=torch.float64) * math.sqrt(2.0 / fan_in)
        conv.weight.copy_(w)
        if conv.bias is not None:
            conv.bias.zero_()


class Backbone(nn.Module):
    """Stride-2 3x3 conv stages (each optionally followed by stride-1 convs), ReLU after every conv."""

    def __init__(self, config: NetworkConfig, gen: torch.Generator | None = None):
        super().__init__()
        self.config = config
        if gen is None:
            gen = torch.Generator().manual_seed(config.seed)
        stages = []
        c_in = 3
        for c_out, repeats in zip(config.backbone_channels, config.stage_repeats):
            layers = [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)]
            layers += [nn.Conv2d(c_out, c_out, 3, stride=1, padding=1) for _ in range(repeats)]
            for conv in layers:
                _he_init(conv, gen)
            stages.append(nn.ModuleList(layers))
            c_in = c_out
        # Stages above the highest tap never contribute to an output.
        self.stages = nn.ModuleList(stages[: max(config.tap_stages) + 1])

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input height and width must be multiples of 32, got {h}x{w}")
        taps = []
        wanted = set(self.config.tap_stages)
        for k, stage in enumerate(self.stages):
            for conv in stage:
                x = F.relu(conv(x))
            if k in wanted:
                taps.append(x)
        return taps

    def conv_layers(self):
        """Yield (conv, output stride) for every conv, in execution order."""
        for k, stage in enumerate(self.stages):
            for conv in stage:
                yield conv, 2 ** (k + 1)


def upsample_nearest(x: torch.Tensor, scale: int) -> torch.Tensor:
    """Integer-factor nearest-neighbour upsampling of an NCHW tensor.

    Same result as ``F.interpolate(mode="nearest")``, which is very slow on CPU for large factors.
    """
    if scale == 1:
        return x
    n, c, h, w = x.shape
    return x[:, :, :, None, :, None].expand(n, c, h, scale, w, scale).reshape(n, c, h * scale, w * scale)


class Branch(nn.Module):
    """1x1 conv -> ReLU6 -> nearest upsample -> 3x3 conv."""

    def __init__(self, in_channels: int, spec: BranchSpec, tap_stride: int,
                 conv_kind: str = "depthwise", gen: torch.Generator | None = None):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = spec.out_channels(in_channels)
        self.tap_stride = tap_stride
        self.scale = tap_stride // spec.target_stride
        self.expand = nn.Conv2d(in_channels, self.out_channels, 1)
        groups = self.out_channels if conv_kind == "depthwise" else 1
        self.smooth = nn.Conv2d(self.out_channels, self.out_channels, 3, padding=1, groups=groups)
        if gen is None:
            gen = torch.Generator().manual_seed(0)
        _he_init(self.expand, gen)
        _he_init(self.smooth, gen)

    def expand_activation(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu6(self.expand(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"branch expects {self.in_channels} input channels, got {x.shape[1]}")
        x = upsample_nearest(self.expand_activation(x), self.scale)
        # channels-last makes the depthwise conv several times faster on CPU
        return self.smooth(x.contiguous(memory_format=torch.channels_last))


class FeatureEncoder(nn.Module):
    """Backbone plus the branches enabled by ``config.ablation``; output is the dense map F."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        self.backbone = Backbone(config, gen)
        # Every branch is constructed so that parameters of the surviving
        # branches do not depend on the ablation mode.
        branches = {}
        for level in LEVELS:
            spec = config.branch_spec(level)
            branches[level] = Branch(
                config.tap_channels[spec.tap_index], spec, config.tap_strides[spec.tap_index],
                config.branch_conv, gen,
            )
        self.branches = nn.ModuleDict({k: v for k, v in branches.items() if k in config.active_levels})

    def branch_outputs(self, taps: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        outs = []
        for level in LEVELS:
            if level in self.branches:
                outs.append(self.branches[level](taps[LEVELS.index(level)]))
        return outs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        taps = self.backbone(x)
        if not self.branches:
            return taps[2]
        return torch.cat(self.branch_outputs(taps), dim=1)


def build_backbone(config: NetworkConfig) -> Backbone:
    return Backbone(config)


def _image_batch(image: ImageTensor, like: nn.Module) -> torch.Tensor:
    p = next(like.parameters())
    return torch.as_tensor(np.asarray(image.data), dtype=p.dtype).permute(2, 0, 1).unsqueeze(0)


def backbone_forward(backbone: Backbone, image: ImageTensor) -> tuple[FeatureMap, FeatureMap, FeatureMap]:
    if not isinstance(image, ImageTensor):
        image = ImageTensor(image)
    taps = backbone(_image_batch(image, backbone))
    return tuple(FeatureMap.from_nchw(t, s) for t, s in zip(taps, backbone.config.tap_strides))


def branch_forward(tap: FeatureMap, spec: BranchSpec, params: Branch) -> FeatureMap:
    if tap.channels != params.in_channels:
        raise ShapeError(f"tap has {tap.channels} channels, branch parameters expect {params.in_channels}")
    if params.spec != spec:
        raise ShapeError("branch parameters were built for a different BranchSpec")
    if tap.stride != params.tap_stride:
        raise ShapeError(f"tap stride {tap.stride} does not match branch tap stride {params.tap_stride}")
    return FeatureMap.from_nchw(params(tap.nchw()), spec.target_stride)


def aggregate(branch_outputs: Sequence[FeatureMap]) -> FeatureMap:
    """Concatenate branch outputs along channels, in the order given (low, mid, high)."""
    if not branch_outputs:
        raise ShapeError("nothing to aggregate")
    first = branch_outputs[0]
    for fm in branch_outputs[1:]:
        if fm.data.shape[:2] != first.data.shape[:2] or fm.stride != first.stride:
            raise ShapeError(
                f"cannot aggregate maps of shape {tuple(fm.data.shape[:2])}/stride {fm.stride} "
                f"with {tuple(first.data.shape[:2])}/stride {first.stride}"
            )
    return FeatureMap(torch.cat([fm.data for fm in branch_outputs], dim=-1), first.stride)
