"""Six-level feature pyramid over a small residual backbone.

The backbone produces C2..C5 at strides 4/8/16/32; lateral 1x1 convs plus
nearest-neighbor 2x top-down merges give P2..P5, and two stride-2 convs
extend to P6/P7. Every level ends up at one uniform channel width and gets
its own independently parameterized multi-dilation block appended.

Spatial sizes follow 3x3/pad-1 conv arithmetic throughout, i.e. every
stride-2 step is a ceil-halving. Inputs only need to be divisible by 4
(the stem); when a top-down merge meets an odd size the upsampled map is
cropped to the lateral map, top-left anchored, with a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .rfp import RfpConfig, RfpParams, init_rfp_params, rfp_forward
from .tensor import Parameter, Tensor, add, concat, conv2d, crop2d, relu, upsample_nearest_2x

LEVELS = (2, 3, 4, 5, 6, 7)
STRIDES = (4, 8, 16, 32, 64, 128)


@dataclass(frozen=True)
class BackboneSpec:
    stage_channels: tuple = (16, 24, 32, 40)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    in_channels: int = 1

    def validate(self) -> "BackboneSpec":
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("backbone needs exactly 4 stages (strides 4, 8, 16, 32)")
        if any(c < 1 for c in self.stage_channels) or any(b < 0 for b in self.blocks_per_stage):
            raise ConfigError("backbone channels must be >= 1 and block counts >= 0")
        return self


@dataclass(frozen=True)
class PyramidSpec:
    out_channels: int = 32
    levels: tuple = LEVELS
    strides: tuple = STRIDES

    def validate(self) -> "PyramidSpec":
        if self.levels != LEVELS or self.strides != STRIDES:
            raise ConfigError("the pyramid is fixed at levels P2..P7, strides 4..128")
        if self.out_channels < 1:
            raise ConfigError("pyramid out_channels must be >= 1")
        return self


def level_sizes(image_hw: Tuple[int, int]) -> List[Tuple[int, int]]:
    """Feature map sizes for P2..P7: ceil(H/4) then repeated ceil-halving."""
    h, w = image_hw
    sizes = [(-(-h // 4), -(-w // 4))]
    for _ in range(5):
        ph, pw = sizes[-1]
        sizes.append((-(-ph // 2), -(-pw // 2)))
    return sizes


class ConvLayer:
    """3x3 (or kxk) conv with He-normal init and optional bias."""

    def __init__(self, rng, name, cin, cout, k=3, stride=1, padding=1, dilation=1, bias=True,
                 weight_std=None):
        std = weight_std if weight_std is not None else np.sqrt(2.0 / (cin * k * k))
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.weight = Parameter(f"{name}/weight", rng.normal(scale=std, size=(cout, cin, k, k)))
        self.bias = Parameter(f"{name}/bias", np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(
            x,
            self.weight.tensor,
            self.bias.tensor if self.bias is not None else None,
            stride=self.stride,
            padding=self.padding,
            dilation=self.dilation,
        )

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class ResidualBlock:
    """y = relu(x + conv(relu(conv(x)))); identity when weights are zero."""

    def __init__(self, rng, name, channels):
        self.conv1 = ConvLayer(rng, f"{name}/conv1", channels, channels)
        self.conv2 = ConvLayer(rng, f"{name}/conv2", channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(add(x, self.conv2(relu(self.conv1(x)))))

    def parameters(self):
        return self.conv1.parameters() + self.conv2.parameters()


class Backbone:
    def __init__(self, spec: BackboneSpec, rng):
        spec.validate()
        self.spec = spec
        ch = spec.stage_channels
        self.stem = ConvLayer(rng, "backbone/stem", spec.in_channels, ch[0], stride=4)
        self.transitions = [
            ConvLayer(rng, f"backbone/down{i + 3}", ch[i], ch[i + 1], stride=2) for i in range(3)
        ]
        self.stages = [
            [ResidualBlock(rng, f"backbone/stage{i + 2}/block{j + 1}", ch[i]) for j in range(spec.blocks_per_stage[i])]
            for i in range(4)
        ]

    def __call__(self, image: Tensor):
        if image.shape[1] != self.spec.in_channels:
            raise ConfigError(
                f"backbone expects {self.spec.in_channels}-channel images, got {image.shape[1]}"
            )
        if image.shape[2] % 4 or image.shape[3] % 4:
            raise ConfigError(f"image size {image.shape[2:]} is not divisible by the stem stride 4")
        t = relu(self.stem(image))
        maps = []
        for i in range(4):
            if i > 0:
                t = relu(self.transitions[i - 1](t))
            for block in self.stages[i]:
                t = block(t)
            maps.append(t)
        return tuple(maps)

    def parameters(self):
        out = self.stem.parameters()
        for tr in self.transitions:
            out += tr.parameters()
        for stage in self.stages:
            for block in stage:
                out += block.parameters()
        return out


class FeaturePyramid:
    """Lateral 1x1 + top-down 2x merges, 3x3 smoothing, stride-2 P6/P7."""

    def __init__(self, spec_channels: Sequence[int], out_channels: int, rng):
        self.out_channels = out_channels
        self.laterals = [
            ConvLayer(rng, f"fpn/lateral{i + 2}", c, out_channels, k=1, padding=0)
            for i, c in enumerate(spec_channels)
        ]
        self.smooths = [
            ConvLayer(rng, f"fpn/smooth{i + 2}", out_channels, out_channels) for i in range(4)
        ]
        self.down6 = ConvLayer(rng, "fpn/down6", out_channels, out_channels, stride=2)
        self.down7 = ConvLayer(rng, "fpn/down7", out_channels, out_channels, stride=2)

    def __call__(self, cmaps) -> List[Tensor]:
        merged = [None] * 4
        merged[3] = self.laterals[3](cmaps[3])
        for i in (2, 1, 0):
            lat = self.laterals[i](cmaps[i])
            up = upsample_nearest_2x(merged[i + 1])
            if up.shape[2:] != lat.shape[2:]:
                warnings.warn(
                    f"top-down merge at P{i + 2}: cropping upsampled {up.shape[2:]} "
                    f"to lateral {lat.shape[2:]} (top-left anchored)"
                )
                up = crop2d(up, lat.shape[2], lat.shape[3])
            merged[i] = add(lat, up)
        outs = [self.smooths[i](merged[i]) for i in range(4)]
        p6 = self.down6(outs[3])
        p7 = self.down7(p6)
        return outs + [p6, p7]

    def parameters(self):
        out = []
        for layer in self.laterals + self.smooths + [self.down6, self.down7]:
            out += layer.parameters()
        return out


def backbone_forward(image: Tensor, backbone: Backbone):
    return backbone(image)

def build_pyramid(cmaps, fpn: FeaturePyramid) -> List[Tensor]:
    return fpn(cmaps)


def attach_rfp(
    feats: Sequence[Tensor],
    cfg: RfpConfig,
    params_per_level: Sequence[RfpParams],
    force_branch: Optional[int] = None,
) -> List[Tensor]:
    """Apply one independently parameterized block per pyramid level."""
    if len(feats) != len(params_per_level):
        raise ConfigError(f"{len(feats)} feature maps but {len(params_per_level)} rfp parameter sets")
    return [rfp_forward(f, cfg, p, force_branch=force_branch) for f, p in zip(feats, params_per_level)]


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    fpn_channels: int = 32
    rfp: RfpConfig = None
    head_hidden: int = 32
    init_seed: int = 0

    def __post_init__(self):
        if self.rfp is None:
            object.__setattr__(self, "rfp", RfpConfig(channels=self.fpn_channels))

    def validate(self) -> "ModelConfig":
        self.backbone.validate()
        self.rfp.validate()
        if self.rfp.channels != self.fpn_channels:
            raise ConfigError(
                f"rfp channels {self.rfp.channels} must equal pyramid width {self.fpn_channels}"
            )
        return self


class DetectorModel:
    """Backbone + pyramid + per-level blocks + a shared two-class head.

    The head (optional hidden 3x3 conv, then 3x3 class and box convs) runs
    once per level with the same parameters, so its weights accumulate
    gradients from all six sites.
    """

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        self.backbone = Backbone(cfg.backbone, rng)
        self.fpn = FeaturePyramid(cfg.backbone.stage_channels, cfg.fpn_channels, rng)
        self.rfp_params = [
            init_rfp_params(cfg.rfp, rng, prefix=f"rfp/p{lvl}") for lvl in LEVELS
        ]
        c = cfg.fpn_channels
        self.head_hidden = None
        if cfg.head_hidden > 0:
            self.head_hidden = ConvLayer(rng, "head/hidden", c, cfg.head_hidden, k=3)
            c = cfg.head_hidden
        # near-zero prediction weights and a background-prior class bias keep
        # the first optimization steps off the gradient cliff
        self.head_cls = ConvLayer(rng, "head/cls", c, 2, k=3, weight_std=0.01)
        self.head_cls.bias.tensor.data[1] = -np.log((1.0 - 0.01) / 0.01)
        self.head_reg = ConvLayer(rng, "head/reg", c, 4, k=3, weight_std=0.01)
        for layer in filter(None, (self.head_hidden, self.head_cls, self.head_reg)):
            for p in layer.parameters():
                p.shared_ref_count = len(LEVELS)

    def pyramid_features(self, images: Tensor, force_branch: Optional[int] = None) -> List[Tensor]:
        cmaps = self.backbone(images)
        pyramid = self.fpn(cmaps)
        return attach_rfp(pyramid, self.cfg.rfp, self.rfp_params, force_branch=force_branch)

    def forward(self, images: Tensor, force_branch: Optional[int] = None):
        """Per-level (class-logit map [N,2,h,w], box-delta map [N,4,h,w])."""
        outs = []
        for feat in self.pyramid_features(images, force_branch=force_branch):
            t = feat
            if self.head_hidden is not None:
                t = relu(self.head_hidden(t))
            outs.append((self.head_cls(t), self.head_reg(t)))
        return outs

    def flat_predictions(self, images: Tensor, force_branch: Optional[int] = None):
        """Concatenate all levels into per-image rows: ([N*A,2], [N*A,4]).

        Rows run image-major, then level, then row-major cells, matching the
        anchor enumeration order of the detection head.
        """
        n = images.shape[0]
        cls_rows, reg_rows = [], []
        for cls_map, reg_map in self.forward(images, force_branch=force_branch):
            h, w = cls_map.shape[2], cls_map.shape[3]
            cls_rows.append(cls_map.permute(0, 2, 3, 1).reshape(n, h * w, 2))
            reg_rows.append(reg_map.permute(0, 2, 3, 1).reshape(n, h * w, 4))
        cls_cat = concat(cls_rows, axis=1)
        reg_cat = concat(reg_rows, axis=1)
        a = cls_cat.shape[1]
        return cls_cat.reshape(n * a, 2), reg_cat.reshape(n * a, 4), a

    def parameters(self) -> List[Parameter]:
        out = self.backbone.parameters() + self.fpn.parameters()
        for rp in self.rfp_params:
            out += rp.parameters()
        for layer in filter(None, (self.head_hidden, self.head_cls, self.head_reg)):
            out += layer.parameters()
        return out

    def state_arrays(self):
        return {p.name: p.tensor.data.copy() for p in self.parameters()}

    def load_arrays(self, arrays) -> None:
        mine = {p.name: p for p in self.parameters()}
        missing = sorted(set(mine) - set(arrays))
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {missing[:3]}...")
        for name, param in mine.items():
            arr = arrays[name]
            if arr.shape != param.tensor.data.shape:
                raise ConfigError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model {param.tensor.data.shape}"
                )
            param.tensor.data = arr.astype(param.tensor.data.dtype, copy=True)
