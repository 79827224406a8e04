"""Analytic parameter and multiply-accumulate accounting.

A model is described as a flat list of layer descriptors; each conv-like
layer knows its channel geometry and the stride of the grid it runs on, so
its output size for any input follows the same ceil-halving arithmetic the
real network uses (3x3/pad-1 convs). Weights in one shared group are
counted once. Elementwise work (shortcut adds, branch pooling, upsampling)
is tracked in a side column and kept out of the MAC headline; FLOPs are
reported as 2x MACs by this project's convention.

``detector_graph`` mirrors the built model conv-for-conv, so the analytic
MAC total equals the instrumented multiply counter of an actual forward
pass. ``paper_scale_graph`` describes the reference-scale configuration
(ResNet50 + 256-wide pyramid + blocks at every level, 960x1024 input) that
the published ablation tables are computed at.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .errors import ConfigError
from .pyramid import LEVELS, STRIDES, ModelConfig
from .rfp import ALL_BRANCHES, RfpConfig, default_dilations

CONV_KINDS = ("conv", "rfp", "head")
ELEMENTWISE_KINDS = ("residual_add", "branch_pool", "upsample")


@dataclass(frozen=True)
class LayerDesc:
    name: str
    kind: str  # conv-like: conv / rfp / head; elementwise: residual_add / branch_pool / upsample
    cin: int
    cout: int
    kernel: int = 3
    stride: int = 1  # stride of this layer itself (bookkeeping)
    dilation: int = 1
    bias: bool = False
    out_stride: int = 1  # stride of the output grid relative to the image
    shared_group: Optional[str] = None

    def weight_shape(self):
        return (self.cout, self.cin, self.kernel, self.kernel)

    def param_count(self) -> int:
        if self.kind not in CONV_KINDS:
            return 0
        return self.cout * self.cin * self.kernel * self.kernel + (self.cout if self.bias else 0)


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    adds: int


@dataclass
class CostReport:
    layers: List[LayerCost]
    input_hw: Optional[Tuple[int, int]]

    @property
    def params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    @property
    def elementwise_adds(self) -> int:
        return sum(l.adds for l in self.layers)


def grid_size(input_hw: Tuple[int, int], out_stride: int) -> Tuple[int, int]:
    """Output grid at a given stride: ceil-halvings from the input size."""
    h, w = input_hw
    s = out_stride
    if s & (s - 1):
        raise ConfigError(f"grid stride {s} is not a power of two")
    while s > 1:
        h = -(-h // 2)
        w = -(-w // 2)
        s //= 2
    return h, w


def _validate_shared_groups(graph: Sequence[LayerDesc]) -> None:
    shapes: Dict[str, tuple] = {}
    for layer in graph:
        if layer.kind not in CONV_KINDS and layer.kind not in ELEMENTWISE_KINDS:
            raise ConfigError(f"unknown layer kind {layer.kind!r} in {layer.name}")
        if layer.shared_group is None or layer.kind not in CONV_KINDS:
            continue
        shape = layer.weight_shape()
        if shapes.setdefault(layer.shared_group, shape) != shape:
            raise ConfigError(
                f"shared group {layer.shared_group!r} mixes weight shapes "
                f"{shapes[layer.shared_group]} and {shape}"
            )


def _report(graph: Sequence[LayerDesc], input_hw: Optional[Tuple[int, int]]) -> CostReport:
    _validate_shared_groups(graph)
    counted_groups: set = set()
    layers = []
    for layer in graph:
        params = 0
        if layer.kind in CONV_KINDS:
            if layer.shared_group is None or layer.shared_group not in counted_groups:
                params = layer.param_count()
                if layer.shared_group is not None:
                    counted_groups.add(layer.shared_group)
        macs = adds = 0
        if input_hw is not None:
            ho, wo = grid_size(input_hw, layer.out_stride)
            if layer.kind in CONV_KINDS:
                macs = layer.cout * layer.cin * layer.kernel * layer.kernel * ho * wo
            else:
                adds = layer.cout * ho * wo
        layers.append(LayerCost(layer.name, layer.kind, params, macs, adds))
    return CostReport(layers, input_hw)


def count_params(graph: Sequence[LayerDesc]) -> CostReport:
    """Parameter totals; independent of input size by construction."""
    return _report(graph, None)


def count_macs(graph: Sequence[LayerDesc], input_hw: Tuple[int, int]) -> CostReport:
    """Parameters plus per-layer multiply-accumulates at the given input."""
    return _report(graph, tuple(input_hw))


# ---------------------------------------------------------------------------
# graph builders


def _rfp_layers(cfg: RfpConfig, level: int, stride: int, prefix: str = "rfp") -> List[LayerDesc]:
    c = cfg.channels
    name = f"{prefix}/p{level}"
    layers: List[LayerDesc] = []
    if cfg.inference == ALL_BRANCHES:
        branch_ids = range(1, cfg.branches + 1)
    else:
        branch_ids = [cfg.inference]
    for i in branch_ids:
        group = f"{name}/weight" if cfg.share_weights else None
        layers.append(
            LayerDesc(
                f"{name}/branch{i}", "rfp", c, c, kernel=3,
                dilation=cfg.dilations[i - 1], bias=cfg.use_bias,
                out_stride=stride, shared_group=group,
            )
        )
        layers.append(LayerDesc(f"{name}/branch{i}/shortcut", "residual_add", c, c, out_stride=stride))
    if cfg.inference == ALL_BRANCHES:
        if cfg.fusion == "branch_pool":
            layers.append(LayerDesc(f"{name}/pool", "branch_pool", c, c, out_stride=stride))
        elif cfg.fusion == "add":
            for i in range(cfg.branches - 1):
                layers.append(LayerDesc(f"{name}/add{i + 1}", "residual_add", c, c, out_stride=stride))
        else:  # concat projection back to c channels
            layers.append(
                LayerDesc(f"{name}/concat_proj", "rfp", cfg.branches * c, c, kernel=1, out_stride=stride)
            )
    return layers


def _fpn_layers(stage_channels: Sequence[int], out: int) -> List[LayerDesc]:
    layers = []
    for i, (cin, stride) in enumerate(zip(stage_channels, STRIDES[:4])):
        layers.append(LayerDesc(f"fpn/lateral{i + 2}", "conv", cin, out, kernel=1, bias=True, out_stride=stride))
    for i, stride in enumerate(STRIDES[:4]):
        if i < 3:
            layers.append(LayerDesc(f"fpn/up{i + 2}", "upsample", out, out, out_stride=stride))
            layers.append(LayerDesc(f"fpn/merge{i + 2}", "residual_add", out, out, out_stride=stride))
        layers.append(LayerDesc(f"fpn/smooth{i + 2}", "conv", out, out, bias=True, out_stride=stride))
    layers.append(LayerDesc("fpn/down6", "conv", out, out, stride=2, bias=True, out_stride=64))
    layers.append(LayerDesc("fpn/down7", "conv", out, out, stride=2, bias=True, out_stride=128))
    return layers


def _head_layers(in_channels: int, hidden: int) -> List[LayerDesc]:
    layers = []
    c = in_channels
    for level, stride in zip(LEVELS, STRIDES):
        if hidden > 0:
            layers.append(
                LayerDesc(f"head/hidden/p{level}", "head", c, hidden, bias=True,
                          out_stride=stride, shared_group="head/hidden")
            )
        hc = hidden if hidden > 0 else c
        layers.append(
            LayerDesc(f"head/cls/p{level}", "head", hc, 2, bias=True,
                      out_stride=stride, shared_group="head/cls")
        )
        layers.append(
            LayerDesc(f"head/reg/p{level}", "head", hc, 4, bias=True,
                      out_stride=stride, shared_group="head/reg")
        )
    return layers


def detector_graph(cfg: ModelConfig, with_rfp: bool = True) -> List[LayerDesc]:
    """Layer list matching DetectorModel conv-for-conv."""
    cfg.validate()
    ch = cfg.backbone.stage_channels
    layers = [
        LayerDesc("backbone/stem", "conv", cfg.backbone.in_channels, ch[0], stride=4, bias=True, out_stride=4)
    ]
    for i in range(4):
        stride = STRIDES[i]
        if i > 0:
            layers.append(
                LayerDesc(f"backbone/down{i + 2}", "conv", ch[i - 1], ch[i], stride=2, bias=True, out_stride=stride)
            )
        for j in range(cfg.backbone.blocks_per_stage[i]):
            base = f"backbone/stage{i + 2}/block{j + 1}"
            layers.append(LayerDesc(f"{base}/conv1", "conv", ch[i], ch[i], bias=True, out_stride=stride))
            layers.append(LayerDesc(f"{base}/conv2", "conv", ch[i], ch[i], bias=True, out_stride=stride))
            layers.append(LayerDesc(f"{base}/shortcut", "residual_add", ch[i], ch[i], out_stride=stride))
    layers += _fpn_layers(ch, cfg.fpn_channels)
    if with_rfp:
        for level, stride in zip(LEVELS, STRIDES):
            layers += _rfp_layers(cfg.rfp, level, stride)
    layers += _head_layers(cfg.fpn_channels, cfg.head_hidden)
    return layers


def _resnet50_layers() -> List[LayerDesc]:
    """Declarative ResNet50 body (conv layers only; norm layers carry no MACs here)."""
    layers = [
        LayerDesc("resnet/conv1", "conv", 3, 64, kernel=7, stride=2, out_stride=2),
    ]
    stage_defs = [  # (mid, out, blocks, stride)
        (64, 256, 3, 4),
        (128, 512, 4, 8),
        (256, 1024, 6, 16),
        (512, 2048, 3, 32),
    ]
    cin = 64
    for s, (mid, cout, blocks, stride) in enumerate(stage_defs):
        for b in range(blocks):
            base = f"resnet/stage{s + 2}/block{b + 1}"
            bin_ = cin if b == 0 else cout
            if b == 0:
                layers.append(LayerDesc(f"{base}/down", "conv", bin_, cout, kernel=1, out_stride=stride))
            layers.append(LayerDesc(f"{base}/conv1", "conv", bin_, mid, kernel=1, out_stride=stride))
            layers.append(LayerDesc(f"{base}/conv2", "conv", mid, mid, kernel=3, out_stride=stride))
            layers.append(LayerDesc(f"{base}/conv3", "conv", mid, cout, kernel=1, out_stride=stride))
            layers.append(LayerDesc(f"{base}/shortcut", "residual_add", cout, cout, out_stride=stride))
        cin = cout
    return layers


def paper_scale_graph(
    branches: int = 3,
    share_weights: bool = True,
    fusion: str = "branch_pool",
    inference=ALL_BRANCHES,
    with_rfp: bool = True,
    channels: int = 256,
) -> List[LayerDesc]:
    """Reference-scale detector: ResNet50 + FPN(256) + per-level blocks + bare head."""
    rfp = RfpConfig(
        channels=channels,
        branches=branches,
        dilations=default_dilations(branches),
        share_weights=share_weights,
        fusion=fusion,
        inference=inference,
    ).validate()
    layers = _resnet50_layers()
    layers += _fpn_layers((256, 512, 1024, 2048), channels)
    if with_rfp:
        for level, stride in zip(LEVELS, STRIDES):
            layers += _rfp_layers(rfp, level, stride)
    layers += _head_layers(channels, hidden=0)
    return layers


# ---------------------------------------------------------------------------
# ablation sweeps

PAPER_INPUT_HW = (960, 1024)


def ablation_table(
    axis: str,
    input_hw: Tuple[int, int] = PAPER_INPUT_HW,
    builder: Callable[..., List[LayerDesc]] = paper_scale_graph,
):
    """Rows of (label, params, macs) along one published ablation axis.

    axis 'branches' sweeps 1..4 shared-weight configurations and asserts the
    per-branch MAC increment is one constant; 'sharing' compares shared vs
    unshared weights and asserts equal MACs; 'fusion' compares the three
    fusion operators.
    """
    rows = []
    if axis == "branches":
        base = count_macs(builder(with_rfp=False), input_hw)
        rows.append(("baseline", base.params, base.macs))
        for b in (1, 2, 3, 4):
            rep = count_macs(builder(branches=b), input_hw)
            rows.append((f"{b} branch{'es' if b > 1 else ''}", rep.params, rep.macs))
        params = {r[1] for r in rows[1:]}
        if len(params) != 1:
            raise ConfigError(f"shared-weight params not constant across branch counts: {params}")
        deltas = {rows[i + 1][2] - rows[i][2] for i in range(2, len(rows) - 1)}
        if len(deltas) != 1:
            raise ConfigError(f"per-branch MAC increment not constant: {deltas}")
    elif axis == "sharing":
        base = count_macs(builder(with_rfp=False), input_hw)
        rows.append(("baseline", base.params, base.macs))
        for share in (False, True):
            rep = count_macs(builder(share_weights=share), input_hw)
            rows.append(("w/ sharing" if share else "w/o sharing", rep.params, rep.macs))
        if rows[1][2] != rows[2][2]:
            raise ConfigError("weight sharing must not change MACs")
    elif axis == "fusion":
        for fusion in ("branch_pool", "add", "concat"):
            rep = count_macs(builder(fusion=fusion), input_hw)
            rows.append((fusion, rep.params, rep.macs))
        single = count_macs(builder(inference=2), input_hw)
        rows.append(("branch_pool/single-branch", single.params, single.macs))
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}; use branches, sharing or fusion")
    return rows


def render_table(rows, input_hw) -> str:
    lines = [
        f"input {input_hw[0]}x{input_hw[1]}  (FLOPs = 2 x MACs by convention)",
        f"{'config':<28} {'params':>12} {'params(M)':>10} {'GMACs':>10} {'GFLOPs':>10}",
    ]
    for label, params, macs in rows:
        lines.append(
            f"{label:<28} {params:>12} {params / 1e6:>10.2f} {macs / 1e9:>10.2f} {2 * macs / 1e9:>10.2f}"
        )
    return "\n".join(lines)


def render_csv(rows) -> str:
    lines = ["config,params,macs,flops"]
    for label, params, macs in rows:
        lines.append(f"{label},{params},{macs},{2 * macs}")
    return "\n".join(lines)
