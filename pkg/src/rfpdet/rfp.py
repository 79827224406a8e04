"""Multi-dilation convolution block with shared weights and branch pooling.

Each branch applies the same 3x3 kernel at its own dilation rate, keeps the
input on a shortcut, and the branches are fused by averaging (branch
pooling), summing, or channel concatenation + 1x1 projection. Branch
pooling is the mode that stays valid when only one branch is evaluated at
inference time; the other two fusions are kept as ablation axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .errors import ConfigError
from .tensor import Parameter, Tensor, add, concat, conv2d, mean_n, relu

FUSION_MODES = ("branch_pool", "add", "concat")
KERNEL = 3  # branch kernel size is fixed

#: Inference over every branch (the training-time configuration).
ALL_BRANCHES = "all"


def default_dilations(branches: int) -> tuple:
    """Dilation schedule 1, 3, 5, 7, ... (odd arithmetic progression)."""
    if branches < 1:
        raise ConfigError("branch count must be >= 1")
    return tuple(2 * i + 1 for i in range(branches))


@dataclass(frozen=True)
class RfpConfig:
    channels: int
    branches: int = 3
    dilations: tuple = (1, 3, 5)
    share_weights: bool = True
    fusion: str = "branch_pool"
    inference: object = ALL_BRANCHES  # ALL_BRANCHES or a 1-based branch index
    use_bias: bool = False
    post_relu: bool = False

    def validate(self) -> "RfpConfig":
        if self.channels < 1:
            raise ConfigError("rfp channels must be >= 1")
        if self.branches < 1:
            raise ConfigError("rfp branches must be >= 1")
        if len(self.dilations) != self.branches:
            raise ConfigError(
                f"rfp dilations {self.dilations} does not match branch count {self.branches}"
            )
        if any(d < 1 for d in self.dilations):
            raise ConfigError("rfp dilation rates must be >= 1")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"rfp fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.inference != ALL_BRANCHES:
            i = self.inference
            if not isinstance(i, int) or not 1 <= i <= self.branches:
                raise ConfigError(f"rfp inference branch index {i!r} out of range 1..{self.branches}")
            if self.fusion != "branch_pool":
                raise ConfigError(
                    "single-branch inference is only valid with branch_pool fusion; "
                    f"{self.fusion} fusion does not survive dropping the fusion operator"
                )
        return self


@dataclass
class RfpParams:
    """Weights for one block: one shared kernel or one per branch."""

    branch_weights: List[Parameter]
    biases: List[Parameter] = field(default_factory=list)
    concat_proj: Optional[Parameter] = None

    def parameters(self) -> List[Parameter]:
        out = list(self.branch_weights) + list(self.biases)
        if self.concat_proj is not None:
            out.append(self.concat_proj)
        return out


def init_rfp_params(cfg: RfpConfig, rng: np.random.Generator, prefix: str = "rfp") -> RfpParams:
    cfg.validate()
    c, k = cfg.channels, KERNEL
    std = np.sqrt(2.0 / (c * k * k))
    n_kernels = 1 if cfg.share_weights else cfg.branches
    weights = []
    for i in range(n_kernels):
        name = f"{prefix}/weight" if cfg.share_weights else f"{prefix}/branch{i + 1}/weight"
        p = Parameter(name, rng.normal(scale=std, size=(c, c, k, k)))
        if cfg.share_weights:
            p.shared_ref_count = cfg.branches
        weights.append(p)
    biases = []
    if cfg.use_bias:
        for i in range(n_kernels):
            name = f"{prefix}/bias" if cfg.share_weights else f"{prefix}/branch{i + 1}/bias"
            b = Parameter(name, np.zeros(c))
            if cfg.share_weights:
                b.shared_ref_count = cfg.branches
            biases.append(b)
    proj = None
    if cfg.fusion == "concat":
        proj = Parameter(
            f"{prefix}/concat_proj",
            rng.normal(scale=np.sqrt(2.0 / (cfg.branches * c)), size=(c, cfg.branches * c, 1, 1)),
        )
    return RfpParams(weights, biases, proj)


def _branch(x: Tensor, cfg: RfpConfig, p: RfpParams, i: int) -> Tensor:
    """y_i = dilated_conv(x) + x for 1-based branch index i."""
    d = cfg.dilations[i - 1]
    w = p.branch_weights[0] if cfg.share_weights else p.branch_weights[i - 1]
    b = None
    if cfg.use_bias:
        b = p.biases[0] if cfg.share_weights else p.biases[i - 1]
    y = conv2d(x, w.tensor, b.tensor if b is not None else None, stride=1, padding=d, dilation=d)
    return add(y, x)


def rfp_forward(x: Tensor, cfg: RfpConfig, p: RfpParams, force_branch: Optional[int] = None) -> Tensor:
    """Run the block; output shape always equals input shape.

    ``force_branch`` evaluates a single branch regardless of the configured
    inference mode. It exists for the fusion-ablation study: add-fusion
    single-branch output is well defined but degraded, while concat fusion
    cannot produce predictions from one branch at all (the projection
    expects all of them) and is rejected.
    """
    cfg.validate()
    if x.shape[1] != cfg.channels:
        raise ConfigError(f"rfp input has {x.shape[1]} channels, config says {cfg.channels}")

    branch = force_branch if force_branch is not None else (
        cfg.inference if cfg.inference != ALL_BRANCHES else None
    )
    if branch is not None:
        if not 1 <= branch <= cfg.branches:
            raise ConfigError(f"branch index {branch} out of range 1..{cfg.branches}")
        if cfg.fusion == "concat":
            raise ConfigError("concat fusion cannot produce predictions from a single branch")
        return _maybe_relu(_branch(x, cfg, p, branch), cfg)

    ys = [_branch(x, cfg, p, i) for i in range(1, cfg.branches + 1)]
    if cfg.fusion == "branch_pool":
        out = mean_n(ys)
    elif cfg.fusion == "add":
        out = ys[0]
        for y in ys[1:]:
            out = add(out, y)
    else:  # concat
        stacked = concat(ys, axis=1)
        out = conv2d(stacked, p.concat_proj.tensor, stride=1, padding=0)
    return _maybe_relu(out, cfg)


def _maybe_relu(y: Tensor, cfg: RfpConfig) -> Tensor:
    return relu(y) if cfg.post_relu else y


def fold_for_inference(cfg: RfpConfig, branch_index: int = 2) -> RfpConfig:
    """Switch a trained branch-pool block to single-branch evaluation.

    Defaults to the middle dilation (branch 2, d=3 under the default
    schedule). Parameters are untouched; only the inference mode changes,
    so one forward afterwards costs the same as a one-branch block.
    """
    if cfg.fusion != "branch_pool":
        raise ConfigError(
            f"cannot fold {cfg.fusion}-fusion blocks to a single branch: only branch pooling "
            "balances the branches enough to drop the fusion operator at inference"
        )
    if not 1 <= branch_index <= cfg.branches:
        raise ConfigError(f"fold branch index {branch_index} out of range 1..{cfg.branches}")
    return replace(cfg, inference=branch_index).validate()


def rfp_param_count(cfg: RfpConfig) -> int:
    """Parameter count of one block, straight arithmetic."""
    cfg.validate()
    c, k = cfg.channels, KERNEL
    per_kernel = c * c * k * k + (c if cfg.use_bias else 0)
    count = per_kernel if cfg.share_weights else per_kernel * cfg.branches
    if cfg.fusion == "concat":
        count += cfg.branches * c * c  # 1x1 projection, no bias
    return count
