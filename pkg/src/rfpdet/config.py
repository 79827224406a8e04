"""Flat dotted-key experiment configuration.

The config file grammar is one ``key = value`` assignment per line, with
``#`` comments and blank lines ignored. Values are typed by the schema
below: ints, floats, booleans (true/false), comma-separated int tuples,
and a few enumerated strings. Command-line ``--set key=value`` pairs
override file values, which override preset values, which override the
defaults. Unknown keys are rejected by name.

Every run artifact embeds the resolved config (sorted ``key = value``
lines) and the architecture hash: sha256 over the subset of keys that fix
the parameter layout, so checkpoints refuse to load into a different
model. The inference mode is deliberately outside the hash; folding a
checkpoint changes how branches are evaluated, not the weights.
"""

from __future__ import annotations

import hashlib
from typing import Dict, Iterable, List, Optional, Tuple

from .data import SceneSpec
from .errors import ConfigError
from .pyramid import BackboneSpec, ModelConfig
from .rfp import ALL_BRANCHES, RfpConfig

VERSION = "0.1.0"


def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _bool(v: str) -> bool:
    lv = v.strip().lower()
    if lv in ("true", "1", "yes", "on"):
        return True
    if lv in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    return tuple(int(p) for p in str(v).replace("(", "").replace(")", "").split(",") if p.strip())


def _str(v: str) -> str:
    return str(v).strip()


def _fusion(v: str) -> str:
    v = v.strip()
    if v not in ("branch_pool", "add", "concat"):
        raise ValueError(f"fusion must be branch_pool, add or concat, got {v!r}")
    return v


def _inference(v):
    """'all' or 'single:<i>' (a bare integer also reads as single)."""
    s = str(v).strip()
    if s == "all":
        return ALL_BRANCHES
    if s.startswith("single:"):
        return int(s.split(":", 1)[1])
    return int(s)


def _dtype(v: str) -> str:
    s = v.strip()
    if s not in ("float64", "float32"):
        raise ValueError(f"dtype must be float64 or float32, got {s!r}")
    return s


# key -> (default, parser)
SCHEMA: Dict[str, tuple] = {
    "data.image_size": (128, _int),
    "data.channels": (1, _int),
    "data.objects_min": (1, _int),
    "data.objects_max": (4, _int),
    "data.size_min": (8.0, _float),
    "data.size_max": (110.0, _float),
    "data.clutter": (8, _int),
    "data.noise": (0.04, _float),
    "data.seed": (7, _int),
    "data.train_images": (500, _int),
    "data.test_images": (200, _int),
    "data.dir": ("", _str),
    "data.flip": (False, _bool),
    "data.crop_shift": (0, _int),
    "data.disc_clutter": (False, _bool),
    "backbone.stage_channels": ((16, 24, 32, 40), _ints),
    "backbone.blocks": ((1, 1, 1, 1), _ints),
    "fpn.out_channels": (32, _int),
    "fpn.levels": ((2, 3, 4, 5, 6, 7), _ints),
    "rfp.branches": (3, _int),
    "rfp.dilations": ((1, 3, 5), _ints),
    "rfp.share_weights": (True, _bool),
    "rfp.fusion": ("branch_pool", _fusion),
    "rfp.inference": (ALL_BRANCHES, _inference),
    "rfp.use_bias": (False, _bool),
    "rfp.post_relu": (False, _bool),
    "head.hidden_channels": (32, _int),
    "head.pos_iou": (0.35, _float),
    "head.neg_iou": (0.3, _float),
    "head.neg_pos_ratio": (3, _int),
    "head.loss_lambda": (1.0, _float),
    "head.score_thresh": (0.05, _float),
    "head.nms_iou": (0.45, _float),
    "head.topk": (100, _int),
    "train.seed": (1, _int),
    "train.lr": (0.01, _float),
    "train.momentum": (0.9, _float),
    "train.weight_decay": (0.0005, _float),
    "train.steps": (400, _int),
    "train.batch": (8, _int),
    "train.warmup_steps": (50, _int),
    "train.decay_at": (0.85, _float),
    "train.dtype": ("float64", _dtype),
    "train.log_every": (25, _int),
}

# keys that determine the parameter layout (see module docstring)
ARCH_KEYS = (
    "data.channels",
    "backbone.stage_channels",
    "backbone.blocks",
    "fpn.out_channels",
    "rfp.branches",
    "rfp.dilations",
    "rfp.share_weights",
    "rfp.fusion",
    "rfp.use_bias",
    "rfp.post_relu",
    "head.hidden_channels",
)

PRESETS: Dict[str, Dict[str, str]] = {
    "desk": {},
    # small widths for finite-difference work and quick pipeline checks
    "tiny": {
        "backbone.stage_channels": "4,4,4,4",
        "fpn.out_channels": "4",
        "head.hidden_channels": "0",
        "data.train_images": "12",
        "data.test_images": "6",
        "train.steps": "10",
        "train.batch": "2",
    },
    # the configuration the toy-training comparisons run at
    "train-lite": {
        "backbone.stage_channels": "8,12,16,16",
        "fpn.out_channels": "16",
        "head.hidden_channels": "16",
    },
}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


class ExperimentConfig:
    def __init__(self, values: Optional[dict] = None):
        self.values = {k: d for k, (d, _) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key: str, raw) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        _, parser = SCHEMA[key]
        try:
            self.values[key] = raw if not isinstance(raw, str) else parser(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    @classmethod
    def from_sources(
        cls,
        preset: Optional[str] = None,
        path=None,
        overrides: Iterable[Tuple[str, str]] = (),
    ) -> "ExperimentConfig":
        cfg = cls()
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
            for k, v in PRESETS[preset].items():
                cfg.set(k, v)
        if path is not None:
            with open(path) as fh:
                for k, v in parse_config_lines(fh.read().splitlines()):
                    cfg.set(k, v)
        for k, v in overrides:
            cfg.set(k, v)
        return cfg

    def resolved_text(self) -> str:
        lines = [f"{k} = {_format_value(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def arch_hash(self) -> str:
        payload = "\n".join(f"{k} = {_format_value(self.values[k])}" for k in ARCH_KEYS)
        return hashlib.sha256(payload.encode()).hexdigest()

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            image_size=self["data.image_size"],
            channels=self["data.channels"],
            objects_min=self["data.objects_min"],
            objects_max=self["data.objects_max"],
            size_min=self["data.size_min"],
            size_max=self["data.size_max"],
            clutter=self["data.clutter"],
            noise=self["data.noise"],
            seed=self["data.seed"],
            disc_clutter=self["data.disc_clutter"],
        ).validate()

    def rfp_config(self) -> RfpConfig:
        return RfpConfig(
            channels=self["fpn.out_channels"],
            branches=self["rfp.branches"],
            dilations=self["rfp.dilations"],
            share_weights=self["rfp.share_weights"],
            fusion=self["rfp.fusion"],
            inference=self["rfp.inference"],
            use_bias=self["rfp.use_bias"],
            post_relu=self["rfp.post_relu"],
        ).validate()

    def model_config(self) -> ModelConfig:
        if self["fpn.levels"] != (2, 3, 4, 5, 6, 7):
            raise ConfigError("the pyramid is fixed at levels 2..7 in this build")
        return ModelConfig(
            backbone=BackboneSpec(
                stage_channels=self["backbone.stage_channels"],
                blocks_per_stage=self["backbone.blocks"],
                in_channels=self["data.channels"],
            ),
            fpn_channels=self["fpn.out_channels"],
            rfp=self.rfp_config(),
            head_hidden=self["head.hidden_channels"],
            init_seed=self["train.seed"],
        ).validate()

    def artifact_header(self, comment: str = "#") -> str:
        return (
            f"{comment} rfpdet {VERSION}\n"
            f"{comment} arch_hash {self.arch_hash()}\n"
            f"{comment} config_sha {hashlib.sha256(self.resolved_text().encode()).hexdigest()}\n"
        )


def parse_config_lines(lines: Iterable[str]) -> List[Tuple[str, str]]:
    pairs = []
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_overrides(items: Iterable[str]) -> List[Tuple[str, str]]:
    """--set key=value command-line pairs."""
    out = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        k, v = item.split("=", 1)
        out.append((k.strip(), v.strip()))
    return out
