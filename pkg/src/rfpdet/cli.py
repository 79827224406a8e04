"""Command-line entry point.

Verbs: cost, ablate, datagen, train, eval, fold, gradcheck. Configuration
comes from --preset, then --config FILE, then repeated --set key=value
overrides (later sources win). Exit codes: 0 success, 1 check failure,
2 configuration error, 3 contract/invariant violation, 4 I/O error.

Thread count of the underlying BLAS is controlled by the standard
OPENBLAS_NUM_THREADS / OMP_NUM_THREADS environment variables (set them
before launching; all of this package's own code is single-threaded).
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import VERSION, ExperimentConfig, parse_overrides
from .costs import (
    ablation_table,
    count_macs,
    detector_graph,
    paper_scale_graph,
    render_csv,
    render_table,
)
from .errors import ConfigError, ContractError, DataError
from .data import write_dataset
from .gradcheck import check_gradients
from .pipeline import (
    config_from_checkpoint,
    evaluate,
    fold_checkpoint,
    load_model,
    train,
)
from .pyramid import DetectorModel
from .tensor import Tensor, conv2d, mean_n, mul, relu, sum_all, upsample_nearest_2x


def _parse_input_hw(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise ConfigError(f"--input must look like 960x1024, got {text!r}") from exc


def _load_config(args) -> ExperimentConfig:
    return ExperimentConfig.from_sources(
        preset=args.preset,
        path=args.config,
        overrides=parse_overrides(args.set or []),
    )


def cmd_cost(args) -> int:
    cfg = _load_config(args)
    input_hw = _parse_input_hw(args.input)
    if input_hw[0] % 128 or input_hw[1] % 128:
        print(
            f"warning: input {input_hw[0]}x{input_hw[1]} is not a multiple of 128; "
            "grid sizes follow ceil-halving conv arithmetic",
            file=sys.stderr,
        )
    if args.scale == "paper":
        rep = count_macs(paper_scale_graph(), input_hw)
        print(f"paper-scale model at {input_hw[0]}x{input_hw[1]}:")
    else:
        rep = count_macs(detector_graph(cfg.model_config()), input_hw)
        print(f"configured desk model at {input_hw[0]}x{input_hw[1]}:")
    print(
        f"  params {rep.params} ({rep.params / 1e6:.2f}M)  MACs {rep.macs} "
        f"({rep.macs / 1e9:.2f}G)  FLOPs {rep.flops / 1e9:.2f}G  "
        f"elementwise adds {rep.elementwise_adds / 1e6:.2f}M"
    )
    print()
    for axis in ("branches", "sharing", "fusion"):
        rows = ablation_table(axis, input_hw)
        print(f"-- ablation: {axis} --")
        print(render_table(rows, input_hw))
        print()
        if args.csv_dir:
            out = Path(args.csv_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"ablation_{axis}.csv").write_text(
                cfg.artifact_header() + render_csv(rows) + "\n"
            )
    return 0


def cmd_ablate(args) -> int:
    input_hw = _parse_input_hw(args.input)
    axes = ("branches", "sharing", "fusion") if args.axis == "all" else (args.axis,)
    for axis in axes:
        print(render_table(ablation_table(axis, input_hw), input_hw))
        print()
    return 0


def cmd_datagen(args) -> int:
    cfg = _load_config(args)
    n = cfg["data.train_images"] + cfg["data.test_images"]
    write_dataset(args.out, cfg.scene_spec(), n)
    print(f"wrote {n} images to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ckpt = train(cfg, args.out, resume=args.resume)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = config_from_checkpoint(args.checkpoint)
    for k, v in parse_overrides(args.set or []):
        cfg.set(k, v)
    model = load_model(cfg, args.checkpoint)
    if args.force_branch is not None:
        print(
            f"warning: forcing single-branch {args.force_branch} evaluation on "
            f"{cfg['rfp.fusion']} fusion (ablation mode)",
            file=sys.stderr,
        )
    ap, _, dets = evaluate(cfg, model, out_dir=args.out, force_branch=args.force_branch)
    print(f"AP@0.5 {ap:.4f} over {len(dets)} detections")
    return 0


def cmd_fold(args) -> int:
    fold_checkpoint(args.checkpoint, args.out, branch_index=args.branch)
    before = config_from_checkpoint(args.checkpoint)
    folded = config_from_checkpoint(args.out)
    full = count_macs(detector_graph(before.model_config()), (before["data.image_size"],) * 2)
    one = count_macs(detector_graph(folded.model_config()), (folded["data.image_size"],) * 2)
    print(f"folded to branch {args.branch}: {args.out}")
    print(f"per-image MACs {full.macs} -> {one.macs} (x{one.macs / full.macs:.3f})")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    failures = []

    def report(family: str, err: float, tol: float):
        status = "ok" if err < tol else "FAIL"
        print(f"{family:<28} max-rel-err {err:.3e}  tolerance {tol:.0e}  {status}")
        if err >= tol:
            failures.append(family)

    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    report("conv2d(dilated)", check_gradients(
        lambda: sum_all(conv2d(x, w, padding=3, dilation=3)), [x, w]), 1e-6)
    report("elementwise+mean", check_gradients(
        lambda: sum_all(mul(mean_n([relu(x + 3.0), x, x]), x)), [x]), 1e-6)
    report("upsample_nearest_2x", check_gradients(
        lambda: sum_all(mul(upsample_nearest_2x(x), upsample_nearest_2x(x))), [x]), 1e-6)

    model = DetectorModel(cfg.model_config())
    img = Tensor(rng.normal(size=(1, cfg["data.channels"], 16, 16)), requires_grad=True)
    readout = [Tensor(rng.normal(size=(1, cfg["fpn.out_channels"], s, s))) for s in (4, 2, 1, 1, 1, 1)]

    def full_model():
        feats = model.pyramid_features(img)
        total = None
        for f, r in zip(feats, readout):
            term = sum_all(mul(f, r))
            total = term if total is None else total + term
        return total

    wrt = [img, model.backbone.stem.weight.tensor, model.rfp_params[0].branch_weights[0].tensor]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report("backbone+fpn+rfp(16x16)", check_gradients(full_model, wrt), 1e-5)

    if failures:
        print(f"gradcheck FAILED: {', '.join(failures)}")
        return 1
    print("gradcheck passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfpdet",
        description="multi-dilation receptive-field pyramid detector tools",
    )
    parser.add_argument("--version", action="version", version=f"rfpdet {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file (key = value lines)")
        p.add_argument("--preset", help="named preset (desk, tiny, train-lite)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("cost", help="parameter/MAC tables and ablation sweeps")
    common(p)
    p.add_argument("--input", default="960x1024", help="input size HxW")
    p.add_argument("--scale", choices=("paper", "desk"), default="paper")
    p.add_argument("--csv-dir", help="also write ablation CSVs here")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("ablate", help="print one or all cost ablation tables")
    p.add_argument("--axis", choices=("branches", "sharing", "fusion", "all"), default="all")
    p.add_argument("--input", default="960x1024")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("datagen", help="render the synthetic dataset to disk")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train a detector")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (AP@0.5, PR CSV)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="directory for pr.csv / metrics.txt / detections.txt")
    p.add_argument("--force-branch", type=int, help="ablation: evaluate one branch only")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override non-architecture keys from the checkpoint config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fold", help="rewrite a checkpoint for single-branch inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--branch", type=int, default=2)
    p.set_defaults(func=cmd_fold)

    p = sub.add_parser("gradcheck", help="finite-difference checks, per op family")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
