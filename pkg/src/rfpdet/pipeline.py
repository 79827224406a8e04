"""Training and evaluation drivers behind the CLI.

Training is seed-deterministic end to end: model init, data order and
augmentation draws all come from the configured seeds, and every array op
underneath is ordered, so two runs of the same config produce bit-identical
checkpoints and metrics. The train/test split is by image index into one
generated universe: images [0, n_train) train, [n_train, n_train+n_test)
evaluate, which keeps the two sets disjoint under a single data seed.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import generate_image, load_dataset
from .errors import ConfigError, DataError
from .head import (
    Detection,
    GroundTruthBox,
    MatchResult,
    decode_boxes,
    detection_loss,
    evaluate_ap,
    generate_anchors,
    match_anchors,
    nms,
    select_training_sample,
)
from .pyramid import DetectorModel, PyramidSpec
from .tensor import Tensor


def _to_float(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float64) / 255.0


def _flip_image(img: np.ndarray, boxes: List[GroundTruthBox], width: int):
    flipped = img[:, :, ::-1].copy()
    fboxes = [GroundTruthBox(width - b.x - b.w, b.y, b.w, b.h, b.image_id) for b in boxes]
    return flipped, fboxes


def _shift_image(img: np.ndarray, boxes: List[GroundTruthBox], dx: int, dy: int):
    """Translate with zero fill; boxes clip to the frame, dropped if the
    center leaves it."""
    c, h, w = img.shape
    out = np.zeros_like(img)
    src_x0, dst_x0 = max(0, -dx), max(0, dx)
    src_y0, dst_y0 = max(0, -dy), max(0, dy)
    cw, ch = w - abs(dx), h - abs(dy)
    out[:, dst_y0:dst_y0 + ch, dst_x0:dst_x0 + cw] = img[:, src_y0:src_y0 + ch, src_x0:src_x0 + cw]
    moved = []
    for b in boxes:
        x, y = b.x + dx, b.y + dy
        cx, cy = x + b.w / 2, y + b.h / 2
        if not (0 <= cx < w and 0 <= cy < h):
            continue
        x0, y0 = max(0.0, x), max(0.0, y)
        x1, y1 = min(float(w), x + b.w), min(float(h), y + b.h)
        if x1 - x0 > 1 and y1 - y0 > 1:
            moved.append(GroundTruthBox(x0, y0, x1 - x0, y1 - y0, b.image_id))
    return out, moved


class DataSource:
    """Synthesized scenes by index, or an on-disk dataset directory.

    Scenes render once per index and stay cached (a 128px grayscale image
    is 16 KB, so whole splits fit comfortably in memory).
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.from_dir = bool(cfg["data.dir"])
        self._cache: Dict[int, Tuple[np.ndarray, List[GroundTruthBox]]] = {}
        if self.from_dir:
            self.images, self.annotations = load_dataset(cfg["data.dir"])
            needed = cfg["data.train_images"] + cfg["data.test_images"]
            if len(self.images) < needed:
                raise DataError(
                    f"dataset at {cfg['data.dir']} has {len(self.images)} images, config needs {needed}"
                )
        else:
            self.spec = cfg.scene_spec()

    def image(self, index: int) -> Tuple[np.ndarray, List[GroundTruthBox]]:
        if index not in self._cache:
            if self.from_dir:
                boxes = [
                    GroundTruthBox(b.x, b.y, b.w, b.h, image_id=index)
                    for b in self.annotations[index]
                ]
                self._cache[index] = (self.images[index], boxes)
            else:
                self._cache[index] = generate_image(self.spec, index)
        return self._cache[index]

    def train_indices(self) -> range:
        return range(self.cfg["data.train_images"])

    def test_indices(self) -> range:
        n = self.cfg["data.train_images"]
        return range(n, n + self.cfg["data.test_images"])


def _batched_match(per_image_matches: Sequence[MatchResult]) -> MatchResult:
    """Stack per-image matches into one row space.

    The loss only reads the sign of the label and the regression targets,
    so per-image ground-truth indices can ride along unchanged.
    """
    return MatchResult(
        np.concatenate([m.labels for m in per_image_matches]),
        np.concatenate([m.regression_targets for m in per_image_matches]),
    )


def train(cfg: ExperimentConfig, out_dir, resume: Optional[str] = None) -> Path:
    """Run the configured optimization; returns the checkpoint path."""
    T.set_default_dtype(cfg["train.dtype"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = DataSource(cfg)
    model = DetectorModel(cfg.model_config())
    if resume is not None:
        _, arch, arrays = load_checkpoint(resume)
        _require_arch(cfg, arch, resume)
        _load_model_and_velocity(model, arrays)

    size = cfg["data.image_size"]
    anchors = generate_anchors(PyramidSpec(out_channels=cfg["fpn.out_channels"]), (size, size))
    params = model.parameters()
    rng = np.random.default_rng(cfg["train.seed"])
    train_ids = np.array(source.train_indices())
    batch = cfg["train.batch"]
    log_lines = cfg.artifact_header().splitlines()
    log_lines += ["# " + line for line in cfg.resolved_text().splitlines()]

    order = rng.permutation(train_ids)
    cursor = 0
    augmented = cfg["data.flip"] or cfg["data.crop_shift"] > 0
    match_cache: Dict[int, MatchResult] = {}
    for step in range(1, cfg["train.steps"] + 1):
        if cursor + batch > len(order):
            order = rng.permutation(train_ids)
            cursor = 0
        ids = order[cursor:cursor + batch]
        cursor += batch

        imgs, matches = [], []
        for idx in ids:
            idx = int(idx)
            img_u8, boxes = source.image(idx)
            img = _to_float(img_u8)
            if cfg["data.flip"] and rng.integers(0, 2):
                img, boxes = _flip_image(img, boxes, size)
            shift = cfg["data.crop_shift"]
            if shift:
                dx, dy = rng.integers(-shift, shift + 1, size=2)
                img, boxes = _shift_image(img, boxes, int(dx), int(dy))
            imgs.append(img)
            if augmented:
                match = match_anchors(anchors, boxes, cfg["head.pos_iou"], cfg["head.neg_iou"])
            else:
                if idx not in match_cache:
                    match_cache[idx] = match_anchors(
                        anchors, boxes, cfg["head.pos_iou"], cfg["head.neg_iou"]
                    )
                match = match_cache[idx]
            matches.append(match)

        x = Tensor(np.stack(imgs))
        cls_rows, reg_rows, per_image = model.flat_predictions(x)
        combined = _batched_match(matches)
        face_score = cls_rows.data[:, 1] - cls_rows.data[:, 0]
        samples = []
        for bi, m in enumerate(matches):
            local = select_training_sample(
                m, face_score[bi * per_image:(bi + 1) * per_image], cfg["head.neg_pos_ratio"]
            )
            samples.append(local + bi * per_image)
        loss = detection_loss(
            cls_rows,
            reg_rows,
            combined,
            loss_lambda=cfg["head.loss_lambda"],
            sample=np.concatenate(samples),
        )
        loss.backward()
        T.sgd_step(
            params, _lr_at(cfg, step), cfg["train.momentum"], cfg["train.weight_decay"]
        )

        if step % cfg["train.log_every"] == 0 or step == cfg["train.steps"]:
            n_pos = int((combined.labels >= 0).sum())
            # no wall-clock fields: identical runs must produce identical logs
            log_lines.append(f"step {step} loss {loss.item():.6f} positives {n_pos}")

    ckpt = out / "checkpoint.rfpc"
    arrays = model.state_arrays()
    for p in params:
        if p.velocity is not None:
            arrays[f"opt/{p.name}"] = p.velocity.copy()
    save_checkpoint(ckpt, arrays, cfg.resolved_text(), cfg.arch_hash())
    (out / "train_log.txt").write_text("\n".join(log_lines) + "\n")
    return ckpt


def _lr_at(cfg: ExperimentConfig, step: int) -> float:
    """Linear warmup from lr/10, then flat, then one 10x decay near the end."""
    lr = cfg["train.lr"]
    warmup = cfg["train.warmup_steps"]
    if warmup > 0 and step <= warmup:
        lr *= 0.1 + 0.9 * step / warmup
    decay_at = cfg["train.decay_at"]
    if 0 < decay_at <= 1 and step > decay_at * cfg["train.steps"]:
        lr *= 0.1
    return lr


def _load_model_and_velocity(model: DetectorModel, arrays: Dict[str, np.ndarray]) -> None:
    model.load_arrays({k: v for k, v in arrays.items() if not k.startswith("opt/")})
    for p in model.parameters():
        key = f"opt/{p.name}"
        if key in arrays:
            p.velocity = arrays[key].astype(p.tensor.data.dtype, copy=True)


def _require_arch(cfg: ExperimentConfig, ckpt_hash: str, path) -> None:
    if ckpt_hash != cfg.arch_hash():
        raise ConfigError(
            f"architecture mismatch: checkpoint {path} was written for arch {ckpt_hash}, "
            f"current config is {cfg.arch_hash()}"
        )


def load_model(cfg: ExperimentConfig, checkpoint_path) -> DetectorModel:
    T.set_default_dtype(cfg["train.dtype"])
    _, arch, arrays = load_checkpoint(checkpoint_path)
    _require_arch(cfg, arch, checkpoint_path)
    model = DetectorModel(cfg.model_config())
    _load_model_and_velocity(model, arrays)
    return model


def config_from_checkpoint(checkpoint_path) -> ExperimentConfig:
    text, _, _ = load_checkpoint(checkpoint_path)
    from .config import parse_config_lines

    cfg = ExperimentConfig()
    for k, v in parse_config_lines(text.splitlines()):
        cfg.set(k, v)
    return cfg


def _stable_face_prob(logits: np.ndarray) -> np.ndarray:
    z = np.clip(logits[:, 1] - logits[:, 0], -500, 500)
    return 1.0 / (1.0 + np.exp(-z))


def detect(
    model: DetectorModel,
    cfg: ExperimentConfig,
    images: List[np.ndarray],
    image_ids: List[int],
    force_branch: Optional[int] = None,
) -> List[Detection]:
    """Decode, threshold, top-k and suppress; detections carry image ids."""
    size = cfg["data.image_size"]
    anchors = generate_anchors(PyramidSpec(out_channels=cfg["fpn.out_channels"]), (size, size))
    out: List[Detection] = []
    batch = max(1, cfg["train.batch"])
    with T.no_grad():
        for start in range(0, len(images), batch):
            chunk = images[start:start + batch]
            ids = image_ids[start:start + batch]
            x = Tensor(np.stack([_to_float(i) for i in chunk]))
            cls_rows, reg_rows, per_image = model.flat_predictions(x, force_branch=force_branch)
            probs = _stable_face_prob(cls_rows.data)
            deltas = reg_rows.data
            for bi, img_id in enumerate(ids):
                sl = slice(bi * per_image, (bi + 1) * per_image)
                p = probs[sl]
                keep = np.flatnonzero(p >= cfg["head.score_thresh"])
                if keep.size > cfg["head.topk"]:
                    keep = keep[np.argsort(-p[keep], kind="stable")[: cfg["head.topk"]]]
                boxes = decode_boxes(
                    anchors.cx[keep], anchors.cy[keep], anchors.w[keep], anchors.h[keep],
                    deltas[sl][keep],
                )
                cands = []
                for (bx, by, bw, bh), score in zip(boxes, p[keep]):
                    x0, y0 = max(0.0, bx), max(0.0, by)
                    x1, y1 = min(float(size), bx + bw), min(float(size), by + bh)
                    if x1 - x0 > 0 and y1 - y0 > 0:
                        cands.append(Detection(x0, y0, x1 - x0, y1 - y0, float(score), img_id))
                out.extend(nms(cands, cfg["head.nms_iou"]))
    return out


def evaluate(
    cfg: ExperimentConfig,
    model: DetectorModel,
    out_dir=None,
    force_branch: Optional[int] = None,
):
    """AP@0.5 on the test split; optionally writes pr.csv / metrics / detections."""
    source = DataSource(cfg)
    images, gts, ids = [], [], []
    for idx in source.test_indices():
        img, boxes = source.image(int(idx))
        images.append(img)
        gts.extend(boxes)
        ids.append(int(idx))
    dets = detect(model, cfg, images, ids, force_branch=force_branch)
    ap, curve = evaluate_ap(dets, gts, iou_thresh=0.5)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = cfg.artifact_header()
        with open(out / "pr.csv", "w") as fh:
            fh.write(header)
        with open(out / "pr.csv", "a") as fh:
            fh.write("recall,precision\n")
            for r, p in curve:
                fh.write(f"{r:.9f},{p:.9f}\n")
        metrics = header + f"ap50 {ap:.9f}\ndetections {len(dets)}\nground_truths {len(gts)}\n"
        (out / "metrics.txt").write_text(metrics)
        by_image: Dict[str, List[Detection]] = {}
        for d in sorted(dets, key=lambda d: (d.image_id, -d.score, d.x, d.y)):
            by_image.setdefault(f"images/img_{d.image_id:05d}", []).append(d)
        from .data import write_detections

        write_detections(by_image, out / "detections.txt")
    return ap, curve, dets


def fold_checkpoint(checkpoint_in, checkpoint_out, branch_index: int = 2) -> None:
    """Rewrite a branch-pool checkpoint for single-branch inference."""
    cfg = config_from_checkpoint(checkpoint_in)
    if cfg["rfp.fusion"] != "branch_pool":
        raise ConfigError(
            f"refusing to fold a {cfg['rfp.fusion']}-fusion checkpoint: single-branch "
            "inference only preserves accuracy under branch pooling"
        )
    if not 1 <= branch_index <= cfg["rfp.branches"]:
        raise ConfigError(f"fold branch {branch_index} out of range 1..{cfg['rfp.branches']}")
    text, arch, arrays = load_checkpoint(checkpoint_in)
    cfg.set("rfp.inference", f"single:{branch_index}")
    weights = {k: v for k, v in arrays.items() if not k.startswith("opt/")}
    save_checkpoint(checkpoint_out, weights, cfg.resolved_text(), arch)
