"""Deterministic synthetic detection scenes plus annotation file I/O.

Scenes are grayscale by default: a flat noisy background, rectangle/line
clutter, and "faces" drawn as two-tone discs with two dark eye dots, sized
log-uniformly so every pyramid level sees matches. Image index i of seed s
draws from SeedSequence(entropy=s, spawn_key=(i,)), so generation order or
parallelism cannot change the output: the same spec is bit-identical on
disk every time.

Images are stored as binary PGM (P5, maxval 255) or PPM (P6) with a CSV
sidecar ``annotations.csv`` of rows ``image,index,x,y,w,h`` (coordinates in
pixels, three decimals). The reader/writer pair at the bottom speaks the
annotation format used by the public face-detection benchmarks: an image
path line, a count line, then per-box "x y w h ..." lines (a zero count is
followed by one placeholder line).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .head import Detection, GroundTruthBox

ANCHOR_SIDES = (16, 32, 64, 128, 256, 512)
FACE_TONE_TOP = 0.92
FACE_TONE_BOTTOM = 0.72
EYE_TONE = 0.05


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 128
    channels: int = 1
    objects_min: int = 1
    objects_max: int = 4
    size_min: float = 8.0
    size_max: float = 110.0
    clutter: int = 8
    noise: float = 0.04
    seed: int = 7
    # adds eyeless two-tone discs to the clutter mix: faces then differ from
    # decoys only by the eye dots, which only a wide receptive field can
    # verify in context for anything but tiny objects
    disc_clutter: bool = False

    def validate(self) -> "SceneSpec":
        if self.image_size % 128:
            raise ConfigError("scene image_size must be a multiple of 128")
        if self.channels not in (1, 3):
            raise ConfigError("scenes are 1-channel (PGM) or 3-channel (PPM)")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ConfigError("need 1 <= objects_min <= objects_max")
        if not 2.0 <= self.size_min < self.size_max:
            raise ConfigError("object sizes must satisfy 2 <= min < max")
        if self.size_max > self.image_size - 2:
            raise ConfigError(
                f"size_max {self.size_max} cannot fit inside a {self.image_size}px image"
            )
        covered = sum(1 for side in ANCHOR_SIDES if self.size_min <= side <= self.size_max)
        if covered < 3:
            raise ConfigError(
                f"size range [{self.size_min}, {self.size_max}] spans {covered} anchor scales; need >= 3"
            )
        return self


def _image_rng(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(index,)))


def _draw_disc_face(
    img: np.ndarray,
    cx: float,
    cy: float,
    size: float,
    eyes: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> None:
    """Two-tone disc with eye dots; tones and eye geometry jitter per face.

    The jitter keeps single-template shortcut solutions off the table: the
    detector has to learn the shape/eye structure, not one pixel pattern.
    """
    r = size / 2.0
    h, w = img.shape[-2:]
    if rng is None:
        top_tone, bottom_tone, eye_tone = FACE_TONE_TOP, FACE_TONE_BOTTOM, EYE_TONE
        eye_dx, eye_dy, eye_scale = 0.3, -0.15, 0.12
    else:
        top_tone = FACE_TONE_TOP + rng.uniform(-0.08, 0.06)
        bottom_tone = FACE_TONE_BOTTOM + rng.uniform(-0.08, 0.08)
        eye_tone = EYE_TONE + rng.uniform(0.0, 0.1)
        eye_dx = rng.uniform(0.24, 0.34)
        eye_dy = -rng.uniform(0.1, 0.22)
        eye_scale = rng.uniform(0.10, 0.14)
    yy, xx = np.mgrid[0:h, 0:w]
    dist2 = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2
    disc = dist2 <= r * r
    top = disc & (yy + 0.5 < cy)
    img[..., disc] = bottom_tone
    img[..., top] = top_tone
    if not eyes:
        return
    eye_r = max(0.6, eye_scale * size)
    for ex in (cx - eye_dx * size, cx + eye_dx * size):
        ey = cy + eye_dy * size
        eye = (yy + 0.5 - ey) ** 2 + (xx + 0.5 - ex) ** 2 <= eye_r * eye_r
        img[..., eye & disc] = eye_tone


def _draw_clutter(img: np.ndarray, rng: np.random.Generator, n: int) -> None:
    h, w = img.shape[-2:]
    for _ in range(n):
        tone = float(rng.uniform(0.0, 1.0))
        kind = rng.integers(0, 3)
        if kind == 0:  # filled rectangle
            x0, y0 = rng.integers(0, w - 4), rng.integers(0, h - 4)
            bw, bh = rng.integers(3, max(4, w // 4)), rng.integers(3, max(4, h // 4))
            img[..., y0:y0 + bh, x0:x0 + bw] = tone
        elif kind == 1:  # rectangle outline
            x0, y0 = rng.integers(0, w - 6), rng.integers(0, h - 6)
            bw, bh = rng.integers(5, max(6, w // 3)), rng.integers(5, max(6, h // 3))
            x1, y1 = min(w, x0 + bw), min(h, y0 + bh)
            img[..., y0:y1, x0], img[..., y0:y1, x1 - 1] = tone, tone
            img[..., y0, x0:x1], img[..., y1 - 1, x0:x1] = tone, tone
        else:  # line segment
            x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
            ang = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(6, w / 2)
            steps = int(length * 2)
            xs = np.clip((x0 + np.cos(ang) * np.linspace(0, length, steps)).astype(int), 0, w - 1)
            ys = np.clip((y0 + np.sin(ang) * np.linspace(0, length, steps)).astype(int), 0, h - 1)
            img[..., ys, xs] = tone


def generate_image(spec: SceneSpec, index: int) -> Tuple[np.ndarray, List[GroundTruthBox]]:
    """One rendered scene (uint8, channels x H x W) and its tight boxes."""
    rng = _image_rng(spec, index)
    side = spec.image_size
    img = np.full((spec.channels, side, side), 0.25)
    img += rng.normal(scale=spec.noise, size=(1, side, side))
    _draw_clutter(img, rng, int(rng.integers(0, spec.clutter + 1)))

    def place(occupied):
        size = float(np.exp(rng.uniform(np.log(spec.size_min), np.log(spec.size_max))))
        r = size / 2.0
        cand = None
        for _attempt in range(10):
            cx = float(rng.uniform(r + 1, side - r - 1))
            cy = float(rng.uniform(r + 1, side - r - 1))
            cand = GroundTruthBox(cx - r, cy - r, size, size, image_id=index)
            if all(_box_overlap(cand, b) < 0.25 for b in occupied):
                break
        return cand, size

    boxes: List[GroundTruthBox] = []
    decoys: List[GroundTruthBox] = []
    if spec.disc_clutter:
        for _ in range(int(rng.integers(spec.objects_min, spec.objects_max + 1))):
            decoy, size = place(decoys)
            _draw_disc_face(img, decoy.x + size / 2, decoy.y + size / 2, size, eyes=False, rng=rng)
            decoys.append(decoy)
    n_obj = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    for _ in range(n_obj):
        placed, size = place(boxes + decoys)
        _draw_disc_face(img, placed.x + size / 2, placed.y + size / 2, size, rng=rng)
        boxes.append(placed)

    quantized = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return quantized, boxes


def _box_overlap(a: GroundTruthBox, b: GroundTruthBox) -> float:
    iw = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    ih = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union else 0.0


def generate_dataset(spec: SceneSpec, n_images: int):
    """All images and boxes for one spec, in index order."""
    spec.validate()
    images, annotations = [], []
    for i in range(n_images):
        img, boxes = generate_image(spec, i)
        images.append(img)
        annotations.append(boxes)
    return images, annotations


# ---------------------------------------------------------------------------
# portable graymap/pixmap files


def write_netpbm(path, img: np.ndarray) -> None:
    """P5 for single-channel (C=1), P6 for RGB; maxval 255, binary payload."""
    c, h, w = img.shape
    if img.dtype != np.uint8:
        raise DataError(f"netpbm writer expects uint8, got {img.dtype}")
    with open(path, "wb") as fh:
        if c == 1:
            fh.write(f"P5\n{w} {h}\n255\n".encode())
            fh.write(img[0].tobytes())
        elif c == 3:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(np.moveaxis(img, 0, 2).tobytes())
        else:
            raise DataError(f"cannot store {c}-channel image as netpbm")


def read_netpbm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, rest = blob.split(b"\n", 1)
        dims, rest = rest.split(b"\n", 1)
        maxval, payload = rest.split(b"\n", 1)
        w, h = map(int, dims.split())
    except ValueError as exc:
        raise DataError(f"{path}: malformed netpbm header") from exc
    if int(maxval) != 255:
        raise DataError(f"{path}: only maxval 255 is supported")
    if magic == b"P5":
        return np.frombuffer(payload[: h * w], dtype=np.uint8).reshape(1, h, w).copy()
    if magic == b"P6":
        arr = np.frombuffer(payload[: h * w * 3], dtype=np.uint8).reshape(h, w, 3)
        return np.moveaxis(arr, 2, 0).copy()
    raise DataError(f"{path}: unsupported magic {magic!r}")


def write_dataset(out_dir, spec: SceneSpec, n_images: int) -> None:
    """Render to disk: images/, annotations.csv, dataset.json."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ext = "pgm" if spec.channels == 1 else "ppm"
    rows = ["image,index,x,y,w,h"]
    for i in range(n_images):
        img, boxes = generate_image(spec, i)
        name = f"images/img_{i:05d}.{ext}"
        write_netpbm(out / name, img)
        for bi, b in enumerate(boxes):
            rows.append(f"{name},{bi},{b.x:.3f},{b.y:.3f},{b.w:.3f},{b.h:.3f}")
    (out / "annotations.csv").write_text("\n".join(rows) + "\n")
    meta = {"spec": asdict(spec), "n_images": n_images, "format": 1}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(in_dir):
    """Inverse of write_dataset; returns (images, annotations)."""
    root = Path(in_dir)
    lines = (root / "annotations.csv").read_text().splitlines()
    if not lines or lines[0] != "image,index,x,y,w,h":
        raise DataError(f"{root}/annotations.csv: missing header row", line=1)
    by_image: Dict[str, List[GroundTruthBox]] = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataError(f"{root}/annotations.csv: expected 6 fields", line=ln)
        name = parts[0]
        x, y, w, h = map(float, parts[2:])
        by_image.setdefault(name, []).append(GroundTruthBox(x, y, w, h))
    names = sorted(by_image)
    images, annotations = [], []
    for idx, name in enumerate(names):
        arr = read_netpbm(root / name)
        images.append(arr)
        boxes = [
            GroundTruthBox(b.x, b.y, b.w, b.h, image_id=idx) for b in by_image[name]
        ]
        annotations.append(boxes)
    return images, annotations


# ---------------------------------------------------------------------------
# benchmark-style annotation files


def read_widerface_annotations(path) -> Dict[str, List[GroundTruthBox]]:
    """Parse "path / count / x y w h ..." blocks into boxes per image.

    Trailing attribute columns are ignored. A count of 0 is followed by one
    placeholder box line (the distributed files do this); zero-sized boxes
    are dropped with a single summary warning.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    out: Dict[str, List[GroundTruthBox]] = {}
    skipped = 0
    i = 0
    while i < len(lines):
        name = lines[i].strip()
        i += 1
        if not name:
            continue
        if i >= len(lines):
            raise DataError("image path with no count line", line=i)
        try:
            count = int(lines[i].strip())
        except ValueError as exc:
            raise DataError(f"expected a box count, got {lines[i]!r}", line=i + 1) from exc
        i += 1
        boxes: List[GroundTruthBox] = []
        if count == 0:
            # consume the conventional placeholder row when present
            if i < len(lines) and len(lines[i].split()) >= 4:
                try:
                    [float(v) for v in lines[i].split()[:4]]
                    i += 1
                except ValueError:
                    pass
        for _ in range(count):
            if i >= len(lines):
                raise DataError(f"truncated file: expected {count} boxes for {name}", line=i)
            parts = lines[i].split()
            if len(parts) < 4:
                raise DataError(f"box line needs at least 4 fields, got {len(parts)}", line=i + 1)
            try:
                x, y, w, h = (float(v) for v in parts[:4])
            except ValueError as exc:
                raise DataError(f"non-numeric box fields in {parts[:4]}", line=i + 1) from exc
            i += 1
            if w <= 0 or h <= 0:
                skipped += 1
                continue
            boxes.append(GroundTruthBox(x, y, w, h))
        out[name] = boxes
    if skipped:
        warnings.warn(f"skipped {skipped} zero-sized boxes")
    return out


def write_detections(dets_by_image: Dict[str, Sequence[Detection]], path) -> None:
    """Submission-style text: path line, count line, "x y w h score" lines."""
    with open(path, "w") as fh:
        for name, dets in dets_by_image.items():
            fh.write(f"{name}\n{len(dets)}\n")
            for d in dets:
                fh.write(f"{d.x:.2f} {d.y:.2f} {d.w:.2f} {d.h:.2f} {d.score:.6f}\n")


def read_detections(path) -> Dict[str, List[Detection]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    out: Dict[str, List[Detection]] = {}
    i = 0
    while i < len(lines):
        name = lines[i].strip()
        i += 1
        if not name:
            continue
        try:
            count = int(lines[i].strip())
        except (IndexError, ValueError) as exc:
            raise DataError("expected a detection count", line=i + 1) from exc
        i += 1
        dets = []
        for _ in range(count):
            parts = lines[i].split()
            x, y, w, h, score = (float(v) for v in parts[:5])
            dets.append(Detection(x, y, w, h, score))
            i += 1
        out[name] = dets
    return out
