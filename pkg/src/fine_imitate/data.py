"""Seeded synthetic shapes dataset and annotation readers/writers."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box, iou

logger = logging.getLogger(__name__)

SHAPE_CLASSES = ("circle", "square", "triangle")
KITTI_CLASSES = ("car", "pedestrian", "cyclist")


@dataclass
class Sample:
    image_id: str
    gts: List[Box]
    image: Optional[np.ndarray] = None  # (H, W, 1) in [0, 1]
    image_path: Optional[str] = None

    def load(self) -> np.ndarray:
        if self.image is None:
            if self.image_path is None:
                raise ValueError(f"sample {self.image_id} has neither pixels nor an image path")
            self.image = read_png(self.image_path)
        return self.image


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    num_images: int = 500
    image_size: int = 64
    classes: Tuple[str, ...] = SHAPE_CLASSES
    min_objects: int = 1
    max_objects: int = 4
    min_size: float = 10.0
    max_size: float = 28.0
    crowding: float = 0.3
    noise_std: float = 0.05
    max_clutter: int = 6
    texture: float = 0.06
    first_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.num_images < 0 or self.image_size < 8:
            raise ValueError("num_images must be >= 0 and image_size >= 8")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not 2 <= self.min_size <= self.max_size <= self.image_size:
            raise ValueError("need 2 <= min_size <= max_size <= image_size")
        if not 0.0 <= self.crowding <= 1.0:
            raise ValueError("crowding must lie in [0, 1]")
        unknown = set(self.classes) - set(SHAPE_CLASSES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)


def _shape_mask(kind: str, x1: float, y1: float, x2: float, y2: float, xs, ys) -> np.ndarray:
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    if kind == "square":
        return (xs >= x1) & (xs < x2) & (ys >= y1) & (ys < y2)
    if kind == "circle":
        rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
        return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        t = (ys - y1) / (y2 - y1)
        half = t * (x2 - x1) / 2
        return (ys >= y1) & (ys < y2) & (np.abs(xs - cx) <= half)
    raise ValueError(kind)


def _segment_mask(p0, p1, thickness, xs, ys) -> np.ndarray:
    d = np.subtract(p1, p0)
    length2 = float(d @ d) or 1.0
    t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / length2, 0, 1)
    px, py = p0[0] + t * d[0], p0[1] + t * d[1]
    return (xs - px) ** 2 + (ys - py) ** 2 <= (thickness / 2) ** 2


CLUTTER_KINDS = ("segment", "ring", "cross", "stripes", "blob")


def _clutter_mask(kind: str, rng, spec: DatasetSpec, xs, ys) -> np.ndarray:
    """Background distractor that is not one of the object classes."""
    n = spec.image_size
    size = rng.uniform(spec.min_size * 0.6, spec.max_size)
    cx, cy = rng.uniform(0, n, size=2)
    if kind == "segment":
        p0 = np.array([cx, cy])
        return _segment_mask(p0, p0 + rng.normal(0, n / 5, size=2), rng.uniform(1.0, 2.5), xs, ys)
    if kind == "ring":
        r = np.hypot(xs - cx, ys - cy)
        return np.abs(r - size / 2) <= rng.uniform(0.8, 1.8)
    if kind == "cross":
        half, bar = size / 2, rng.uniform(1.0, 2.5)
        inside = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
        return inside & ((np.abs(xs - cx) <= bar) | (np.abs(ys - cy) <= bar))
    if kind == "stripes":
        half = size / 2
        period = rng.uniform(3.0, 6.0)
        inside = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
        ang = rng.uniform(0, math.pi)
        phase = (xs * math.cos(ang) + ys * math.sin(ang)) % period
        return inside & (phase < period / 2)
    if kind == "blob":
        lumps = np.zeros_like(xs, dtype=bool)
        for _ in range(int(rng.integers(2, 5))):
            ox, oy = rng.normal(0, size / 4, size=2)
            rad = rng.uniform(size / 8, size / 4)
            lumps |= (xs - cx - ox) ** 2 + (ys - cy - oy) ** 2 <= rad ** 2
        return lumps
    raise ValueError(kind)


def _propose_box(rng, spec: DatasetSpec, anchor: Optional[Box]) -> Tuple[float, float, float, float]:
    size = rng.uniform(spec.min_size, spec.max_size)
    aspect = math.exp(rng.uniform(math.log(0.7), math.log(1.4)))
    w = min(size * math.sqrt(aspect), spec.image_size)
    h = min(size / math.sqrt(aspect), spec.image_size)
    if anchor is None:
        x1 = rng.uniform(0, spec.image_size - w)
        y1 = rng.uniform(0, spec.image_size - h)
    else:
        # centre within about one object size of the partner
        ang = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(0.45, 0.8) * (max(w, h) + max(anchor.width, anchor.height)) / 2
        cx = (anchor.x1 + anchor.x2) / 2 + dist * math.cos(ang)
        cy = (anchor.y1 + anchor.y2) / 2 + dist * math.sin(ang)
        x1 = min(max(cx - w / 2, 0), spec.image_size - w)
        y1 = min(max(cy - h / 2, 0), spec.image_size - h)
    return x1, y1, x1 + w, y1 + h


def _containment(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / min(a.area, b.area)


def render_sample(spec: DatasetSpec, index: int) -> Sample:
    """Render image ``index``; a pure function of ``(spec.seed, index)``."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    n = spec.image_size
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    img = np.full((n, n), rng.uniform(0.05, 0.35))
    gx, gy = rng.normal(0, 0.1, size=2)
    img += gx * (xs / n - 0.5) + gy * (ys / n - 0.5)

    for _ in range(3):
        fx, fy = rng.uniform(0.5, 4.0, size=2) * 2 * math.pi / n
        img += spec.texture * rng.uniform(0.3, 1.0) * np.sin(fx * xs + fy * ys + rng.uniform(0, 2 * math.pi))

    for _ in range(rng.integers(spec.max_clutter // 2, spec.max_clutter + 1)):
        kind = CLUTTER_KINDS[int(rng.integers(len(CLUTTER_KINDS)))]
        clutter = _clutter_mask(kind, rng, spec, xs, ys)
        img[clutter] = rng.uniform(0.35, 1.0)

    gts: List[Box] = []
    owner = np.full((n, n), -1)
    pixels: List[int] = []
    target = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(target):
        cls = int(rng.integers(len(spec.classes)))
        crowd = bool(gts) and rng.random() < spec.crowding
        partner = gts[int(rng.integers(len(gts)))] if crowd else None
        placed = None
        for _attempt in range(20):
            bx = _propose_box(rng, spec, partner)
            mask = _shape_mask(spec.classes[cls], *bx, xs, ys)
            if mask.sum() < 4:
                continue
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            box = Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1), cls)
            overlaps = [iou(box, g) for g in gts]
            limit = 0.45 if crowd else 0.05
            if not all(o <= limit for o in overlaps) or (crowd and max(overlaps) <= 0.05):
                continue
            # earlier objects must stay mostly visible and not nest inside each other
            if all(_containment(box, g) <= 0.5 for g in gts) and all(
                    ((owner == o) & ~mask).sum() >= 0.6 * pixels[o] for o in range(len(gts))):
                placed = (box, mask)
                break
        if placed is None:
            logger.info("image %d: could not place object %d after 20 tries", index, len(gts))
            continue
        box, mask = placed
        img[mask] = rng.uniform(0.55, 1.0)
        owner[mask] = len(gts)
        pixels.append(int(mask.sum()))
        gts.append(box)

    img = img + rng.normal(0, spec.noise_std, size=img.shape)
    # 8-bit quantised so a PNG round trip is exact
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return Sample(f"img{index:06d}", gts, img[..., None])


def generate(spec: DatasetSpec) -> List[Sample]:
    return [render_sample(spec, spec.first_index + i) for i in range(spec.num_images)]


def make_splits(spec: DatasetSpec, num_test: int) -> Tuple[List[Sample], List[Sample]]:
    """Train split = images ``[0, num_images)``; test split follows with disjoint indices."""
    train = generate(spec)
    test_spec = DatasetSpec(**{**spec.to_dict(), "num_images": num_test,
                               "first_index": spec.first_index + spec.num_images})
    return train, generate(test_spec)


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.load() for s in samples]).astype(np.float64)


# ------------------------------------------------------------------ file I/O

def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return arr[..., None]


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[..., 0]
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def _box_row(b: Box) -> list:
    return [b.x1, b.y1, b.x2, b.y2, b.class_id]


def save_jsonl(samples: Sequence[Sample], path, image_dir: Optional[str] = None) -> None:
    """Write annotations (and, if ``image_dir`` is given, PNG pixels) for ``samples``.

    Image paths are stored relative to the annotation file's directory.
    """
    path = Path(path)
    root = path.parent
    with open(path, "w") as fh:
        for s in samples:
            rel = s.image_path
            if image_dir is not None and s.image is not None:
                img_path = Path(image_dir) / f"{s.image_id}.png"
                img_path.parent.mkdir(parents=True, exist_ok=True)
                write_png(img_path, s.image)
                rel = os.path.relpath(img_path, root)
            rec = {"image_id": s.image_id, "image": rel, "boxes": [_box_row(b) for b in s.gts]}
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path) -> List[Sample]:
    path = Path(path)
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                boxes = [Box(float(r[0]), float(r[1]), float(r[2]), float(r[3]), int(r[4]))
                         for r in rec["boxes"]]
                image = rec["image"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed annotation line: {exc}") from exc
            if image is not None and not os.path.isabs(image):
                image = str(path.parent / image)
            image_id = rec.get("image_id") or Path(image or f"line{lineno}").stem
            samples.append(Sample(image_id, boxes, image_path=image))
    return samples


@dataclass
class KittiObject:
    type: str
    bbox: Tuple[float, float, float, float]
    fields: List[str] = field(default_factory=list)


def parse_kitti_line(line: str) -> KittiObject:
    parts = line.split()
    if len(parts) < 8:
        raise ValueError(f"expected at least 8 fields, got {len(parts)}")
    return KittiObject(parts[0], tuple(float(v) for v in parts[4:8]), parts)


def format_kitti_line(obj: KittiObject) -> str:
    """Serialise back to a 15-field KITTI label line (non-bbox fields kept when known)."""
    fields = list(obj.fields) if obj.fields else [obj.type] + ["0"] * 14
    fields += ["0"] * (15 - len(fields))
    fields[0] = obj.type
    fields[4:8] = [f"{v:.2f}" for v in obj.bbox]
    return " ".join(fields)


def load_kitti_labels(label_dir, classes: Sequence[str] = KITTI_CLASSES,
                      image_dir: Optional[str] = None) -> List[Sample]:
    """Read a KITTI ``label_2`` directory; classes not in ``classes`` (e.g. DontCare) are skipped.

    ``class_id`` is the index into ``classes`` (case-insensitive match).
    """
    wanted = [c.lower() for c in classes]
    samples = []
    for path in sorted(Path(label_dir).glob("*.txt")):
        gts = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = parse_kitti_line(line)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
                kind = obj.type.lower()
                if kind not in wanted:
                    continue
                x1, y1, x2, y2 = obj.bbox
                if not (x2 > x1 and y2 > y1):
                    logger.warning("%s:%d: skipping degenerate box %s", path, lineno, obj.bbox)
                    continue
                gts.append(Box(x1, y1, x2, y2, wanted.index(kind)))
        img = str(Path(image_dir) / f"{path.stem}.png") if image_dir else None
        samples.append(Sample(path.stem, gts, image_path=img))
    return samples
