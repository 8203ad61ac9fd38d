"""Annotated image datasets.

Directory layout (VOC-style, discovered by filename stem)::

    <root>/images/<stem>.png          RGB source images
    <root>/annotations/<stem>.png     uint8 instance map: 0 background,
                                      1..254 object instance ids, 255 void
    <root>/labels.json                optional {stem: {"<id>": "<label>"}}

The synthetic generator produces desk-scale datasets in this layout:
bright "disc"/"box" objects (the interesting semantics), small dim
"speck" distractors, and a faint background gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .images import ImageSample, save_image

VOID = 255

INTEREST_LABELS = ("disc", "box")


@dataclass
class AnnotatedSample:
    image: ImageSample
    annotation: np.ndarray  # (H, W) uint8 instance map
    labels: dict[int, str]

    def instance_ids(self) -> list[int]:
        ids = np.unique(self.annotation)
        return [int(i) for i in ids if i != 0 and i != VOID]


def discover(root) -> list[str]:
    """Stems present under both images/ and annotations/."""
    root = Path(root)
    imgs = {p.stem for p in (root / "images").glob("*.png")} | {p.stem for p in (root / "images").glob("*.jpg")}
    anns = {p.stem for p in (root / "annotations").glob("*.png")}
    return sorted(imgs & anns)


def load_annotation(root, stem, size: tuple[int, int] | None = None) -> np.ndarray:
    path = Path(root) / "annotations" / f"{stem}.png"
    if not path.exists():
        raise FileNotFoundError(f"missing annotation file: {path}")
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None:
            im = im.resize((size[1], size[0]), Image.NEAREST)
        return np.asarray(im, dtype=np.uint8)


def load_sample(root, stem, size: tuple[int, int] | None = None) -> AnnotatedSample:
    root = Path(root)
    img_path = root / "images" / f"{stem}.png"
    if not img_path.exists():
        img_path = root / "images" / f"{stem}.jpg"
    from .images import load_image

    image = load_image(img_path, size=size, source_id=stem)
    annotation = load_annotation(root, stem, size=size)
    labels = {}
    labels_path = root / "labels.json"
    if labels_path.exists():
        table = json.loads(labels_path.read_text())
        labels = {int(k): v for k, v in table.get(stem, {}).items()}
    return AnnotatedSample(image, annotation, labels)


def load_dataset(root, stems=None, size: tuple[int, int] | None = None) -> list[AnnotatedSample]:
    if stems is None:
        stems = discover(root)
    return [load_sample(root, s, size=size) for s in stems]


# ---------------------------------------------------------------------------
# synthetic desk-scale data
# ---------------------------------------------------------------------------

def _disc_mask(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _box_mask(h, w, cy, cx, hy, hx):
    yy, xx = np.mgrid[0:h, 0:w]
    return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)


def make_synthetic_dataset(root, count: int, image_size: tuple[int, int] = (32, 32),
                           seed: int = 0, prefix: str = "img",
                           interest_count: tuple[int, int] = (1, 2),
                           speck_prob: float = 0.5,
                           radius_range: tuple[float, float] = (0.13, 0.24)) -> list[str]:
    """Write ``count`` annotated images under ``root``; returns their stems.

    Every image holds ``interest_count`` bright interest objects
    (disc/box, radii drawn from ``radius_range`` x min(H, W)) and, with
    probability ``speck_prob``, one small dim speck, all mutually
    disjoint on a faint gradient background.  Object pixels keep channel
    means above 0.15 so the annotation-driven segmenter sees them as
    content.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    h, w = image_size
    scale = min(h, w)
    stems = []
    label_table: dict[str, dict[str, str]] = {}

    for i in range(count):
        stem = f"{prefix}_{i:04d}"
        grad_x = rng.uniform(-0.05, 0.05, size=3)
        grad_y = rng.uniform(-0.05, 0.05, size=3)
        base = rng.uniform(0.04, 0.08, size=3)
        yy, xx = np.mgrid[0:h, 0:w]
        img = base[None, None, :] + grad_x[None, None, :] * (xx / w)[:, :, None] \
            + grad_y[None, None, :] * (yy / h)[:, :, None]
        img = np.clip(img + rng.normal(0.0, 0.005, size=(h, w, 3)), 0.0, 0.14)
        ann = np.zeros((h, w), dtype=np.uint8)

        n_interest = int(rng.integers(interest_count[0], interest_count[1] + 1))
        kinds = ["disc" if rng.random() < 0.5 else "box" for _ in range(n_interest)]
        if rng.random() < speck_prob:
            kinds.append("speck")

        placed = []  # (cy, cx, reach)
        labels = {}
        inst = 0
        for kind in kinds:
            if kind == "speck":
                r = max(2.0, rng.uniform(0.05, 0.09) * scale)
            else:
                r = rng.uniform(*radius_range) * scale
            for _ in range(40):
                cy = rng.uniform(r + 1, h - r - 2)
                cx = rng.uniform(r + 1, w - r - 2)
                if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr + 2.0) ** 2 for py, px, pr in placed):
                    break
            else:
                continue  # crowded image, skip this shape
            placed.append((cy, cx, r))
            if kind == "box":
                mask = _box_mask(h, w, cy, cx, r * rng.uniform(0.7, 1.0), r * rng.uniform(0.7, 1.0))
            else:
                mask = _disc_mask(h, w, cy, cx, r)
            if kind == "speck":
                color = rng.uniform(0.18, 0.35, size=3)
            else:
                color = rng.uniform(0.5, 0.95, size=3)
            img[mask] = color[None, :]
            inst += 1
            ann[mask] = inst
            labels[str(inst)] = kind
        if inst == 0:  # placement never failed for the first shape, but stay safe
            mask = _disc_mask(h, w, h / 2, w / 2, 0.2 * scale)
            img[mask] = (0.8, 0.6, 0.5)
            ann[mask] = 1
            labels["1"] = "disc"

        save_image(ImageSample(np.clip(img, 0.0, 1.0), stem), root / "images" / f"{stem}.png")
        Image.fromarray(ann, mode="L").save(root / "annotations" / f"{stem}.png")
        label_table[stem] = labels
        stems.append(stem)

    (root / "labels.json").write_text(json.dumps(label_table, indent=0, sort_keys=True))
    return stems
