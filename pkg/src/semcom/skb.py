"""Segmentation knowledge base.

Splits an image into per-objective binary masks through a pluggable
backend and, on the receive side, re-segments a recovered image to check
that the interesting objects survived transmission.

Backends
--------
``oracle``
    Reads dataset annotation bitmaps (by the image's ``source_id`` stem)
    and intersects each instance with the pixels that actually carry
    content (channel mean above a threshold).  On a clean source image
    whose objects are brighter than the threshold this reproduces the
    annotation bitmaps exactly; on a blacked-out recovery it yields
    nothing, so integrity checks fail as they should.
``trivial``
    One all-ones mask covering the frame.
``foundation-adapter``
    Out-of-process contract for an external promptable segmenter; see
    :class:`AdapterBackend`.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import VOID, load_annotation
from .images import ImageSample, save_image

DEFAULT_K_MAX = 8
DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_CONTENT_THRESHOLD = 0.1


class BackendError(RuntimeError):
    """A segmentation backend failed to produce usable masks."""


@dataclass
class SegmentMask:
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    label: str | None = None
    score: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")
        self.mask = m.astype(np.uint8)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class SegmentSet:
    masks: list[SegmentMask]
    source: ImageSample
    backend_name: str

    def __post_init__(self):
        if not self.masks:
            raise BackendError(f"backend {self.backend_name!r} produced no segments")
        hw = (self.source.height, self.source.width)
        for m in self.masks:
            if m.mask.shape != hw:
                raise ValueError(f"mask shape {m.mask.shape} != image shape {hw}")
            if m.area == 0:
                raise ValueError("empty segment mask")

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def labels(self) -> list[str | None]:
        return [m.label for m in self.masks]


@dataclass
class IntegrityReport:
    per_segment_iou: list[float]
    preserved: list[bool]
    threshold: float
    labels: list[str | None] = field(default_factory=list)

    def pass_fraction(self) -> float:
        return float(np.mean(self.preserved)) if self.preserved else 0.0


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

class TrivialBackend:
    name = "trivial"

    def raw_masks(self, image: ImageSample) -> list[SegmentMask]:
        return [SegmentMask(np.ones((image.height, image.width), dtype=np.uint8), label=None, score=1.0)]


class OracleBackend:
    """Annotation-driven segmentation for dataset-backed images."""

    name = "oracle"

    def __init__(self, dataset_root, content_threshold: float = DEFAULT_CONTENT_THRESHOLD):
        self.dataset_root = Path(dataset_root)
        self.content_threshold = float(content_threshold)
        labels_path = self.dataset_root / "labels.json"
        self._labels = json.loads(labels_path.read_text()) if labels_path.exists() else {}

    def raw_masks(self, image: ImageSample) -> list[SegmentMask]:
        ann = load_annotation(self.dataset_root, image.source_id,
                              size=(image.height, image.width))
        content = image.pixels.mean(axis=2) > self.content_threshold
        names = self._labels.get(image.source_id, {})
        masks = []
        for inst in np.unique(ann):
            if inst == 0 or inst == VOID:
                continue
            m = ((ann == inst) & content).astype(np.uint8)
            if m.sum() == 0:
                continue
            masks.append(SegmentMask(m, label=names.get(str(int(inst)), f"object-{int(inst)}"), score=1.0))
        return masks


class AdapterBackend:
    """Drives an external segmenter process.

    The command is invoked as ``command... <image.png> <out_dir>``; the
    process must write one binary mask PNG per segment plus an
    ``index.jsonl`` of ``{"mask_path": ..., "label": ..., "score": ...}``
    lines into ``out_dir``, and exit 0.  A nonzero exit status or a
    malformed index is a :class:`BackendError`.  Calls are serialised.
    """

    name = "foundation-adapter"

    def __init__(self, command: list[str], workdir=None):
        self.command = list(command)
        self.workdir = workdir

    def raw_masks(self, image: ImageSample) -> list[SegmentMask]:
        from PIL import Image as PILImage

        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            tmp = Path(tmp)
            img_path = tmp / "input.png"
            out_dir = tmp / "out"
            out_dir.mkdir()
            save_image(image, img_path)
            proc = subprocess.run(self.command + [str(img_path), str(out_dir)],
                                  capture_output=True, text=True)
            if proc.returncode != 0:
                raise BackendError(f"adapter exited with status {proc.returncode}: {proc.stderr.strip()}")
            index = out_dir / "index.jsonl"
            if not index.exists():
                raise BackendError("adapter wrote no index.jsonl")
            masks = []
            for line in index.read_text().splitlines():
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    mask_path = out_dir / rec["mask_path"]
                    score = float(rec["score"])
                except (ValueError, KeyError) as exc:
                    raise BackendError(f"malformed adapter index line: {line!r}") from exc
                with PILImage.open(mask_path) as im:
                    arr = (np.asarray(im.convert("L")) >= 128).astype(np.uint8)
                if arr.shape != (image.height, image.width):
                    raise BackendError(f"adapter mask shape {arr.shape} != image {image.height}x{image.width}")
                masks.append(SegmentMask(arr, label=rec.get("label"), score=score))
            return masks


def make_backend(name: str, **options):
    """Backend selector: 'oracle', 'trivial' or 'foundation-adapter'."""
    if name == "trivial":
        return TrivialBackend()
    if name == "oracle":
        return OracleBackend(options["dataset_root"],
                             options.get("content_threshold", DEFAULT_CONTENT_THRESHOLD))
    if name == "foundation-adapter":
        return AdapterBackend(options["command"], options.get("workdir"))
    raise ValueError(f"unknown segmentation backend {name!r}")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def segment(image: ImageSample, backend, k_max: int = DEFAULT_K_MAX) -> SegmentSet:
    """Split ``image`` into at most ``k_max`` per-objective masks.

    Masks are ordered by descending score (stable) and the lowest-score
    surplus beyond ``k_max`` is dropped.
    """
    masks = backend.raw_masks(image)
    if not masks:
        raise BackendError(f"backend {backend.name!r} found no segments in {image.source_id!r}")
    order = sorted(range(len(masks)), key=lambda i: (-masks[i].score, i))
    masks = [masks[i] for i in order[:k_max]]
    return SegmentSet(masks, source=image, backend_name=backend.name)


def extract_segment(image: ImageSample, mask: SegmentMask) -> ImageSample:
    """Zero out everything outside ``mask``; dimensions unchanged."""
    if mask.mask.shape != (image.height, image.width):
        raise ValueError(f"mask shape {mask.mask.shape} does not match image "
                         f"{image.height}x{image.width}")
    return ImageSample(image.pixels * mask.mask[:, :, None], source_id=image.source_id)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection-over-union of two binary masks (0.0 if both empty)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def verify_recovery(recovered: ImageSample, reference_segments: SegmentSet, backend,
                    threshold: float = DEFAULT_IOU_THRESHOLD) -> IntegrityReport:
    """Re-segment a recovered image and score each reference objective.

    Each reference mask is matched to its best-IoU mask from the
    recovered image's segmentation; an empty re-segmentation scores 0
    everywhere.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    src = reference_segments.source
    if (recovered.height, recovered.width) != (src.height, src.width):
        raise ValueError("recovered image does not match reference dimensions")
    candidates = backend.raw_masks(recovered)
    ious = []
    for ref in reference_segments.masks:
        best = max((iou(ref.mask, c.mask) for c in candidates), default=0.0)
        ious.append(best)
    preserved = [v >= threshold for v in ious]
    return IntegrityReport(per_segment_iou=ious, preserved=preserved,
                           threshold=threshold, labels=list(reference_segments.labels))
