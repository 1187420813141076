"""COCO-style annotation ingestion and segmentation metrics.

Supports the instances-JSON subset used for box-prompt evaluation: each
annotation carries an id, an image id, a bbox and a segmentation that is
either a polygon list (flat x,y coordinate lists) or an uncompressed RLE
(column-major runs, first count covering zeros).  Compressed RLE strings are
out of scope.

Masks rasterize at pixel centers: pixel (r, c) is foreground iff the point
(c + 0.5, r + 0.5) lies inside the polygon under the even-odd rule; multiple
polygons union.  IoU of two empty masks is defined as 1 so that a correctly
empty prediction is not penalized.

mAP here is the threshold-averaged success rate over IoU thresholds
0.50, 0.55, ..., 0.95: with one mask per prompt and no confidence ranking,
average precision degenerates to recall at each threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .roi import BBox

log = logging.getLogger("picoseg.cocoio")

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


class AnnotationError(Exception):
    """Unreadable or structurally invalid annotation input."""


@dataclass(frozen=True)
class Rle:
    """Uncompressed column-major run-length segmentation."""

    size: tuple[int, int]  # (h, w)
    counts: tuple[int, ...]

    def __post_init__(self):
        h, w = self.size
        if h < 1 or w < 1:
            raise AnnotationError(f"bad RLE size {self.size}")
        if any(c < 0 for c in self.counts):
            raise AnnotationError("RLE counts must be non-negative")
        if sum(self.counts) != h * w:
            raise AnnotationError(
                f"RLE counts sum to {sum(self.counts)}, raster has {h * w} pixels")


@dataclass(frozen=True)
class Annotation:
    """One instance: identity, box prompt, and its segmentation."""

    id: int
    image_id: int
    bbox: BBox
    segmentation: list | Rle
    image_size: tuple[int, int]  # (h, w) of the owning image

    def __post_init__(self):
        if isinstance(self.segmentation, Rle):
            return
        if not self.segmentation:
            raise AnnotationError(f"annotation {self.id}: empty segmentation")
        for poly in self.segmentation:
            if len(poly) < 6 or len(poly) % 2 != 0:
                raise AnnotationError(
                    f"annotation {self.id}: polygon needs >= 3 x,y vertex pairs")

    def mask(self) -> np.ndarray:
        """Rasterize the segmentation at the owning image's resolution."""
        if isinstance(self.segmentation, Rle):
            return decode_rle(self.segmentation.size, self.segmentation.counts)
        return rasterize_polygon(self.image_size, self.segmentation)


def parse_annotations(path):
    """Read a COCO-instances JSON file.

    Returns (annotations, skipped): every entry with a valid bbox and
    segmentation, plus a count of malformed entries that were skipped (each
    also logged at warning level).
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise AnnotationError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "annotations" not in doc or "images" not in doc:
        raise AnnotationError(f"{path} lacks COCO 'images'/'annotations' arrays")

    sizes: dict[int, tuple[int, int]] = {}
    for img in doc["images"]:
        try:
            sizes[int(img["id"])] = (int(img["height"]), int(img["width"]))
        except (KeyError, TypeError, ValueError):
            log.warning("skipping malformed image entry: %r", img)

    out: list[Annotation] = []
    skipped = 0
    for entry in doc["annotations"]:
        try:
            image_id = int(entry["image_id"])
            x, y, w, h = (float(v) for v in entry["bbox"])
            seg = entry["segmentation"]
            if isinstance(seg, dict):
                seg = Rle(size=tuple(int(v) for v in seg["size"]),
                          counts=tuple(int(c) for c in seg["counts"]))
            else:
                seg = [list(map(float, poly)) for poly in seg]
            out.append(Annotation(
                id=int(entry["id"]),
                image_id=image_id,
                bbox=BBox(x=x, y=y, w=w, h=h),
                segmentation=seg,
                image_size=sizes[image_id],
            ))
        except (AnnotationError, KeyError, TypeError, ValueError) as exc:
            skipped += 1
            log.warning("skipping annotation %r: %s", entry.get("id"), exc)
    return out, skipped


def parse_images(path) -> dict[int, str]:
    """Image id -> file_name from the same COCO document."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise AnnotationError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "images" not in doc:
        raise AnnotationError(f"{path} lacks a COCO 'images' array")
    names: dict[int, str] = {}
    for img in doc["images"]:
        try:
            names[int(img["id"])] = str(img["file_name"])
        except (KeyError, TypeError, ValueError):
            log.warning("skipping malformed image entry: %r", img)
    return names


# ------------------------------------------------------------------- masks

def decode_rle(size, counts) -> np.ndarray:
    """Runs -> (h, w) uint8 mask; column-major fill, first run is zeros."""
    h, w = int(size[0]), int(size[1])
    counts = tuple(int(c) for c in counts)
    Rle(size=(h, w), counts=counts)  # reuse the invariant checks
    values = np.repeat(np.arange(len(counts), dtype=np.uint8) % 2, counts)
    return values.reshape(w, h).T


def encode_rle(mask: np.ndarray):
    """Mask -> ((h, w), counts); exact inverse of decode_rle."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise AnnotationError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    flat = (mask.T.ravel() > 0).astype(np.uint8)
    if flat.size == 0:
        raise AnnotationError("empty mask")
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:  # runs must start with the zero run, even if empty
        counts = [0] + counts
    return (h, w), counts


def rasterize_polygon(size, polygons) -> np.ndarray:
    """Union of even-odd polygon interiors sampled at pixel centers."""
    h, w = int(size[0]), int(size[1])
    out = np.zeros((h, w), dtype=np.uint8)
    px = np.arange(w, dtype=np.float64) + 0.5
    py = np.arange(h, dtype=np.float64) + 0.5
    cx = np.broadcast_to(px[None, :], (h, w))
    cy = np.broadcast_to(py[:, None], (h, w))
    for poly in polygons:
        if len(poly) < 6 or len(poly) % 2 != 0:
            raise AnnotationError("polygon needs >= 3 x,y vertex pairs")
        xs = np.asarray(poly[0::2], dtype=np.float64)
        ys = np.asarray(poly[1::2], dtype=np.float64)
        inside = np.zeros((h, w), dtype=bool)
        n = xs.size
        for i in range(n):
            x1, y1 = xs[i], ys[i]
            x2, y2 = xs[(i + 1) % n], ys[(i + 1) % n]
            spans = (y1 > cy) != (y2 > cy)
            if not spans.any():
                continue
            # x of the edge at each scanline; even-odd toggles per crossing
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = (x2 - x1) * (cy - y1) / (y2 - y1) + x1
            inside ^= spans & (cx < x_at)
        out |= inside.astype(np.uint8)
    return out


# ----------------------------------------------------------------- metrics

def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; both-empty counts as 1."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise AnnotationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a > 0
    b = b > 0
    union = int(np.sum(a | b))
    if union == 0:
        return 1.0
    return int(np.sum(a & b)) / union


@dataclass(frozen=True)
class EvalReport:
    ids: tuple[int, ...]
    ious: tuple[float, ...]
    miou: float
    map: float
    thresholds: tuple[float, ...] = IOU_THRESHOLDS

    def __post_init__(self):
        if len(self.ids) != len(self.ious):
            raise ValueError("one id per IoU required")
        if any(not 0.0 <= v <= 1.0 for v in self.ious):
            raise ValueError("IoU values must lie in [0, 1]")
        if abs(self.miou - sum(self.ious) / len(self.ious)) > 1e-9:
            raise ValueError("miou must be the mean of the per-instance IoUs")
        if not 0.0 <= self.map <= 1.0:
            raise ValueError("map must lie in [0, 1]")

    def to_json(self) -> dict:
        return {
            "miou": self.miou,
            "map": self.map,
            "per_instance": [
                {"id": i, "iou": v} for i, v in zip(self.ids, self.ious)
            ],
            "thresholds": list(self.thresholds),
        }


def evaluate(predictions, references, ids=None) -> EvalReport:
    """Pairwise mask comparison -> mIoU and threshold-averaged mAP."""
    predictions = list(predictions)
    references = list(references)
    if not predictions:
        raise AnnotationError("nothing to evaluate")
    if len(predictions) != len(references):
        raise AnnotationError(
            f"{len(predictions)} predictions vs {len(references)} references")
    if ids is None:
        ids = list(range(1, len(predictions) + 1))
    ious = tuple(iou(p, r) for p, r in zip(predictions, references))
    hits = [sum(1 for v in ious if v >= t) / len(ious) for t in IOU_THRESHOLDS]
    return EvalReport(
        ids=tuple(int(i) for i in ids),
        ious=ious,
        miou=sum(ious) / len(ious),
        map=sum(hits) / len(hits),
    )
