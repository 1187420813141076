"""Prompt-to-mask pipeline and model reporting, shared by the CLI and the
HTTP gateway.

`segment` runs the full chain for one box prompt: square crop derivation,
crop + resize, a forward pass through whichever runner was supplied, and
binarization back at crop resolution. Runners are duck-typed: anything with
`run(x) -> logits`, `param_total` and `quantized` works, so the float and
int8 executors plug in interchangeably and tests can substitute stubs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cocoio import Annotation, AnnotationError, EvalReport, evaluate
from .net import (NetSpec, WeightStore, build_plan, count_macs, expected_shapes,
                  forward)
from .quantize import Int8Store, QuantParams, _channel_count, quantized_forward
from .roi import (BBox, CropRect, PromptConfig, crop_resize_image,
                  make_square_roi, postprocess_mask)
from .tensorkit import Tensor


@dataclass(frozen=True)
class SegmentResult:
    """One prompt answered: a {0, 1} mask at crop pixel resolution."""

    mask: np.ndarray
    rect: CropRect
    latency_ms: float
    params_used: int
    quantized: bool


class FloatRunner:
    """Float32 executor behind the runner duck type."""

    quantized = False

    def __init__(self, weights: WeightStore):
        self.weights = weights
        self.spec = weights.spec
        self.param_total = spec_param_count(weights.spec)

    def run(self, x: Tensor) -> Tensor:
        return forward(self.weights, x)


class Int8Runner:
    """Quantized executor behind the same duck type."""

    quantized = True

    def __init__(self, qstore: Int8Store, qparams: QuantParams):
        self.qstore = qstore
        self.qparams = qparams
        self.spec = qstore.spec
        self.param_total = spec_param_count(qstore.spec)

    def run(self, x: Tensor) -> Tensor:
        return quantized_forward(self.qstore, self.qparams, x)


def segment(image: Tensor, box: BBox, runner,
            cfg: PromptConfig = PromptConfig()) -> SegmentResult:
    """Answer one box prompt against a full image.

    The reported latency covers the whole chain (crop geometry, resize,
    forward, binarize) measured with a monotonic clock, so it varies between
    runs; everything else in the result is deterministic.
    """
    t0 = time.perf_counter()
    rect = make_square_roi(box, cfg, (image.w, image.h))
    crop = crop_resize_image(image, rect, cfg.target_size)
    logits = runner.run(crop)
    mask = postprocess_mask(logits, rect)
    latency_ms = (time.perf_counter() - t0) * 1000.0
    return SegmentResult(mask=mask, rect=rect, latency_ms=latency_ms,
                         params_used=runner.param_total,
                         quantized=runner.quantized)


SegmentFn = Callable[[Tensor, CropRect, Annotation], np.ndarray]


def runner_segment_fn(runner, cfg: PromptConfig = PromptConfig()) -> SegmentFn:
    """The production segmenter in `evaluate_annotations` form."""
    def fn(image: Tensor, rect: CropRect, ann: Annotation) -> np.ndarray:
        crop = crop_resize_image(image, rect, cfg.target_size)
        return postprocess_mask(runner.run(crop), rect)
    return fn


def evaluate_annotations(annotations, image_for, segment_fn: SegmentFn,
                         cfg: PromptConfig = PromptConfig()) -> EvalReport:
    """Score a segmenter against ground-truth annotations.

    For each annotation the prompt box is expanded to its square crop, the
    segmenter produces a mask at crop pixel resolution, and the ground truth
    is cropped to the same window; IoU is taken per instance. `image_for`
    maps an image id to its (1, 3, H, W) tensor. `segment_fn` receives the
    annotation as well, which lets tests inject a perfect-echo oracle.
    """
    annotations = list(annotations)
    if not annotations:
        raise AnnotationError("no annotations to evaluate")
    predictions, references, ids = [], [], []
    for ann in annotations:
        image = image_for(ann.image_id)
        if (image.h, image.w) != tuple(ann.image_size):
            raise AnnotationError(
                f"annotation {ann.id} was made for extent {ann.image_size}, "
                f"image is {(image.h, image.w)}"
            )
        rect = make_square_roi(ann.bbox, cfg, (image.w, image.h))
        pred = segment_fn(image, rect, ann)
        ix1, iy1, ix2, iy2 = rect.pixel_bounds()
        gt = ann.mask()[iy1:iy2, ix1:ix2]
        if pred.shape != gt.shape:
            raise AnnotationError(
                f"annotation {ann.id}: segmenter returned {pred.shape}, "
                f"crop window is {gt.shape}"
            )
        predictions.append(pred)
        references.append(gt)
        ids.append(ann.id)
    return evaluate(predictions, references, ids=ids)


# ------------------------------------------------------- model reporting

def spec_param_count(spec: NetSpec) -> int:
    """Parameter count straight from the architecture (no weights needed)."""
    return int(sum(int(np.prod(s)) for s in expected_shapes(spec).values()))


def psw1_file_size(spec: NetSpec) -> int:
    """Exact byte size of the float32 weight container for this architecture.

    Mirrors the serializer layout; an equality test against a real file keeps
    the two from drifting.
    """
    total = 4 + 4 + 8 + 4  # magic, version, fingerprint, tensor count
    for name, shape in expected_shapes(spec).items():
        total += 2 + len(name.encode("utf-8")) + 2 + 4 * len(shape)
        total += 4 * int(np.prod(shape))
    return total


def psq1_file_size(spec: NetSpec) -> int:
    """Exact byte size of the int8 container (codes, scales, activation sites)."""
    _, sites = build_plan(spec)
    total = 4 + 4 + 8  # magic, version, fingerprint
    total += 4
    for site in sites:
        total += 2 + len(site.encode("utf-8")) + 4 + 4  # name, scale, zero point
    total += 4
    for name, shape in expected_shapes(spec).items():
        total += 2 + len(name.encode("utf-8")) + 4  # name, channel count
        total += 4 * _channel_count(name, shape) + int(np.prod(shape))
    return total


def model_report(spec: NetSpec, quantized: bool) -> dict:
    """The shared params/macs/size summary the CLI and gateway both expose."""
    return {
        "params": spec_param_count(spec),
        "macs": count_macs(spec),
        "size_bytes": psq1_file_size(spec) if quantized else psw1_file_size(spec),
        "quantized": quantized,
    }
