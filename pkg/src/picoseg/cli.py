"""Batch entry points: inference, evaluation, quantization, head fitting,
cache generation, synthetic data, and model counting.

Conventions shared by every subcommand:

* `--out` names the artifact the subcommand exists to produce. When the
  artifact is itself a JSON report (eval, count) the report goes there;
  otherwise the report is printed to stdout.
* Failures from any layer exit nonzero and print one JSON object to stderr
  with a machine-readable error class, e.g. {"error": {"class": "roi", ...}}.
* Everything except wall-clock latency fields is deterministic given the
  input files and `--seed`.
* `PICOSEG_LOG` picks the log level: error (default), info, or debug.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cocoio import AnnotationError, encode_rle, parse_annotations, parse_images
from .distill import CacheFileError, TeacherRecord, fit_head, synth_cache, write_cache
from .engine import (FloatRunner, Int8Runner, evaluate_annotations,
                     psq1_file_size, psw1_file_size, runner_segment_fn,
                     segment, spec_param_count)
from .imgio import ImageFormatError, read_image, write_mask_pgm, write_ppm
from .net import (NetSpec, WeightFileError, count_macs, load_weights,
                  save_weights)
from .quantize import (QuantizationError, divergence_report, export_int8,
                       import_int8, quantize)
from .roi import (BBox, CropRect, PromptConfig, RoiError, crop_resize_image,
                  crop_resize_mask, make_square_roi)
from .synth import make_calibration_batches, make_scene, make_shape_dataset
from .tensorkit import ShapeError, Tensor

log = logging.getLogger("picoseg.cli")

# Ordered most-specific-first; RoiError and ShapeError are ValueErrors.
_ERROR_CLASSES: tuple[tuple[type, str], ...] = (
    (RoiError, "roi"),
    (ShapeError, "shape"),
    (ImageFormatError, "image"),
    (WeightFileError, "weights"),
    (QuantizationError, "quant"),
    (AnnotationError, "annotations"),
    (CacheFileError, "cache"),
    (OSError, "io"),
    (ValueError, "value"),
    (RuntimeError, "runtime"),
)


def error_class(exc: BaseException) -> str:
    for kind, name in _ERROR_CLASSES:
        if isinstance(exc, kind):
            return name
    return "internal"


@dataclass(frozen=True)
class RunConfig:
    """Validated per-invocation settings; input paths must exist already."""

    subcommand: str
    weights: str | None = None
    quant: str | None = None
    image: str | None = None
    bbox: BBox | None = None
    ann: str | None = None
    images_dir: str | None = None
    out: str | None = None
    seed: int = 42
    size: int = 96
    steps: int = 200
    lr: float = 3e-4
    batches: int = 10
    count: int = 32

    def __post_init__(self):
        for field in ("weights", "quant", "image", "ann", "images_dir"):
            path = getattr(self, field)
            if path is not None and not Path(path).exists():
                raise FileNotFoundError(f"--{field.replace('_', '-')}: "
                                        f"no such path: {path}")

    def spec(self) -> NetSpec:
        return NetSpec(input_size=self.size)

    def prompt(self) -> PromptConfig:
        return PromptConfig(target_size=self.size)


def _parse_bbox(text: str) -> BBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise RoiError(f"--bbox wants x,y,w,h; got {text!r}")
    try:
        x, y, w, h = (float(p) for p in parts)
    except ValueError:
        raise RoiError(f"--bbox components must be numbers: {text!r}") from None
    return BBox(x=x, y=y, w=w, h=h)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _dump(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True,
                      default=_json_default) + "\n"


def _rect_dict(rect: CropRect) -> dict:
    return {"x1": rect.x1, "y1": rect.y1, "x2": rect.x2, "y2": rect.y2,
            "src_w": rect.src_w, "src_h": rect.src_h}


def _load_runner(cfg: RunConfig):
    if cfg.quant is not None:
        qstore, qparams = import_int8(cfg.quant, cfg.spec())
        return Int8Runner(qstore, qparams)
    if cfg.weights is not None:
        return FloatRunner(load_weights(cfg.weights, cfg.spec()))
    raise ValueError("one of --weights or --quant is required")


# ------------------------------------------------------------ subcommands

def cmd_infer(cfg: RunConfig) -> dict:
    runner = _load_runner(cfg)
    image = read_image(cfg.image)
    result = segment(image, cfg.bbox, runner, cfg=cfg.prompt())
    write_mask_pgm(cfg.out, result.mask)
    sidecar = {
        "latency_ms": result.latency_ms,
        "rect": _rect_dict(result.rect),
        "params_used": result.params_used,
        "quantized": result.quantized,
        "mask": str(cfg.out),
    }
    Path(str(cfg.out) + ".json").write_text(_dump(sidecar), encoding="utf-8")
    return sidecar


def cmd_eval(cfg: RunConfig, segment_fn=None) -> dict:
    annotations, skipped = parse_annotations(cfg.ann)
    if not annotations:
        raise AnnotationError(f"{cfg.ann} contains no usable annotations")
    names = parse_images(cfg.ann)
    # report order is by annotation id no matter how work gets scheduled
    annotations = sorted(annotations, key=lambda a: a.id)

    cache: dict[int, Tensor] = {}

    def image_for(image_id: int) -> Tensor:
        if image_id not in cache:
            name = names.get(image_id)
            if name is None:
                raise AnnotationError(f"image {image_id} has no file_name")
            cache[image_id] = read_image(Path(cfg.images_dir) / name)
        return cache[image_id]

    if segment_fn is None:
        segment_fn = runner_segment_fn(_load_runner(cfg), cfg.prompt())
    report = evaluate_annotations(annotations, image_for, segment_fn,
                                  cfg=cfg.prompt())
    out = report.to_json()
    out["skipped"] = skipped
    return out


def _calibration_batches(cfg: RunConfig) -> list[Tensor]:
    if cfg.images_dir is not None:
        paths = sorted(p for p in Path(cfg.images_dir).iterdir()
                       if p.suffix in (".ppm", ".png"))
        if not paths:
            raise QuantizationError(f"no calibration images in {cfg.images_dir}")
        batches = []
        for path in paths:
            img = read_image(path)
            full = CropRect(x1=0.0, y1=0.0, x2=float(img.w), y2=float(img.h),
                            src_w=img.w, src_h=img.h)
            batches.append(crop_resize_image(img, full, cfg.size))
        return batches
    if cfg.batches < 1:
        raise QuantizationError("need at least one calibration batch")
    return make_calibration_batches(cfg.seed, cfg.batches, size=cfg.size)


def cmd_quantize(cfg: RunConfig) -> dict:
    weights = load_weights(cfg.weights, cfg.spec())
    batches = _calibration_batches(cfg)
    qstore, qparams = quantize(weights, batches)
    export_int8(qstore, qparams, cfg.out)
    fp_bytes = psw1_file_size(cfg.spec())
    int8_bytes = os.path.getsize(cfg.out)
    return {
        "out": str(cfg.out),
        "batches": len(batches),
        "fp32_size_bytes": fp_bytes,
        "int8_size_bytes": int8_bytes,
        "compression_ratio": fp_bytes / int8_bytes,
        "divergence": divergence_report(weights, qstore, qparams, batches),
    }


def cmd_count(cfg: RunConfig) -> dict:
    spec = cfg.spec()
    return {
        "input_size": cfg.size,
        "params": spec_param_count(spec),
        "macs": count_macs(spec),
        "fp32_size_bytes": psw1_file_size(spec),
        "int8_size_bytes": psq1_file_size(spec),
    }


def cmd_fit_head(cfg: RunConfig) -> dict:
    weights = load_weights(cfg.weights, cfg.spec())
    dataset = make_shape_dataset(cfg.seed, cfg.count, size=cfg.size)
    fitted, trace = fit_head(weights, dataset, steps=cfg.steps, lr=cfg.lr)
    save_weights(fitted, cfg.out)
    return {
        "out": str(cfg.out),
        "steps": cfg.steps,
        "lr": cfg.lr,
        "samples": cfg.count,
        "initial_loss": trace[0],
        "final_loss": trace[-1],
        "trace": trace,
    }


def cmd_make_cache(cfg: RunConfig) -> dict:
    records = synth_cache(cfg.seed, cfg.count)
    write_cache(records, cfg.out)
    return {
        "out": str(cfg.out),
        "records": len(records),
        "bytes": os.path.getsize(cfg.out),
    }


def cmd_synth_data(cfg: RunConfig) -> dict:
    """Emit a self-consistent mini dataset: images, masks, COCO JSON, cache.

    The cache holds saturated teacher logits rendered from each ground-truth
    crop, so head fitting against this data has a consistent target. All
    bytes are a pure function of --seed and --count.
    """
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    prompt = PromptConfig()  # cache rasters are fixed at the 96 px net input
    images_json, annotations_json, records = [], [], []
    for i in range(cfg.count):
        image, gt, box = make_scene(rng)
        stem = f"{i + 1:03d}"
        write_ppm(out_dir / f"img_{stem}.ppm", image)
        mask = gt.data[0, 0].astype(np.uint8)
        write_mask_pgm(out_dir / f"mask_{stem}.pgm", mask)
        size, counts = encode_rle(mask)
        images_json.append({"id": i + 1, "file_name": f"img_{stem}.ppm",
                            "width": image.w, "height": image.h})
        annotations_json.append({
            "id": i + 1, "image_id": i + 1, "category_id": 1,
            "bbox": [box.x, box.y, box.w, box.h],
            "area": int(mask.sum()),
            "segmentation": {"size": list(size), "counts": list(counts)},
        })
        rect = make_square_roi(box, prompt, (image.w, image.h))
        gt_crop = crop_resize_mask(gt, rect, prompt.target_size)
        logits = (gt_crop.data * 2.0 - 1.0) * 4.0
        records.append(TeacherRecord(
            annotation_id=i + 1,
            logits=Tensor.from_array(logits),
            confidence=float(rng.uniform(0.6, 1.0)),
        ))
    doc = {
        "images": images_json,
        "annotations": annotations_json,
        "categories": [{"id": 1, "name": "shape"}],
    }
    ann_path = out_dir / "annotations.json"
    ann_path.write_text(_dump(doc), encoding="utf-8")
    cache_path = out_dir / "teacher.ptc1"
    write_cache(records, cache_path)
    return {
        "out": str(out_dir),
        "images": cfg.count,
        "annotations": str(ann_path),
        "cache": str(cache_path),
    }


_HANDLERS = {
    "infer": cmd_infer,
    "eval": cmd_eval,
    "quantize": cmd_quantize,
    "count": cmd_count,
    "fit-head": cmd_fit_head,
    "make-cache": cmd_make_cache,
    "synth-data": cmd_synth_data,
}

# subcommands whose --out redirects the JSON report itself
_REPORT_IS_ARTIFACT = {"eval", "count"}


# ------------------------------------------------------------- plumbing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="picoseg",
        description="Promptable in-sensor segmentation toolkit.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, help_text):
        p = sub.add_parser(
            name, help=help_text,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        return p

    p = add("infer", "segment one box prompt from an image")
    p.add_argument("--image", required=True, help="input image (PPM P6 or PNG)")
    p.add_argument("--bbox", required=True, help="prompt box as x,y,w,h")
    p.add_argument("--weights", help="float32 weight file (PSW1)")
    p.add_argument("--quant", help="int8 model file (PSQ1); overrides --weights")
    p.add_argument("--out", default="mask.pgm",
                   help="mask output path; a .json sidecar is written next to it")
    p.add_argument("--size", type=int, default=96, help="network input size")

    p = add("eval", "score a weight file against COCO-style annotations")
    p.add_argument("--ann", required=True, help="COCO-style annotation JSON")
    p.add_argument("--images-dir", required=True, help="directory of images")
    p.add_argument("--weights", help="float32 weight file (PSW1)")
    p.add_argument("--quant", help="int8 model file (PSQ1); overrides --weights")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")
    p.add_argument("--size", type=int, default=96, help="network input size")

    p = add("quantize", "calibrate and export an int8 model")
    p.add_argument("--weights", required=True, help="float32 weight file (PSW1)")
    p.add_argument("--out", default="model.psq1", help="int8 output path")
    p.add_argument("--batches", type=int, default=10,
                   help="synthetic calibration batch count")
    p.add_argument("--images-dir", default=None,
                   help="calibrate on these images instead of synthetic batches")
    p.add_argument("--seed", type=int, default=42, help="calibration seed")
    p.add_argument("--size", type=int, default=96, help="network input size")

    p = add("count", "report parameter/MAC counts and model file sizes")
    p.add_argument("--size", type=int, default=96, help="network input size")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")

    p = add("fit-head", "train the final 1x1 head on a synthetic dataset")
    p.add_argument("--weights", required=True, help="float32 weight file (PSW1)")
    p.add_argument("--out", default="fitted.psw1", help="updated weight output path")
    p.add_argument("--steps", type=int, default=200, help="optimizer steps")
    p.add_argument("--lr", type=float, default=3e-4, help="learning rate")
    p.add_argument("--seed", type=int, default=42, help="dataset seed")
    p.add_argument("--count", type=int, default=32, help="dataset sample count")
    p.add_argument("--size", type=int, default=96, help="network input size")

    p = add("make-cache", "write a synthetic teacher-logit cache (PTC1)")
    p.add_argument("--out", default="cache.ptc1", help="cache output path")
    p.add_argument("--seed", type=int, default=42, help="generator seed")
    p.add_argument("--count", type=int, default=32, help="record count")

    p = add("synth-data", "write images, masks, COCO JSON and a teacher cache")
    p.add_argument("--out", default="synth", help="output directory")
    p.add_argument("--seed", type=int, default=42, help="generator seed")
    p.add_argument("--count", type=int, default=32, help="scene count")

    return parser


def _configure_logging():
    name = os.environ.get("PICOSEG_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if name not in levels:
        print(f"picoseg: unknown PICOSEG_LOG value {name!r}; using 'error'",
              file=sys.stderr)
    logging.basicConfig(level=levels.get(name, logging.ERROR),
                        stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    fields = {}
    for name in ("weights", "quant", "image", "ann", "out", "seed", "size",
                 "steps", "lr", "batches", "count"):
        if hasattr(args, name):
            fields[name] = getattr(args, name)
    if hasattr(args, "images_dir"):
        fields["images_dir"] = args.images_dir
    if hasattr(args, "bbox"):
        fields["bbox"] = _parse_bbox(args.bbox)
    return RunConfig(subcommand=args.subcommand, **fields)


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = run_config_from_args(args)
        report = _HANDLERS[cfg.subcommand](cfg)
        if cfg.subcommand in _REPORT_IS_ARTIFACT and cfg.out is not None:
            Path(cfg.out).write_text(_dump(report), encoding="utf-8")
        else:
            sys.stdout.write(_dump(report))
    except tuple(kind for kind, _ in _ERROR_CLASSES) as exc:
        log.debug("command failed", exc_info=True)
        sys.stderr.write(_dump({"error": {
            "class": error_class(exc),
            "message": str(exc),
        }}))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
