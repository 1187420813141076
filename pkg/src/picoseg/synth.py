"""Synthetic scenes: bright geometric shapes on dark textured backgrounds,
with matching binary masks and stand-in teacher logit maps.

Everything here is a pure function of the seed, so fixtures, calibration
batches and training sets are reproducible byte for byte.
"""

from __future__ import annotations

import numpy as np

from .distill import TeacherRecord
from .roi import BBox
from .tensorkit import Tensor


def _shape_sdf(rng: np.random.Generator, side_x: int, side_y: int,
               *, centered: bool) -> np.ndarray:
    """Signed distance (positive inside) of a random disc or axis box."""
    yy, xx = np.mgrid[0:side_y, 0:side_x].astype(np.float64)
    xx += 0.5
    yy += 0.5
    span = min(side_x, side_y)
    if centered:
        cx = rng.uniform(0.44, 0.56) * side_x
        cy = rng.uniform(0.44, 0.56) * side_y
    else:
        cx = rng.uniform(0.30, 0.70) * side_x
        cy = rng.uniform(0.30, 0.70) * side_y
    if rng.uniform() < 0.5:
        radius = rng.uniform(0.26, 0.40) * span
        return radius - np.hypot(xx - cx, yy - cy)
    hx = rng.uniform(0.22, 0.38) * span
    hy = rng.uniform(0.22, 0.38) * span
    return np.minimum(hx - np.abs(xx - cx), hy - np.abs(yy - cy))


def _render(rng: np.random.Generator, sdf: np.ndarray) -> np.ndarray:
    """Paint a (3, H, W) float image: bright fill inside, dark noise outside."""
    h, w = sdf.shape
    coverage = 1.0 / (1.0 + np.exp(-np.clip(sdf, -30, 30)))  # ~1px soft edge
    fg = rng.uniform(0.65, 0.95, size=3)
    bg = rng.uniform(0.05, 0.25, size=3)
    # gentle illumination ramp so backgrounds are not constant
    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    ramp = gx * (np.arange(w) / w)[None, :] + gy * (np.arange(h) / h)[:, None]
    img = np.empty((3, h, w), dtype=np.float64)
    for c in range(3):
        img[c] = bg[c] + (fg[c] - bg[c]) * coverage + ramp
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_sample(rng: np.random.Generator, annotation_id: int, size: int = 96):
    """One training triple at network resolution: (image, TeacherRecord, gt).

    The teacher logit map comes from a slightly jittered copy of the true
    shape, imitating an imperfect but confident upstream predictor.
    """
    sdf = _shape_sdf(rng, size, size, centered=True)
    gt = (sdf > 0).astype(np.float32)
    image = _render(rng, sdf)

    jitter = np.random.default_rng(rng.integers(0, 2**63))
    dx, dy = jitter.uniform(-1.5, 1.5, size=2)
    grow = jitter.uniform(0.97, 1.03)
    shifted = np.roll(np.roll(sdf * grow, round(dy), axis=0), round(dx), axis=1)
    logits = np.clip(0.4 * shifted, -8.0, 8.0).astype(np.float32)

    record = TeacherRecord(
        annotation_id=annotation_id,
        logits=Tensor.from_array(logits[None, None]),
        confidence=float(jitter.uniform(0.6, 1.0)),
    )
    return (Tensor.from_array(image[None]), record,
            Tensor.from_array(gt[None, None]))


def make_shape_dataset(seed: int, n: int, size: int = 96):
    """n seeded (image, TeacherRecord, gt_mask) triples at `size` resolution."""
    rng = np.random.default_rng(seed)
    return [make_sample(rng, i + 1, size) for i in range(n)]


def make_calibration_batches(seed: int, count: int, size: int = 96):
    """Representative input images for activation-range calibration."""
    rng = np.random.default_rng(seed)
    batches = []
    for _ in range(count):
        sdf = _shape_sdf(rng, size, size, centered=True)
        batches.append(Tensor.from_array(_render(rng, sdf)[None]))
    return batches


def make_scene(rng: np.random.Generator, width: int = 128, height: int = 96):
    """A full scene for the prompt pipeline: (image, gt_mask, tight bbox).

    The shape sits anywhere in the frame; the bbox is the tight bounds of the
    rasterized mask, which is what a user drag would roughly select.
    """
    sdf = _shape_sdf(rng, width, height, centered=False)
    gt = (sdf > 0).astype(np.float32)
    if gt.sum() == 0:  # extreme jitter could starve the raster; recenter
        return make_scene(rng, width, height)
    image = _render(rng, sdf)
    rows = np.flatnonzero(gt.any(axis=1))
    cols = np.flatnonzero(gt.any(axis=0))
    box = BBox(x=float(cols[0]), y=float(rows[0]),
               w=float(cols[-1] - cols[0] + 1), h=float(rows[-1] - rows[0] + 1))
    return Tensor.from_array(image[None]), Tensor.from_array(gt[None, None]), box
