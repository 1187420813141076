"""Box-prompt geometry: padded square crop windows, crop/resize sampling,
display-to-sensor coordinate transforms and output-mask post-processing.

A prompt box [x, y, w_b, h_b] is padded by a ratio p on each side, squared to
s = max(w', h'), centered on the box center and clamped to the image; the crop
is resized to S x S (bilinear for images, nearest for masks).  Coordinates
stay float until rasterization: pixel bounds are floor(x1)/ceil(x2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensorkit import Tensor


class RoiError(ValueError):
    """Invalid prompt box or crop window."""


@dataclass(frozen=True)
class BBox:
    """COCO-style box: top-left corner plus width/height, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise RoiError(f"box width/height must be > 0, got {self.w}x{self.h}")


@dataclass(frozen=True)
class CropRect:
    """Crop window [x1, x2) x [y1, y2) within a source image of extent (W, H)."""

    x1: float
    y1: float
    x2: float
    y2: float
    src_w: int
    src_h: int

    def __post_init__(self):
        if not (0 <= self.x1 < self.x2 <= self.src_w):
            raise RoiError(f"x range [{self.x1}, {self.x2}] invalid for W={self.src_w}")
        if not (0 <= self.y1 < self.y2 <= self.src_h):
            raise RoiError(f"y range [{self.y1}, {self.y2}] invalid for H={self.src_h}")

    def pixel_bounds(self) -> tuple[int, int, int, int]:
        """Integer bounds used at extraction: floor the near corner, ceil the far."""
        return (int(math.floor(self.x1)), int(math.floor(self.y1)),
                int(math.ceil(self.x2)), int(math.ceil(self.y2)))

    def pixel_size(self) -> tuple[int, int]:
        """(height, width) of the rasterized crop."""
        ix1, iy1, ix2, iy2 = self.pixel_bounds()
        return iy2 - iy1, ix2 - ix1


@dataclass(frozen=True)
class PromptConfig:
    padding: float = 0.1
    target_size: int = 96

    def __post_init__(self):
        if self.padding < 0:
            raise RoiError("padding ratio must be >= 0")
        if self.target_size < 8:
            raise RoiError("target size must be >= 8")


def make_square_roi(box: BBox, cfg: PromptConfig,
                    image_extent: tuple[int, int]) -> CropRect:
    """Derive the square (clamp-truncated) crop window for a prompt box.

    w' = w(1+2p), h' = h(1+2p), s = max(w', h'); the square of side s is
    centered on the box center and each coordinate is clamped to the image.
    The result is non-square only when clamping trims it.
    """
    img_w, img_h = image_extent
    if img_w <= 0 or img_h <= 0:
        raise RoiError(f"image extent must be positive, got {image_extent}")
    if box.x >= img_w or box.y >= img_h or box.x + box.w <= 0 or box.y + box.h <= 0:
        raise RoiError("box lies fully outside the image")

    wp = box.w * (1.0 + 2.0 * cfg.padding)
    hp = box.h * (1.0 + 2.0 * cfg.padding)
    s = max(wp, hp)
    cx = box.x + box.w / 2.0
    cy = box.y + box.h / 2.0
    x1 = cx - s / 2.0
    y1 = cy - s / 2.0
    x2 = x1 + s
    y2 = y1 + s

    x1 = max(0.0, x1)
    y1 = max(0.0, y1)
    x2 = min(float(img_w), x2)
    y2 = min(float(img_h), y2)
    if not (x2 > x1 and y2 > y1):
        raise RoiError("crop window degenerates to zero area after clamping")
    return CropRect(x1=x1, y1=y1, x2=x2, y2=y2, src_w=img_w, src_h=img_h)


def _sample_positions(src: int, dst: int) -> np.ndarray:
    # Center-sampling convention (align-corners=false): scale = src / dst.
    scale = src / dst
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    return np.clip(pos, 0.0, src - 1)


def _nearest_indices(src: int, dst: int) -> np.ndarray:
    pos = _sample_positions(src, dst)
    return np.clip(np.floor(pos + 0.5).astype(np.int64), 0, src - 1)


def _bilinear_resize(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    src_h, src_w = plane.shape
    ys = _sample_positions(src_h, out_h)
    xs = _sample_positions(src_w, out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    p = plane.astype(np.float64)
    top = p[np.ix_(y0, x0)] * (1 - fx) + p[np.ix_(y0, x1)] * fx
    bot = p[np.ix_(y1, x0)] * (1 - fx) + p[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def crop_resize_image(image: Tensor, rect: CropRect, size: int) -> Tensor:
    """Extract `rect` from a (1, 3, H, W) image and bilinearly resize to size^2."""
    if image.n != 1 or image.c != 3:
        raise RoiError(f"expected (1, 3, H, W) image, got {image.shape}")
    if image.w != rect.src_w or image.h != rect.src_h:
        raise RoiError("crop window was built for a different image extent")
    ix1, iy1, ix2, iy2 = rect.pixel_bounds()
    crop = image.data[0, :, iy1:iy2, ix1:ix2]
    out = np.empty((1, 3, size, size), dtype=np.float32)
    for ch in range(3):
        out[0, ch] = _bilinear_resize(crop[ch], size, size).astype(np.float32)
    return Tensor.from_array(out)


def crop_resize_mask(mask: Tensor, rect: CropRect, size: int) -> Tensor:
    """Extract `rect` from a (1, 1, H, W) binary mask; nearest-neighbor resize."""
    if mask.n != 1 or mask.c != 1:
        raise RoiError(f"expected (1, 1, H, W) mask, got {mask.shape}")
    vals = np.unique(mask.data)
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise RoiError("mask must be binary (values in {0, 1})")
    ix1, iy1, ix2, iy2 = rect.pixel_bounds()
    crop = mask.data[0, 0, iy1:iy2, ix1:ix2]
    yi = _nearest_indices(crop.shape[0], size)
    xi = _nearest_indices(crop.shape[1], size)
    out = crop[np.ix_(yi, xi)][None, None]
    return Tensor.from_array(out)


def display_to_sensor(box: BBox, display: tuple[int, int],
                      sensor: tuple[int, int]) -> BBox:
    """Rescale a display-space box into sensor-space pixels (float, no rounding)."""
    dw, dh = display
    sw, sh = sensor
    if dw <= 0 or dh <= 0 or sw <= 0 or sh <= 0:
        raise RoiError("display and sensor extents must be positive")
    if box.x < 0 or box.y < 0 or box.x + box.w > dw or box.y + box.h > dh:
        raise RoiError("box must lie within the display extent")
    return BBox(x=box.x * sw / dw, y=box.y * sh / dh,
                w=box.w * sw / dw, h=box.h * sh / dh)


def postprocess_mask(logits: Tensor, rect: CropRect) -> np.ndarray:
    """Binarize logits at > 0 (strict) and nearest-resize to the crop's pixel size.

    Returns a (h, w) uint8 array of {0, 1}.
    """
    if logits.n != 1 or logits.c != 1:
        raise RoiError(f"expected (1, 1, S, S) logits, got {logits.shape}")
    binary = (logits.data[0, 0] > 0.0).astype(np.uint8)
    out_h, out_w = rect.pixel_size()
    yi = _nearest_indices(binary.shape[0], out_h)
    xi = _nearest_indices(binary.shape[1], out_w)
    return binary[np.ix_(yi, xi)]
