"""Pixel-file IO: binary PPM (P6) in/out, binary PGM (P5) for masks, and a
PNG read path that is used only when Pillow is importable.

Images travel as (1, 3, H, W) float32 tensors with values in [0, 1]; masks
are plain (H, W) uint8 arrays. Writers emit deterministic bytes so fixture
files can be compared with ==.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .tensorkit import Tensor


class ImageFormatError(Exception):
    """Raised when a pixel file cannot be parsed or written."""


_WHITESPACE = b" \t\n\r\v\f"


def _next_token(f) -> bytes:
    """Next ASCII header token; skips whitespace and '#'-to-newline comments."""
    token = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            if token:
                return token
            raise ImageFormatError("file ended inside the header")
        if ch == b"#":
            # A comment also terminates a token and counts as its whitespace.
            while ch not in (b"", b"\n", b"\r"):
                ch = f.read(1)
            if token:
                return token
            continue
        if ch in _WHITESPACE:
            if token:
                return token
            continue
        token += ch


def _int_token(f, what: str) -> int:
    token = _next_token(f)
    try:
        value = int(token)
    except ValueError:
        raise ImageFormatError(f"{what} is not a decimal integer: {token!r}") from None
    if value <= 0:
        raise ImageFormatError(f"{what} must be positive, got {value}")
    return value


def _read_header(f, magic: bytes) -> tuple[int, int, int]:
    got = f.read(2)
    if got != magic:
        raise ImageFormatError(f"expected magic {magic.decode()}, got {got!r}")
    width = _int_token(f, "width")
    height = _int_token(f, "height")
    maxval = _int_token(f, "maxval")
    if maxval > 65535:
        raise ImageFormatError(f"maxval {maxval} exceeds the format limit 65535")
    return width, height, maxval


def _parse_p6(f) -> Tensor:
    width, height, maxval = _read_header(f, b"P6")
    per_sample = 2 if maxval > 255 else 1
    need = width * height * 3 * per_sample
    raw = f.read(need)
    if len(raw) < need:
        raise ImageFormatError(
            f"raster truncated: expected {need} bytes, found {len(raw)}"
        )
    dtype = ">u2" if per_sample == 2 else np.uint8
    flat = np.frombuffer(raw, dtype=dtype).astype(np.float32) / float(maxval)
    arr = flat.reshape(height, width, 3).transpose(2, 0, 1)[None]
    return Tensor.from_array(arr)


def read_ppm(path: str | Path) -> Tensor:
    """Read a binary P6 file into a (1, 3, H, W) tensor scaled to [0, 1]."""
    with open(path, "rb") as f:
        return _parse_p6(f)


def write_ppm(path: str | Path, image: Tensor) -> None:
    """Write a (1, 3, H, W) tensor as binary P6; values are clipped to [0, 1]."""
    if image.n != 1 or image.c != 3:
        raise ImageFormatError(f"expected (1, 3, H, W) image, got {image.shape}")
    scaled = np.clip(np.rint(image.data[0] * 255.0), 0.0, 255.0).astype(np.uint8)
    raster = scaled.transpose(1, 2, 0)  # HWC byte order
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (image.w, image.h))
        f.write(np.ascontiguousarray(raster).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary P5 file into an (H, W) uint8 array (maxval must be <= 255)."""
    with open(path, "rb") as f:
        width, height, maxval = _read_header(f, b"P5")
        if maxval > 255:
            raise ImageFormatError("16-bit graymaps are not supported")
        need = width * height
        raw = f.read(need)
    if len(raw) < need:
        raise ImageFormatError(
            f"raster truncated: expected {need} bytes, found {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary P5 with maxval 255."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ImageFormatError(
            f"expected 2-D uint8 array, got shape {gray.shape} dtype {gray.dtype}"
        )
    height, width = gray.shape
    if height < 1 or width < 1:
        raise ImageFormatError(f"empty raster {gray.shape}")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (width, height))
        f.write(np.ascontiguousarray(gray).tobytes())


def write_mask_pgm(path: str | Path, mask: np.ndarray) -> None:
    """Write a {0, 1} mask as a viewable P5 file (foreground stored as 255)."""
    mask = np.asarray(mask)
    if not np.all(np.isin(mask, (0, 1))):
        raise ImageFormatError("mask values must be 0 or 1")
    write_pgm(path, (mask.astype(np.uint8) * 255))


def read_mask_pgm(path: str | Path) -> np.ndarray:
    """Read a P5 mask back to {0, 1}; any nonzero sample counts as foreground."""
    return (read_pgm(path) > 0).astype(np.uint8)


def read_png(path: str | Path) -> Tensor:
    """Read a PNG via Pillow when installed; otherwise a clear error."""
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImageFormatError(
            "PNG input needs the Pillow package; install it or convert to PPM"
        ) from exc
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise ImageFormatError(f"cannot decode PNG: {exc}") from exc
    return Tensor.from_array(arr.transpose(2, 0, 1)[None])


def read_image(path: str | Path) -> Tensor:
    """Read an image by sniffing its magic bytes (P6 always, PNG when available)."""
    try:
        with open(path, "rb") as f:
            magic = f.read(2)
    except OSError as exc:
        raise ImageFormatError(f"cannot open image: {exc}") from exc
    if magic == b"P6":
        return read_ppm(path)
    if magic == b"\x89P":
        return read_png(path)
    raise ImageFormatError(
        f"unsupported image format (magic {magic!r}); expected P6 or PNG"
    )


def decode_image(data: bytes) -> Tensor:
    """Decode in-memory image bytes with the same dispatch as `read_image`."""
    if not data:
        raise ImageFormatError("empty image payload")
    if data[:2] == b"P6":
        return _parse_p6(io.BytesIO(data))
    if data[:2] == b"\x89P":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ImageFormatError(
                "PNG input needs the Pillow package; install it or convert to PPM"
            ) from exc
        try:
            with Image.open(io.BytesIO(data)) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise ImageFormatError(f"cannot decode PNG: {exc}") from exc
        return Tensor.from_array(arr.transpose(2, 0, 1)[None])
    raise ImageFormatError(
        f"unsupported image format (magic {data[:2]!r}); expected P6 or PNG"
    )
