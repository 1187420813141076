"""Pixel-file IO: header parsing, round trips, and byte determinism."""

import numpy as np
import pytest

from picoseg.imgio import (ImageFormatError, decode_image, read_image,
                           read_mask_pgm, read_pgm, read_png, read_ppm,
                           write_mask_pgm, write_pgm, write_ppm)
from picoseg.tensorkit import Tensor


def rand_image(rng, h, w):
    return Tensor.from_array(rng.random((1, 3, h, w), dtype=np.float32))


# ----------------------------------------------------------------- ppm

def test_ppm_round_trip_error_within_half_step(tmp_path):
    rng = np.random.default_rng(5)
    img = rand_image(rng, 13, 9)
    path = tmp_path / "a.ppm"
    write_ppm(path, img)
    back = read_ppm(path)
    assert back.shape == img.shape
    # one byte of quantization is the only loss allowed
    assert np.max(np.abs(back.data - img.data)) <= 0.5 / 255.0 + 1e-6


def test_ppm_grid_values_round_trip_exactly(tmp_path):
    rng = np.random.default_rng(6)
    raw = rng.integers(0, 256, size=(1, 3, 7, 11), dtype=np.uint8)
    img = Tensor.from_array(raw.astype(np.float32) / 255.0)
    path = tmp_path / "grid.ppm"
    write_ppm(path, img)
    assert np.array_equal(read_ppm(path).data, img.data)


def test_ppm_write_is_deterministic(tmp_path):
    img = rand_image(np.random.default_rng(7), 8, 8)
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    write_ppm(a, img)
    write_ppm(b, img)
    assert a.read_bytes() == b.read_bytes()


def test_ppm_write_clips_out_of_range(tmp_path):
    arr = np.zeros((1, 3, 1, 2), dtype=np.float32)
    arr[0, :, 0, 0] = -0.25
    arr[0, :, 0, 1] = 1.75
    path = tmp_path / "clip.ppm"
    write_ppm(path, Tensor.from_array(arr))
    back = read_ppm(path).data
    assert np.all(back[0, :, 0, 0] == 0.0)
    assert np.all(back[0, :, 0, 1] == 1.0)


def test_ppm_header_tolerates_comments_and_whitespace(tmp_path):
    raster = bytes(range(2 * 3 * 3))
    blob = b"P6 # magic line\n# full comment line\n  2\t3 # extent\n255\n" + raster
    path = tmp_path / "c.ppm"
    path.write_bytes(blob)
    img = read_ppm(path)
    assert (img.h, img.w) == (3, 2)
    expected = (np.frombuffer(raster, dtype=np.uint8)
                .astype(np.float32) / 255.0).reshape(3, 2, 3).transpose(2, 0, 1)
    assert np.array_equal(img.data[0], expected)


def test_ppm_comment_directly_after_maxval(tmp_path):
    path = tmp_path / "d.ppm"
    path.write_bytes(b"P6\n1 1\n255# trailing\n" + b"\x10\x20\x30")
    img = read_ppm(path)
    assert img.data[0, 1, 0, 0] == np.float32(0x20 / 255.0)


def test_ppm_sixteen_bit_samples_scale_by_maxval(tmp_path):
    samples = np.array([0, 32768, 65535], dtype=">u2")
    path = tmp_path / "wide.ppm"
    path.write_bytes(b"P6\n1 1\n65535\n" + samples.tobytes())
    img = read_ppm(path)
    expected = samples.astype(np.float32) / 65535.0
    assert np.array_equal(img.data[0, :, 0, 0], expected)
    assert img.data[0, 2, 0, 0] == 1.0


@pytest.mark.parametrize("blob", [
    b"P5\n1 1\n255\n\x00",                      # wrong magic for an image read
    b"P6\n0 1\n255\n",                          # zero width
    b"P6\n1 1\n70000\n" + bytes(6),             # maxval beyond format limit
    b"P6\nab 1\n255\n\x00\x00\x00",             # non-numeric width
    b"P6\n2 2\n255\n" + bytes(5),               # truncated raster
    b"P6\n2 2",                                 # header ends early
])
def test_ppm_rejects_malformed_files(tmp_path, blob):
    path = tmp_path / "bad.ppm"
    path.write_bytes(blob)
    with pytest.raises(ImageFormatError):
        read_ppm(path)


def test_write_ppm_rejects_non_rgb():
    with pytest.raises(ImageFormatError):
        write_ppm("/dev/null", Tensor.zeros((1, 1, 4, 4)))


# ----------------------------------------------------------------- pgm

def test_pgm_round_trip_exact(tmp_path):
    rng = np.random.default_rng(8)
    gray = rng.integers(0, 256, size=(6, 10), dtype=np.uint8)
    path = tmp_path / "g.pgm"
    write_pgm(path, gray)
    assert np.array_equal(read_pgm(path), gray)


def test_pgm_rejects_wrong_dtype_and_rank():
    with pytest.raises(ImageFormatError):
        write_pgm("/dev/null", np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(ImageFormatError):
        write_pgm("/dev/null", np.zeros((1, 4, 4), dtype=np.uint8))


def test_pgm_rejects_sixteen_bit(tmp_path):
    path = tmp_path / "wide.pgm"
    path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(ImageFormatError):
        read_pgm(path)


def test_mask_pgm_round_trip_and_bytes(tmp_path):
    rng = np.random.default_rng(9)
    mask = (rng.random((5, 7)) < 0.4).astype(np.uint8)
    path = tmp_path / "m.pgm"
    write_mask_pgm(path, mask)
    assert np.array_equal(read_mask_pgm(path), mask)
    # foreground is stored at full brightness so the file is viewable
    raw = read_pgm(path)
    assert set(np.unique(raw)) <= {0, 255}


def test_mask_pgm_rejects_non_binary():
    with pytest.raises(ImageFormatError):
        write_mask_pgm("/dev/null", np.full((2, 2), 3, dtype=np.uint8))


# ----------------------------------------------------------------- png

def test_png_round_trip_via_pillow(tmp_path):
    PIL = pytest.importorskip("PIL.Image")
    rng = np.random.default_rng(10)
    raw = rng.integers(0, 256, size=(9, 6, 3), dtype=np.uint8)
    path = tmp_path / "p.png"
    PIL.fromarray(raw, mode="RGB").save(path)
    img = read_png(path)
    assert img.shape == (1, 3, 9, 6)
    assert np.array_equal(img.data[0], raw.astype(np.float32).transpose(2, 0, 1) / 255.0)


def test_png_rejects_corrupt_body(tmp_path):
    pytest.importorskip("PIL.Image")
    path = tmp_path / "bad.png"
    path.write_bytes(b"\x89PNG\r\n\x1a\n" + b"garbage" * 4)
    with pytest.raises(ImageFormatError):
        read_png(path)


# ----------------------------------------------------------------- sniffing

def test_read_image_dispatches_on_magic(tmp_path):
    img = rand_image(np.random.default_rng(11), 4, 4)
    ppm = tmp_path / "x.ppm"
    write_ppm(ppm, img)
    assert np.array_equal(read_image(ppm).data, read_ppm(ppm).data)

    PIL = pytest.importorskip("PIL.Image")
    raw = np.zeros((2, 2, 3), dtype=np.uint8)
    png = tmp_path / "x.png"
    PIL.fromarray(raw, mode="RGB").save(png)
    assert np.array_equal(read_image(png).data, read_png(png).data)


def test_read_image_rejects_unknown_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"GIF89a")
    with pytest.raises(ImageFormatError):
        read_image(path)


def test_read_image_missing_file():
    with pytest.raises(ImageFormatError):
        read_image("/nonexistent/image.ppm")


def test_decode_image_matches_file_reader(tmp_path):
    img = rand_image(np.random.default_rng(12), 5, 6)
    ppm = tmp_path / "x.ppm"
    write_ppm(ppm, img)
    assert np.array_equal(decode_image(ppm.read_bytes()).data,
                          read_ppm(ppm).data)

    PIL = pytest.importorskip("PIL.Image")
    raw = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    png = tmp_path / "x.png"
    PIL.fromarray(raw, mode="RGB").save(png)
    assert np.array_equal(decode_image(png.read_bytes()).data,
                          read_png(png).data)


def test_decode_image_rejects_empty_and_unknown():
    with pytest.raises(ImageFormatError, match="empty"):
        decode_image(b"")
    with pytest.raises(ImageFormatError):
        decode_image(b"BM....bitmap")
