"""INT8 post-training quantization: observers, codecs, and an integer path.

Weights are quantized symmetrically per output channel (zero-points pinned at
0, codes clamped to [-127, 127] so negation stays exact); activations use one
affine (scale, zero-point) pair per recorded site, calibrated from running
min/max over representative forward passes.  The quantized executor
accumulates int8 x int8 products in 32-bit integers and requantizes between
sites with a float multiplier; the final head output is returned as float
logits without an output grid.

Quantized models live in PSQ1 files (little-endian): magic "PSQ1", format
version u32, spec fingerprint u64, activation-site count u32, then per site a
u16 name length + UTF-8 name, scale f32 and zero-point i32; then layer count
u32 and per layer a u16 name length + UTF-8 name, channel count u32, that many
f32 scales, and the raw int8 payload.  The file carries no tensor extents, so
reading one back requires the architecture spec.

Bias vectors ride in the same per-layer framing with one "channel" per
element: the scale is the bias magnitude (1.0 for zeros) and the code is its
sign, which reproduces every float bias exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .net import (
    BadMagicError,
    ConvStep,
    CatStep,
    EcaStep,
    NetSpec,
    StoreMismatchError,
    TruncatedFileError,
    UpStep,
    WeightFileError,
    WeightStore,
    build_plan,
    expected_shapes,
    forward,
)
from .tensorkit import ShapeError, Tensor, _sigmoid_stable

PSQ1_MAGIC = b"PSQ1"
PSQ1_VERSION = 1

QMIN, QMAX = -128, 127
WMAX = 127  # weight codes clamp at -127 for sign symmetry


class QuantizationError(Exception):
    """Invalid quantization inputs (non-finite weights, missing sites...)."""


def round_half_away(x):
    """Round to nearest integer, ties away from zero, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class ActQuant:
    """Affine activation grid: real = scale * (code - zero_point)."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise QuantizationError(f"activation scale must be > 0, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise QuantizationError(
                f"zero-point {self.zero_point} outside [{QMIN}, {QMAX}]")


@dataclass(frozen=True)
class QuantParams:
    """Per-channel weight scales plus per-site activation grids.

    `quantize_weights` fills only the weight half and `calibrate` only the
    activation half; `merged` stitches the two for the executor.
    """

    weight_scales: dict[str, np.ndarray] = field(default_factory=dict)
    act_scales: dict[str, ActQuant] = field(default_factory=dict)

    def __post_init__(self):
        for name, scales in self.weight_scales.items():
            arr = np.asarray(scales)
            if arr.ndim != 1 or not np.all(arr > 0):
                raise QuantizationError(f"weight scales for {name!r} must be positive")

    def merged(self, other: "QuantParams") -> "QuantParams":
        return QuantParams(
            weight_scales={**self.weight_scales, **other.weight_scales},
            act_scales={**self.act_scales, **other.act_scales},
        )


@dataclass
class Int8Store:
    """Integer codes for every parameter tensor of a spec."""

    spec: NetSpec
    codes: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = expected_shapes(self.spec)
        for name, shape in expected.items():
            if name not in self.codes:
                raise StoreMismatchError(f"missing quantized tensor {name!r}")
            arr = self.codes[name]
            if arr.dtype != np.int8:
                raise StoreMismatchError(f"tensor {name!r} must be int8")
            if tuple(arr.shape) != shape:
                raise StoreMismatchError(
                    f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        extra = set(self.codes) - set(expected)
        if extra:
            raise StoreMismatchError(f"unexpected quantized tensors {sorted(extra)}")


def _channel_count(name: str, shape: tuple[int, ...]) -> int:
    """How many quantization channels a parameter tensor carries."""
    if name.endswith(".bias"):
        return shape[0]  # per-element, so biases survive exactly
    if name == "eca.kernel":
        return 1
    return shape[0]  # conv kernels: per output channel


def quantize_channels(w: np.ndarray):
    """Symmetric quantization along the first axis: (codes, scales).

    Per channel the scale is max|w| / 127 (all-zero channels get scale 1) and
    codes are round-half-away-from-zero of w / scale, clamped to [-127, 127].
    Codes derive from the float32 scale that gets stored, so the half-step
    dequantization bound holds against the stored value.
    """
    w = np.asarray(w, dtype=np.float64)
    flat = w.reshape(w.shape[0], -1)
    s = np.max(np.abs(flat), axis=1) / WMAX
    s[s == 0.0] = 1.0
    s = s.astype(np.float32).astype(np.float64)
    q = np.clip(round_half_away(flat / s[:, None]), -WMAX, WMAX)
    return q.reshape(w.shape).astype(np.int8), s.astype(np.float32)


def quantize_weights(store: WeightStore):
    """Symmetric per-channel weight quantization over a whole store.

    Returns (Int8Store, QuantParams with the weight scales).  Conv kernels
    quantize per output channel and the attention kernel as one channel;
    biases get one channel per element (scale |b|, code sign), which is
    lossless.
    """
    codes: dict[str, np.ndarray] = {}
    scales: dict[str, np.ndarray] = {}
    for name, arr in store.tensors.items():
        if not np.all(np.isfinite(arr)):
            raise QuantizationError(f"non-finite weight in {name!r}")
        if name.endswith(".bias"):
            w = arr.astype(np.float64)
            s = np.abs(w)
            s[s == 0.0] = 1.0
            codes[name] = np.sign(w).astype(np.int8)
            scales[name] = s.astype(np.float32)
        elif name == "eca.kernel":
            q, s = quantize_channels(arr[None])
            codes[name], scales[name] = q[0], s
        else:
            codes[name], scales[name] = quantize_channels(arr)
    return Int8Store(spec=store.spec, codes=codes), QuantParams(weight_scales=scales)


def dequantize_weights(qstore: Int8Store, params: QuantParams) -> WeightStore:
    """Reconstruct a float store (scale * code per channel)."""
    tensors: dict[str, np.ndarray] = {}
    for name, q in qstore.codes.items():
        if name not in params.weight_scales:
            raise QuantizationError(f"no weight scales for {name!r}")
        s = params.weight_scales[name].astype(np.float64)
        if name.endswith(".bias"):
            w = s * q.astype(np.float64)
        else:
            flat = q.reshape(_channel_count(name, q.shape), -1).astype(np.float64)
            w = (flat * s[:, None]).reshape(q.shape)
        tensors[name] = w.astype(np.float32)
    return WeightStore(spec=qstore.spec, tensors=tensors)


# ------------------------------------------------------------- activations

def quantize_activation(real: np.ndarray, ap: ActQuant) -> np.ndarray:
    """Float array -> int8 codes on the site's affine grid."""
    q = round_half_away(np.asarray(real, dtype=np.float64) / ap.scale) + ap.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize_activation(q: np.ndarray, ap: ActQuant) -> np.ndarray:
    """Int8 codes -> float64 reals."""
    return (q.astype(np.float64) - ap.zero_point) * ap.scale


def act_quant_from_range(lo: float, hi: float) -> ActQuant:
    """Observed [lo, hi] -> the affine int8 grid covering it.

    Scale is (hi - lo) / 255 (clamped to float32 up front so the serialized
    grid is the grid actually used) and the zero-point shifts lo onto -128;
    a degenerate constant range gets the (1, 0) fallback grid.
    """
    if hi < lo:
        raise QuantizationError(f"empty activation range [{lo}, {hi}]")
    span = hi - lo
    if span == 0.0:
        return ActQuant(scale=1.0, zero_point=0)
    scale = float(np.float32(span / 255.0))
    zp = int(round_half_away(-lo / scale)) - 128
    return ActQuant(scale=scale, zero_point=max(QMIN, min(QMAX, zp)))


def calibrate(weights: WeightStore, batches) -> QuantParams:
    """Min/max observation over FP forwards of the calibration batches.

    Records every activation site the executor can consume: the input, every
    step output, and the pooled attention vector.
    """
    batches = list(batches)
    if not batches:
        raise QuantizationError("calibration set is empty")
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}

    def observe(site: str, t: Tensor):
        lo[site] = min(lo.get(site, np.inf), float(t.data.min()))
        hi[site] = max(hi.get(site, -np.inf), float(t.data.max()))

    for x in batches:
        forward(weights, x, tap=observe)
    return QuantParams(act_scales={
        site: act_quant_from_range(lo[site], hi[site]) for site in lo
    })


def quantize(store: WeightStore, batches):
    """The full PTQ pipeline: weights + calibration in one call."""
    qstore, wparams = quantize_weights(store)
    aparams = calibrate(store, batches)
    return qstore, wparams.merged(aparams)


# ---------------------------------------------------------------- executor

def _site_params(params: QuantParams, site: str) -> ActQuant:
    try:
        return params.act_scales[site]
    except KeyError:
        raise QuantizationError(
            f"no activation parameters for site {site!r}; recalibrate"
        ) from None


def int8_conv(xq: np.ndarray, zero_point: int, codes: np.ndarray,
              stride: int = 1, padding: int = 0, dilation: int = 1,
              groups: int = 1) -> np.ndarray:
    """Integer convolution core: int32 accumulator of int8 x int8 products.

    `xq` is (1, C, H, W) int8 on an affine grid; the zero-point is subtracted
    before accumulation so padded positions contribute true zero.  Returns the
    raw (1, O, Ho, Wo) int32 accumulator (no scales, no bias).
    """
    _, cin, h, w = xq.shape
    cout, cin_g, kh, kw = codes.shape
    x32 = xq.astype(np.int32) - np.int32(zero_point)
    if padding:
        x32 = np.pad(x32, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span_h = (kh - 1) * dilation + 1
    span_w = (kw - 1) * dilation + 1
    ho = (h + 2 * padding - span_h) // stride + 1
    wo = (w + 2 * padding - span_w) // stride + 1
    w32 = codes.astype(np.int32)
    acc = np.zeros((1, cout, ho, wo), dtype=np.int32)
    depthwise = groups == cin and groups == cout and cin_g == 1
    ocg = cout // groups
    for ky in range(kh):
        for kx in range(kw):
            y0, x0 = ky * dilation, kx * dilation
            xs = x32[:, :, y0:y0 + stride * ho:stride, x0:x0 + stride * wo:stride]
            if depthwise:
                acc += w32[:, 0, ky, kx][None, :, None, None] * xs
            else:
                for g in range(groups):
                    wg = w32[g * ocg:(g + 1) * ocg, :, ky, kx]  # (ocg, cin_g)
                    xg = xs[0, g * cin_g:(g + 1) * cin_g].reshape(cin_g, -1)
                    acc[0, g * ocg:(g + 1) * ocg] += (wg @ xg).reshape(ocg, ho, wo)
    return acc


def quantized_forward(qstore: Int8Store, params: QuantParams, x: Tensor) -> Tensor:
    """Run the network on the integer path; returns float32 logits.

    Convolutions accumulate in int32 and requantize to the next site's grid
    (ReLU applied on the real-valued intermediate); upsampling and concat are
    regridded from their inputs' grids; the attention gate is computed from
    the quantized pooled vector and integer 1-D conv.  The head skips the
    output grid and dequantizes straight to float logits.
    """
    spec = qstore.spec
    if x.shape != (1, 3, spec.input_size, spec.input_size):
        raise ShapeError(
            f"input shape {x.shape} does not match spec "
            f"(1, 3, {spec.input_size}, {spec.input_size})"
        )
    steps, _ = build_plan(spec)
    for name in qstore.codes:
        if name not in params.weight_scales:
            raise QuantizationError(f"no weight scales for {name!r}; quantize first")
    bias_real = {
        name: (params.weight_scales[name].astype(np.float64)
               * qstore.codes[name].astype(np.float64))
        for name in qstore.codes if name.endswith(".bias")
    }

    site_q: dict[str, np.ndarray] = {}
    site_ap: dict[str, ActQuant] = {}

    def put(site: str, real: np.ndarray):
        ap = _site_params(params, site)
        site_q[site] = quantize_activation(real, ap)
        site_ap[site] = ap

    def real_of(site: str) -> np.ndarray:
        return dequantize_activation(site_q[site], site_ap[site])

    put("input", x.data)
    for st in steps:
        if isinstance(st, ConvStep):
            ap_in = site_ap[st.in_site]
            acc = int8_conv(site_q[st.in_site], ap_in.zero_point,
                            qstore.codes[f"{st.name}.kernel"],
                            stride=st.stride, padding=st.padding,
                            dilation=st.dilation, groups=st.groups)
            w_scale = params.weight_scales[f"{st.name}.kernel"].astype(np.float64)
            real = acc.astype(np.float64) * (ap_in.scale * w_scale)[None, :, None, None]
            real += bias_real[f"{st.name}.bias"][None, :, None, None]
            if st.relu:
                np.maximum(real, 0.0, out=real)
            if st.name == "head":
                return Tensor.from_array(real.astype(np.float32))
            put(st.out_site, real)
        elif isinstance(st, UpStep):
            q = site_q[st.in_site]
            up = q.repeat(2, axis=2).repeat(2, axis=3)
            put(st.out_site, dequantize_activation(up, site_ap[st.in_site]))
        elif isinstance(st, CatStep):
            real = np.concatenate([real_of(st.a_site), real_of(st.b_site)], axis=1)
            put(st.out_site, real)
        elif isinstance(st, EcaStep):
            feats = real_of(st.in_site)
            put(st.pool_site, feats.mean(axis=(2, 3), keepdims=True))
            ap_pool = site_ap[st.pool_site]
            p32 = site_q[st.pool_site].astype(np.int32)[0, :, 0, 0] - ap_pool.zero_point
            k_codes = qstore.codes["eca.kernel"].astype(np.int32)
            k = k_codes.shape[0]
            half = (k - 1) // 2
            padded = np.pad(p32, (half, half))
            conv = np.zeros(st.channels, dtype=np.int64)
            for j in range(k):
                conv += k_codes[j] * padded[j:j + st.channels].astype(np.int64)
            k_scale = float(params.weight_scales["eca.kernel"][0])
            gate = _sigmoid_stable(
                (conv.astype(np.float64) * (ap_pool.scale * k_scale))[None, :])
            put(st.out_site, feats * gate.astype(np.float64)[:, :, None, None])
    raise AssertionError("plan ended without a head step")


# -------------------------------------------------------------- divergence

def divergence_report(weights: WeightStore, qstore: Int8Store,
                      params: QuantParams, inputs) -> dict:
    """Compare FP and INT8 logits over a set of inputs.

    Returns mean/max absolute logit gap and the fraction of pixels whose
    thresholded (> 0) mask bit agrees between the two paths.
    """
    gaps = []
    agree = 0
    total = 0
    for x in inputs:
        fp = forward(weights, x).data.astype(np.float64)
        q8 = quantized_forward(qstore, params, x).data.astype(np.float64)
        gaps.append(np.abs(fp - q8))
        agree += int(np.sum((fp > 0) == (q8 > 0)))
        total += fp.size
    flat = np.concatenate([g.ravel() for g in gaps])
    return {
        "inputs": len(gaps),
        "mean_abs_gap": float(flat.mean()),
        "max_abs_gap": float(flat.max()),
        "sign_agreement": agree / total,
    }


# ------------------------------------------------------------------- PSQ1

def _write_name(f, name: str):
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)


def export_int8(qstore: Int8Store, params: QuantParams, path):
    """Serialize codes + scales to PSQ1; bytes are a pure function of inputs."""
    for name in qstore.codes:
        if name not in params.weight_scales:
            raise QuantizationError(f"no weight scales for {name!r}; cannot export")
    with open(path, "wb") as f:
        f.write(PSQ1_MAGIC)
        f.write(struct.pack("<I", PSQ1_VERSION))
        f.write(struct.pack("<Q", qstore.spec.fingerprint()))
        f.write(struct.pack("<I", len(params.act_scales)))
        for site, ap in params.act_scales.items():
            _write_name(f, site)
            f.write(struct.pack("<fi", ap.scale, ap.zero_point))
        f.write(struct.pack("<I", len(qstore.codes)))
        for name, codes in qstore.codes.items():
            scales = params.weight_scales[name]
            _write_name(f, name)
            f.write(struct.pack("<I", scales.size))
            f.write(np.ascontiguousarray(scales, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(codes, dtype=np.int8).tobytes())


def import_int8(path, spec: NetSpec | None = None):
    """Read a PSQ1 file back into (Int8Store, QuantParams).

    The file stores no tensor extents, so the architecture spec provides
    them; its fingerprint must match the one recorded at export.
    """
    spec = spec or NetSpec()
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise TruncatedFileError(f"file ends at byte {len(view)}, needed {off + n}")
        chunk = view[off:off + n]
        off += n
        return chunk

    def take_name() -> str:
        (n,) = struct.unpack("<H", take(2))
        return bytes(take(n)).decode("utf-8")

    if bytes(take(4)) != PSQ1_MAGIC:
        raise BadMagicError("not a PSQ1 quantized-model file")
    (version,) = struct.unpack("<I", take(4))
    if version != PSQ1_VERSION:
        raise WeightFileError(f"unsupported PSQ1 version {version}")
    (fingerprint,) = struct.unpack("<Q", take(8))
    if fingerprint != spec.fingerprint():
        raise StoreMismatchError(
            "quantized file fingerprint does not match the given NetSpec")

    (n_sites,) = struct.unpack("<I", take(4))
    act: dict[str, ActQuant] = {}
    for _ in range(n_sites):
        site = take_name()
        scale, zp = struct.unpack("<fi", take(8))
        act[site] = ActQuant(scale=float(scale), zero_point=int(zp))

    shapes = expected_shapes(spec)
    (n_layers,) = struct.unpack("<I", take(4))
    codes: dict[str, np.ndarray] = {}
    scales: dict[str, np.ndarray] = {}
    for _ in range(n_layers):
        name = take_name()
        if name not in shapes:
            raise StoreMismatchError(f"file carries unknown tensor {name!r}")
        (nch,) = struct.unpack("<I", take(4))
        want = _channel_count(name, shapes[name])
        if nch != want:
            raise WeightFileError(
                f"tensor {name!r} declares {nch} channels, spec implies {want}")
        scales[name] = np.frombuffer(take(4 * nch), dtype="<f4").copy()
        size = int(np.prod(shapes[name]))
        codes[name] = np.frombuffer(take(size), dtype=np.int8).reshape(
            shapes[name]).copy()
    if off != len(view):
        raise WeightFileError(f"{len(view) - off} trailing bytes after last layer")
    return (Int8Store(spec=spec, codes=codes),
            QuantParams(weight_scales=scales, act_scales=act))
