"""The segmentation network: a compact encoder-decoder over depthwise-separable
blocks with strided-conv downsampling, a dilated 320-channel bottleneck,
nearest-neighbor upsampling with concat skips, channel attention before the
output head, a depthwise refinement stage and a final 1x1 logit head.

Default layout (input 96x96, channels 48 -> 96 -> 160 -> 256, bottleneck 320):

    stem 3x3 (3->48) @96  ................ skip for dec4
    down 3x3/s2 (48->96) @48 ............. skip for dec3
    down 3x3/s2 (96->160) @24
    dw+pw block @160 ..................... skip for dec2
    down 3x3/s2 (160->256) @12
    dw+pw block @256 ..................... skip for dec1
    down 3x3/s2 (256->256) @6
    pw expand (256->320) + dilated dw (d=2) @6
    4x [up2x, concat skip, dw 3x3, pw -> width] widths 64/48/24/48
    channel attention (k=3) -> dw refine @48 -> 1x1 head -> logits

Block counts and decoder widths are tuned so the default spec lands at about
1.39M parameters and 356M multiply-accumulates for a 96x96 input.

Weight files use the PSW1 container (little-endian): magic "PSW1", format
version u32, spec fingerprint u64, layer count u32, then per layer a u16
name length, UTF-8 name, dtype u8 (0 = f32), rank u8, u32 extents and the
raw payload, with no alignment padding.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensorkit import (
    ConvParams,
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    conv_output_extent,
    relu,
    upsample_nearest2x,
)
from . import tensorkit

PSW1_MAGIC = b"PSW1"
PSW1_VERSION = 1


class WeightFileError(Exception):
    """Base class for weight-container format problems."""


class BadMagicError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class StoreMismatchError(WeightFileError):
    """Fingerprint or layer shape disagrees with the network spec."""


@dataclass(frozen=True)
class NetSpec:
    """Architecture description; `validate()` runs on construction."""

    input_size: int = 96
    encoder_channels: tuple[int, ...] = (48, 96, 160, 256)
    bottleneck_channels: int = 320
    bottleneck_dilation: int = 2
    eca_kernel_size: int = 3
    blocks_per_stage: tuple[int, ...] = (0, 0, 1, 1)
    decoder_channels: tuple[int, ...] = (64, 48, 24, 48)
    downsample: str = "conv3x3"

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(self.blocks_per_stage))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        self.validate()

    def validate(self):
        ch = self.encoder_channels
        if len(ch) != 4 or len(self.blocks_per_stage) != 4 or len(self.decoder_channels) != 4:
            raise ValueError("encoder/decoder schedules must have 4 stages")
        if any(a >= b for a, b in zip(ch, ch[1:])):
            raise ValueError(f"channel schedule must be strictly increasing: {ch}")
        if self.bottleneck_channels <= ch[-1]:
            raise ValueError("bottleneck must expand beyond the last encoder stage")
        if self.bottleneck_dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.eca_kernel_size % 2 == 0 or self.eca_kernel_size < 1:
            raise ValueError(f"attention kernel must be odd, got {self.eca_kernel_size}")
        if self.eca_kernel_size > self.decoder_channels[-1]:
            raise ValueError("attention kernel longer than the channel vector")
        if self.input_size < 32 or self.input_size % 16 != 0:
            raise ValueError("input size must be a multiple of 16, >= 32")
        if any(b < 0 for b in self.blocks_per_stage):
            raise ValueError("block counts must be >= 0")
        if any(c < 1 for c in self.decoder_channels):
            raise ValueError("decoder widths must be >= 1")
        if self.downsample != "conv3x3":
            raise ValueError(f"unknown downsample style {self.downsample!r}")

    def fingerprint(self) -> int:
        text = "|".join([
            f"S={self.input_size}",
            f"enc={','.join(map(str, self.encoder_channels))}",
            f"bn={self.bottleneck_channels}",
            f"dil={self.bottleneck_dilation}",
            f"eca={self.eca_kernel_size}",
            f"blocks={','.join(map(str, self.blocks_per_stage))}",
            f"dec={','.join(map(str, self.decoder_channels))}",
            f"down={self.downsample}",
        ])
        digest = hashlib.sha256(text.encode()).digest()
        return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class ConvStep:
    name: str
    in_site: str
    out_site: str
    in_ch: int
    out_ch: int
    ksize: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1
    relu: bool = True


@dataclass(frozen=True)
class UpStep:
    in_site: str
    out_site: str


@dataclass(frozen=True)
class CatStep:
    a_site: str
    b_site: str
    out_site: str


@dataclass(frozen=True)
class EcaStep:
    in_site: str
    out_site: str
    pool_site: str
    channels: int


Step = ConvStep | UpStep | CatStep | EcaStep


def build_plan(spec: NetSpec) -> tuple[list, dict]:
    """Expand the spec into an execution plan plus a site -> (C, H, W) map.

    Skip/concat spatial agreement is asserted here, before any weights exist.
    """
    steps: list[Step] = []
    shapes: dict[str, tuple[int, int, int]] = {}
    s = spec.input_size
    ch = spec.encoder_channels

    def conv(name, in_site, cin, cout, k, res, *, stride=1, pad=0, dil=1,
             groups=1, act=True):
        steps.append(ConvStep(name=name, in_site=in_site, out_site=name,
                              in_ch=cin, out_ch=cout, ksize=k, stride=stride,
                              padding=pad, dilation=dil, groups=groups, relu=act))
        out_res = conv_output_extent(res, k, stride, pad, dil)
        shapes[name] = (cout, out_res, out_res)
        return name, out_res

    shapes["input"] = (3, s, s)
    site, res = conv("stem", "input", 3, ch[0], 3, s, pad=1)
    skips: list[str] = []
    for stage in range(4):
        c = ch[stage]
        for b in range(spec.blocks_per_stage[stage]):
            base = f"enc{stage + 1}.b{b + 1}"
            site, res = conv(f"{base}.dw", site, c, c, 3, res, pad=1, groups=c)
            site, res = conv(f"{base}.pw", site, c, c, 1, res)
        skips.append(site)
        nxt = ch[stage + 1] if stage < 3 else ch[3]
        site, res = conv(f"down{stage + 1}", site, c, nxt, 3, res, stride=2, pad=1)

    bn = spec.bottleneck_channels
    site, res = conv("bottleneck.expand", site, ch[3], bn, 1, res)
    d = spec.bottleneck_dilation
    site, res = conv("bottleneck.dw", site, bn, bn, 3, res, pad=d, dil=d, groups=bn)

    prev_c = bn
    for i, (skip, width) in enumerate(zip(reversed(skips), spec.decoder_channels)):
        base = f"dec{i + 1}"
        steps.append(UpStep(in_site=site, out_site=f"{base}.up"))
        res *= 2
        shapes[f"{base}.up"] = (prev_c, res, res)
        skip_c, skip_h, skip_w = shapes[skip]
        if (skip_h, skip_w) != (res, res):
            raise AssertionError(
                f"skip {skip} at {skip_h}x{skip_w} cannot join decoder at {res}x{res}"
            )
        cat = prev_c + skip_c
        steps.append(CatStep(a_site=f"{base}.up", b_site=skip, out_site=f"{base}.cat"))
        shapes[f"{base}.cat"] = (cat, res, res)
        site, res = conv(f"{base}.dw", f"{base}.cat", cat, cat, 3, res, pad=1, groups=cat)
        site, res = conv(f"{base}.pw", site, cat, width, 1, res)
        prev_c = width

    steps.append(EcaStep(in_site=site, out_site="eca", pool_site="eca.pool",
                         channels=prev_c))
    shapes["eca.pool"] = (prev_c, 1, 1)
    shapes["eca"] = (prev_c, res, res)
    site, res = conv("refine", "eca", prev_c, prev_c, 3, res, pad=1, groups=prev_c)
    site, res = conv("head", site, prev_c, 1, 1, res, act=False)
    return steps, shapes


def expected_shapes(spec: NetSpec) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter tensor the spec demands."""
    steps, _ = build_plan(spec)
    out: dict[str, tuple[int, ...]] = {}
    for st in steps:
        if isinstance(st, ConvStep):
            out[f"{st.name}.kernel"] = (st.out_ch, st.in_ch // st.groups,
                                        st.ksize, st.ksize)
            out[f"{st.name}.bias"] = (st.out_ch,)
        elif isinstance(st, EcaStep):
            out["eca.kernel"] = (spec.eca_kernel_size,)
    return out


@dataclass
class WeightStore:
    """Named parameter container; immutable by convention after build/load."""

    spec: NetSpec
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = expected_shapes(self.spec)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise StoreMismatchError(f"missing parameter tensor {name!r}")
            got = self.tensors[name].shape
            if tuple(got) != shape:
                raise StoreMismatchError(
                    f"parameter {name!r} has shape {got}, expected {shape}"
                )
        extra = set(self.tensors) - set(expected)
        if extra:
            raise StoreMismatchError(f"unexpected parameter tensors {sorted(extra)}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def build(spec: NetSpec, seed: int) -> WeightStore:
    """He-uniform kernels, zero biases; one RNG stream in fixed name order.

    The final head kernel is drawn at 1/100 of the He limit so that a fresh
    network predicts near-neutral logits instead of saturated noise.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(spec).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        elif name == "eca.kernel":
            limit = np.sqrt(6.0 / shape[0])
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            if name == "head.kernel":
                limit /= 100.0
            tensors[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return WeightStore(spec=spec, tensors=tensors)


def eca_block(features: Tensor, kernel: np.ndarray) -> Tensor:
    """Channel gate: sigmoid of a zero-padded 1-D conv over the pooled means.

    Gate g_c = sigmoid(sum_j k[j] * mean[c + j - (k-1)/2]); out-of-range
    neighbors contribute zero.  Output is features scaled per channel.
    """
    kernel = np.asarray(kernel, dtype=np.float32)
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"attention kernel must be odd, got {k}")
    if k > features.c:
        raise ShapeError(f"kernel length {k} exceeds {features.c} channels")
    pooled = features.data.mean(axis=(2, 3), dtype=np.float64)  # (N, C)
    half = (k - 1) // 2
    padded = np.pad(pooled, ((0, 0), (half, half)))
    conv = np.zeros_like(pooled)
    for j in range(k):
        conv += kernel[j] * padded[:, j:j + pooled.shape[1]]
    gate = tensorkit._sigmoid_stable(conv)  # (N, C) float32
    out = features.data * gate[:, :, None, None]
    return Tensor.from_array(out)


def _run_plan(weights: WeightStore, x: Tensor, *, eca_bypass: bool = False,
              tap=None, stop_before_head: bool = False):
    spec = weights.spec
    if x.shape != (1, 3, spec.input_size, spec.input_size):
        raise ShapeError(
            f"input shape {x.shape} does not match spec "
            f"(1, 3, {spec.input_size}, {spec.input_size})"
        )
    steps, _ = build_plan(spec)
    sites: dict[str, Tensor] = {"input": x}
    if tap is not None:
        tap("input", x)
    for st in steps:
        if isinstance(st, ConvStep):
            if stop_before_head and st.name == "head":
                return sites[st.in_site], sites
            params = ConvParams(
                kernel=weights[f"{st.name}.kernel"],
                bias=weights[f"{st.name}.bias"],
                stride=st.stride, padding=st.padding,
                dilation=st.dilation, groups=st.groups,
            )
            out = conv2d(sites[st.in_site], params)
            if st.relu:
                out = relu(out)
            sites[st.out_site] = out
        elif isinstance(st, UpStep):
            sites[st.out_site] = upsample_nearest2x(sites[st.in_site])
        elif isinstance(st, CatStep):
            sites[st.out_site] = concat_channels(sites[st.a_site], sites[st.b_site])
        elif isinstance(st, EcaStep):
            feats = sites[st.in_site]
            pooled = feats.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
            sites[st.pool_site] = Tensor.from_array(pooled.astype(np.float32))
            if tap is not None:
                tap(st.pool_site, sites[st.pool_site])
            if eca_bypass:
                sites[st.out_site] = feats
            else:
                sites[st.out_site] = eca_block(feats, weights["eca.kernel"])
        if tap is not None:
            tap(st.out_site, sites[st.out_site])
    return sites["head"], sites


def forward(weights: WeightStore, x: Tensor, *, eca_bypass: bool = False,
            tap=None) -> Tensor:
    """Full forward pass: (1, 3, S, S) image -> (1, 1, S, S) logit map."""
    out, _ = _run_plan(weights, x, eca_bypass=eca_bypass, tap=tap)
    return out


def forward_features(weights: WeightStore, x: Tensor) -> Tensor:
    """Run everything up to (excluding) the final 1x1 head; returns its input."""
    feats, _ = _run_plan(weights, x, stop_before_head=True)
    return feats


def apply_head(weights: WeightStore, features: Tensor) -> Tensor:
    """The final 1x1 convolution on a precomputed feature map."""
    params = ConvParams(kernel=weights["head.kernel"], bias=weights["head.bias"])
    return conv2d(features, params)


def param_count(weights: WeightStore) -> int:
    return int(sum(t.size for t in weights.tensors.values()))


def count_macs(spec: NetSpec) -> int:
    """Analytic multiply-accumulate count of one forward pass.

    Convolutions contribute out_elems * kH * kW * in_ch/groups; the channel
    attention contributes its 1-D conv plus the per-pixel gating multiplies.
    Pooling and upsampling are excluded.
    """
    steps, shapes = build_plan(spec)
    total = 0
    for st in steps:
        if isinstance(st, ConvStep):
            c, h, w = shapes[st.out_site]
            total += c * h * w * st.ksize * st.ksize * (st.in_ch // st.groups)
        elif isinstance(st, EcaStep):
            c, h, w = shapes[st.out_site]
            total += st.channels * spec.eca_kernel_size  # 1-D gate conv
            total += c * h * w  # per-pixel gating multiply
    return int(total)


def save_weights(store: WeightStore, path):
    """Serialize to PSW1; byte output is a pure function of the store."""
    with open(path, "wb") as f:
        f.write(PSW1_MAGIC)
        f.write(struct.pack("<I", PSW1_VERSION))
        f.write(struct.pack("<Q", store.spec.fingerprint()))
        f.write(struct.pack("<I", len(store.tensors)))
        for name, tensor in store.tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", 0, tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            f.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_weights(path, spec: NetSpec | None = None) -> WeightStore:
    """Read a PSW1 file; validates magic, completeness and shapes."""
    spec = spec or NetSpec()
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise TruncatedFileError(
                f"file ends at byte {len(view)}, needed {off + n}"
            )
        chunk = view[off:off + n]
        off += n
        return chunk

    if bytes(take(4)) != PSW1_MAGIC:
        raise BadMagicError("not a PSW1 weight file")
    (version,) = struct.unpack("<I", take(4))
    if version != PSW1_VERSION:
        raise WeightFileError(f"unsupported PSW1 version {version}")
    (fingerprint,) = struct.unpack("<Q", take(8))
    if fingerprint != spec.fingerprint():
        raise StoreMismatchError(
            "weight file fingerprint does not match the network spec"
        )
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", take(2))
        if dtype_code != 0:
            raise WeightFileError(f"unknown dtype code {dtype_code}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        payload = take(4 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if off != len(view):
        raise WeightFileError(f"{len(view) - off} trailing bytes after last layer")
    return WeightStore(spec=spec, tensors=tensors)
