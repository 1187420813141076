"""Training objective for the student network, with analytic gradients.

The loss couples three supervision signals over a predicted logit map x
(all probabilities taken through a temperature sigmoid s(x) = sigmoid(tau*x)):

    teacher term   MSE(s(x), s(t)) + Dice(s(x), s(t))     t = cached teacher logits
    gt term        balanced BCE(s(x), y) + Dice(s(x), y)  y = binary ground truth
    area term      max(0, rho - sum s(x) / sum y)         hinge against collapse

    total = alpha * teacher + (1 - alpha) * gt + area_weight * area

where alpha is the mean teacher confidence of the batch, clamped to [0, 1].

Gradients with respect to x are computed analytically (the hinge is treated
as inactive at its kink) and verified against central finite differences.
`fit_head` trains only the final 1x1 head on frozen features, which keeps the
gradient exact without any convolution backprop.

Teacher logits are cached in PTC1 files (little-endian): magic "PTC1",
version u32, record count u32, then per record an annotation id u64, a
confidence f32 and 96*96 f32 logits row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .net import WeightStore, forward_features
from .tensorkit import Tensor

PTC1_MAGIC = b"PTC1"
PTC1_VERSION = 1
CACHE_SIDE = 96  # logit raster fixed by the cache format

_ADAM_EPS = 1e-8


class CacheFileError(Exception):
    """Malformed or truncated teacher-cache file."""


@dataclass(frozen=True)
class LossConfig:
    tau: float = 5.0
    area_ratio: float = 0.4
    area_weight: float = 0.4
    eps: float = 1e-6

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.area_ratio <= 1:
            raise ValueError("area ratio must lie in (0, 1]")
        if not self.eps > 0:
            raise ValueError("smoothing eps must be > 0")


@dataclass(frozen=True)
class TeacherRecord:
    annotation_id: int
    logits: Tensor
    confidence: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.logits.data)):
            raise ValueError("teacher logits must be finite")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class LossBreakdown:
    l_teacher: float
    l_gt: float
    l_area: float
    l_total: float
    alpha: float

    def __post_init__(self):
        for name in ("l_teacher", "l_gt", "l_area", "l_total"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


# ------------------------------------------------------------ float64 kernels
# All loss math runs on flat float64 arrays; the public API wraps Tensors.

def _logistic(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    neg = ~pos
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ex = np.exp(a[neg])
    out[neg] = ex / (1.0 + ex)
    return out


def _probs(x: np.ndarray, tau: float) -> np.ndarray:
    return _logistic(tau * x)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _dice_core(p, q, eps):
    """Dice loss and its gradient w.r.t. p (q treated as constant)."""
    a = 2.0 * np.sum(p * q) + eps
    b = np.sum(p) + np.sum(q) + eps
    loss = 1.0 - a / b
    grad_p = -(2.0 * q * b - a) / (b * b)
    return loss, grad_p


def _teacher_core(x, t, cfg):
    tau = cfg.tau
    p = _probs(x, tau)
    q = _probs(t, tau)
    n = x.size
    mse = float(np.mean((p - q) ** 2))
    dice, dice_gp = _dice_core(p, q, cfg.eps)
    chain = tau * p * (1.0 - p)  # dp/dx
    grad = (2.0 / n) * (p - q) * chain + dice_gp * chain
    return mse + dice, grad


def _gt_core(x, y, cfg):
    tau = cfg.tau
    z = tau * x
    p = _logistic(z)
    n = x.size
    n_pos = float(np.sum(y))
    n_neg = n - n_pos
    if n_pos == 0.0 or n_neg == 0.0:
        w = np.ones_like(x)
    else:
        # inverse-frequency weights renormalized to mean one:
        # positives N/(2*N_pos), negatives N/(2*N_neg)
        w = np.where(y > 0.5, n / (2.0 * n_pos), n / (2.0 * n_neg))
    # per-pixel BCE straight from logits: softplus(z) - y*z
    bce = float(np.sum(w * (_softplus(z) - y * z)) / n)
    bce_grad = w * tau * (p - y) / n
    dice, dice_gp = _dice_core(p, y, cfg.eps)
    chain = tau * p * (1.0 - p)
    return bce + dice, bce_grad + dice_gp * chain


def _area_core(x, y, cfg):
    sy = float(np.sum(y))
    if sy == 0.0:
        return 0.0, np.zeros_like(x)
    p = _probs(x, cfg.tau)
    ratio = float(np.sum(p)) / sy
    if ratio >= cfg.area_ratio:
        return 0.0, np.zeros_like(x)
    grad = -(cfg.tau * p * (1.0 - p)) / sy
    return cfg.area_ratio - ratio, grad


def _total_core(x, t, y, alpha, cfg):
    lt, gt_ = _teacher_core(x, t, cfg)
    lg, gg = _gt_core(x, y, cfg)
    la, ga = _area_core(x, y, cfg)
    loss = alpha * lt + (1.0 - alpha) * lg + cfg.area_weight * la
    grad = alpha * gt_ + (1.0 - alpha) * gg + cfg.area_weight * ga
    return (lt, lg, la, loss), grad


def _flat(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64).ravel()


def _check_binary(y: np.ndarray):
    if not np.all(np.isin(np.unique(y), (0.0, 1.0))):
        raise ValueError("ground-truth mask must be binary (values in {0, 1})")


def _check_same_shape(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _alpha_of(confidence) -> float:
    mean = float(np.mean(np.asarray(confidence, dtype=np.float64)))
    return min(1.0, max(0.0, mean))


# ------------------------------------------------------------------ public API

def sigmoid_tau(x: Tensor, tau: float) -> Tensor:
    """Temperature-scaled logistic sigmoid(tau * x), elementwise."""
    if not tau > 0:
        raise ValueError("temperature must be > 0")
    return Tensor.from_array(
        _probs(x.data.astype(np.float64), tau).astype(np.float32))


def dice_loss(p: Tensor, q: Tensor, eps: float = 1e-6) -> float:
    _check_same_shape(p, q)
    loss, _ = _dice_core(_flat(p), _flat(q), eps)
    return float(loss)


def teacher_loss(y_hat: Tensor, y_teacher: Tensor,
                 cfg: LossConfig = LossConfig()) -> float:
    _check_same_shape(y_hat, y_teacher)
    loss, _ = _teacher_core(_flat(y_hat), _flat(y_teacher), cfg)
    return float(loss)


def gt_loss(y_hat: Tensor, y_gt: Tensor, cfg: LossConfig = LossConfig()) -> float:
    _check_same_shape(y_hat, y_gt)
    y = _flat(y_gt)
    _check_binary(y)
    loss, _ = _gt_core(_flat(y_hat), y, cfg)
    return float(loss)


def area_loss(y_hat: Tensor, y_gt: Tensor, cfg: LossConfig = LossConfig()) -> float:
    _check_same_shape(y_hat, y_gt)
    loss, _ = _area_core(_flat(y_hat), _flat(y_gt), cfg)
    return float(loss)


def total_loss(y_hat: Tensor, y_teacher: Tensor, y_gt: Tensor, confidence,
               cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Full objective; `confidence` may be a float or a sequence (batch)."""
    _check_same_shape(y_hat, y_teacher)
    _check_same_shape(y_hat, y_gt)
    y = _flat(y_gt)
    _check_binary(y)
    alpha = _alpha_of(confidence)
    (lt, lg, la, loss), _ = _total_core(_flat(y_hat), _flat(y_teacher), y,
                                        alpha, cfg)
    return LossBreakdown(l_teacher=float(lt), l_gt=float(lg), l_area=float(la),
                         l_total=float(loss), alpha=alpha)


def loss_grad(y_hat: Tensor, y_teacher: Tensor, y_gt: Tensor, confidence,
              cfg: LossConfig = LossConfig()) -> Tensor:
    """Analytic d(total)/d(y_hat), same shape as y_hat."""
    _check_same_shape(y_hat, y_teacher)
    _check_same_shape(y_hat, y_gt)
    y = _flat(y_gt)
    _check_binary(y)
    alpha = _alpha_of(confidence)
    _, grad = _total_core(_flat(y_hat), _flat(y_teacher), y, alpha, cfg)
    return Tensor.from_array(grad.reshape(y_hat.shape).astype(np.float32))


def fd_grad(y_hat: Tensor, y_teacher: Tensor, y_gt: Tensor, confidence,
            cfg: LossConfig = LossConfig(), h: float = 1e-3) -> np.ndarray:
    """Central finite-difference gradient oracle (float64).

    Perturbed inputs are stored in float32 like any other tensor, so the
    difference quotient divides by the perturbation actually achieved after
    rounding, not the nominal 2h.
    """
    base = y_hat.data.ravel()
    out = np.empty(base.size, dtype=np.float64)

    def eval_at(flat):
        t = Tensor.from_array(flat.reshape(y_hat.shape))
        return total_loss(t, y_teacher, y_gt, confidence, cfg).l_total

    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus[i] = np.float32(float(base[i]) + h)
        minus[i] = np.float32(float(base[i]) - h)
        dx = float(plus[i]) - float(minus[i])
        out[i] = (eval_at(plus) - eval_at(minus)) / dx
    return out.reshape(y_hat.shape)


# -------------------------------------------------------------- head training

def fit_head(weights: WeightStore, dataset, steps: int, lr: float = 3e-4,
             cfg: LossConfig = LossConfig()):
    """Train only the final 1x1 head with AdamW on frozen features.

    `dataset` is a list of (image, TeacherRecord, gt_mask) triples at the
    network input resolution. The trunk runs once per sample up front; every
    step then computes the full-batch loss and the exact head gradient
    (the head is linear, so d(loss)/d(kernel) is just the feature-weighted
    pixel gradient). alpha is the clamped mean of all cached confidences.

    The features are whitened per channel before fitting and the affine
    transform is folded back into the returned head afterwards; the optimizer
    therefore takes equally sized steps in units of feature effect size
    instead of being throttled by whichever channels happen to run hot.

    Returns (new store, per-step loss trace). The input store is unchanged.
    """
    if not dataset:
        raise ValueError("dataset must not be empty")
    if steps < 1:
        raise ValueError("steps must be >= 1")

    feats = []   # (C, HW) float64 per sample
    teach = []   # flat teacher logits
    gts = []     # flat binary masks
    confs = []
    for image, record, gt in dataset:
        f = forward_features(weights, image)
        feats.append(f.data[0].reshape(f.c, -1).astype(np.float64))
        t = _flat(record.logits)
        y = _flat(gt)
        if t.size != feats[-1].shape[1] or y.size != t.size:
            raise ValueError("teacher/gt raster does not match the feature map")
        _check_binary(y)
        teach.append(t)
        gts.append(y)
        confs.append(record.confidence)
    alpha = _alpha_of(confs)

    pooled = np.concatenate(feats, axis=1)
    mu = pooled.mean(axis=1)
    sd = pooled.std(axis=1)
    sd[sd < 1e-12] = 1.0  # dead channels pass through unscaled
    feats = [(f - mu[:, None]) / sd[:, None] for f in feats]

    # map the incoming head into whitened coordinates so step 0 reproduces
    # the raw head's logits exactly
    k_raw = weights["head.kernel"].astype(np.float64).ravel()  # (C,)
    kernel = k_raw * sd
    bias = float(weights["head.bias"][0]) + float(k_raw @ mu)
    theta = np.concatenate([kernel, [bias]])
    theta0 = theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, decay = 0.9, 0.999, 0.01
    trace: list[float] = []

    for step in range(1, steps + 1):
        batch_loss = 0.0
        gk = np.zeros(kernel.size)
        gb = 0.0
        for f, t, y in zip(feats, teach, gts):
            logits = theta[:-1] @ f + theta[-1]
            (lt, lg, la, loss), gx = _total_core(logits, t, y, alpha, cfg)
            batch_loss += loss
            gk += f @ gx
            gb += float(np.sum(gx))
        scale = 1.0 / len(feats)
        batch_loss *= scale
        if not np.isfinite(batch_loss):
            raise RuntimeError(f"non-finite loss at step {step}")
        trace.append(float(batch_loss))

        grad = np.concatenate([gk * scale, [gb * scale]])
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1 ** step)
        v_hat = v / (1 - beta2 ** step)
        theta = theta - lr * (m_hat / (np.sqrt(v_hat) + _ADAM_EPS) + decay * theta)

    if np.array_equal(theta, theta0):  # e.g. lr == 0: bit-identical store
        return WeightStore(spec=weights.spec, tensors=dict(weights.tensors)), trace

    k_white, b_white = theta[:-1], float(theta[-1])
    k_out = k_white / sd
    b_out = b_white - float((k_white / sd) @ mu)
    tensors = dict(weights.tensors)
    tensors["head.kernel"] = k_out.astype(np.float32).reshape(
        weights["head.kernel"].shape)
    tensors["head.bias"] = np.array([b_out], dtype=np.float32)
    return WeightStore(spec=weights.spec, tensors=tensors), trace


# ------------------------------------------------------------------ PTC1 cache

def write_cache(records, path):
    records = list(records)
    with open(path, "wb") as f:
        f.write(PTC1_MAGIC)
        f.write(struct.pack("<I", PTC1_VERSION))
        f.write(struct.pack("<I", len(records)))
        for rec in records:
            if rec.logits.shape != (1, 1, CACHE_SIDE, CACHE_SIDE):
                raise CacheFileError(
                    f"cache stores {CACHE_SIDE}x{CACHE_SIDE} logit rasters, "
                    f"got {rec.logits.shape}"
                )
            f.write(struct.pack("<Q", rec.annotation_id))
            f.write(struct.pack("<f", rec.confidence))
            f.write(np.ascontiguousarray(rec.logits.data, dtype="<f4").tobytes())


def read_cache(path) -> list[TeacherRecord]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != PTC1_MAGIC:
        raise CacheFileError("not a PTC1 cache file")
    off = 4
    try:
        (version,) = struct.unpack_from("<I", blob, off)
        off += 4
        if version != PTC1_VERSION:
            raise CacheFileError(f"unsupported cache version {version}")
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        records = []
        payload = 4 * CACHE_SIDE * CACHE_SIDE
        for _ in range(count):
            (ann_id,) = struct.unpack_from("<Q", blob, off)
            off += 8
            (conf,) = struct.unpack_from("<f", blob, off)
            off += 4
            if off + payload > len(blob):
                raise CacheFileError("cache file ends mid-record")
            logits = np.frombuffer(blob, dtype="<f4", count=payload // 4,
                                   offset=off).reshape(1, 1, CACHE_SIDE, CACHE_SIDE)
            off += payload
            records.append(TeacherRecord(annotation_id=ann_id,
                                         logits=Tensor.from_array(logits.copy()),
                                         confidence=float(conf)))
    except struct.error as exc:
        raise CacheFileError("cache file ends mid-record") from exc
    if off != len(blob):
        raise CacheFileError(f"{len(blob) - off} trailing bytes in cache file")
    return records


def synth_cache(seed: int, n: int) -> list[TeacherRecord]:
    """Stand-in teacher: signed-distance disc logits with random geometry.

    Deterministic in `seed`; confidences drawn uniformly from [0.6, 1.0].
    """
    rng = np.random.default_rng(seed)
    side = CACHE_SIDE
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    records = []
    for i in range(n):
        cx = rng.uniform(side * 0.35, side * 0.65)
        cy = rng.uniform(side * 0.35, side * 0.65)
        radius = rng.uniform(side * 0.18, side * 0.38)
        sdf = radius - np.hypot(xx - cx, yy - cy)
        logits = np.clip(sdf * 0.4, -8.0, 8.0).astype(np.float32)
        records.append(TeacherRecord(
            annotation_id=i + 1,
            logits=Tensor.from_array(logits[None, None]),
            confidence=float(rng.uniform(0.6, 1.0)),
        ))
    return records
