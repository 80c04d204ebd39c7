"""Small spatiotemporal feature network with hand-derived gradients.

Architecture (channels-last, batch ``(B, L, H, W, C)``)::

    conv3x3x3(C->8) -> ReLU -> 2x2 spatial mean-pool
    conv3x3x3(8->16) -> ReLU -> 2x2 spatial mean-pool
    spatial mean per (frame, channel) -> time-ordered flatten (L*16)
    linear -> 64-d features -> linear -> logits

The teacher, the student and the throwaway encoders used for distribution
matching all share this layout.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numkit import DTYPE, ContractError, DivergenceError, RngStream, SgdState, check_finite, sgd_step, uniform
from .partition import partition

logger = logging.getLogger(__name__)

FEATURE_DIM = 64
CONV1_OUT = 8
CONV2_OUT = 16

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "feat_w", "feat_b", "head_w", "head_b")


@dataclass
class EncoderParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    feat_w: np.ndarray
    feat_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    @property
    def in_channels(self) -> int:
        return self.conv1_w.shape[3]

    @property
    def length(self) -> int:
        return self.feat_w.shape[0] // CONV2_OUT

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(**{k: v.copy() for k, v in self.arrays().items()})

    def map(self, fn, *others) -> "EncoderParams":
        return EncoderParams(**{
            k: fn(v, *(getattr(o, k) for o in others)) for k, v in self.arrays().items()
        })

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


def init_params(rng: RngStream, length: int, in_channels: int, num_classes: int) -> EncoderParams:
    """Weights ~ Uniform(-s, s) with ``s = 1/sqrt(fan_in)``; biases start at zero."""
    shapes = {
        "conv1_w": ((3, 3, 3, in_channels, CONV1_OUT), 27 * in_channels),
        "conv1_b": ((CONV1_OUT,), 27 * in_channels),
        "conv2_w": ((3, 3, 3, CONV1_OUT, CONV2_OUT), 27 * CONV1_OUT),
        "conv2_b": ((CONV2_OUT,), 27 * CONV1_OUT),
        "feat_w": ((length * CONV2_OUT, FEATURE_DIM), length * CONV2_OUT),
        "feat_b": ((FEATURE_DIM,), length * CONV2_OUT),
        "head_w": ((FEATURE_DIM, num_classes), FEATURE_DIM),
        "head_b": ((num_classes,), FEATURE_DIM),
    }
    arrays = {}
    for name, (shape, fan_in) in shapes.items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape, dtype=DTYPE)
            continue
        s = 1.0 / np.sqrt(fan_in)
        arrays[name] = uniform(rng.fork(purpose=f"{rng.purpose}/{name}"), -s, s, shape)
    return EncoderParams(**arrays)


def zeros_like(params: EncoderParams) -> EncoderParams:
    return params.map(np.zeros_like)


# ---------------------------------------------------------------------------
# layers

def _im2col(x):
    # (B,T,H,W,C) -> (B*T*H*W, 27*C), columns ordered (dt, dh, dw, c).
    B, T, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    v = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    if C == 1:
        return v.reshape(B * T * H * W, 27)
    return v.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(B * T * H * W, 27 * C)


def _conv_input_grad(g, w):
    # Scatter each tap's contribution back onto the padded input.
    B, T, H, W, F = g.shape
    C = w.shape[3]
    gp = np.zeros((B, T + 2, H + 2, W + 2, C), dtype=g.dtype)
    g2 = g.reshape(-1, F)
    for dt in range(3):
        for dh in range(3):
            for dw in range(3):
                gp[:, dt:dt + T, dh:dh + H, dw:dw + W] += (g2 @ w[dt, dh, dw].T).reshape(B, T, H, W, C)
    return gp[:, 1:-1, 1:-1, 1:-1]


def _conv(x, w, b):
    cols = _im2col(x)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(x.shape[:4] + (w.shape[-1],)), cols


def _pool(x):
    B, T, H, W, C = x.shape
    return x.reshape(B, T, H // 2, 2, W // 2, 2, C).mean(axis=(3, 5))


def _pool_backward(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


@dataclass
class Cache:
    input_shape: tuple
    params_id: int
    cols1: np.ndarray = field(repr=False)
    pre1: np.ndarray = field(repr=False)
    cols2: np.ndarray = field(repr=False)
    pre2: np.ndarray = field(repr=False)
    pooled2_shape: tuple = ()
    flat: np.ndarray = field(default=None, repr=False)
    features: np.ndarray = field(default=None, repr=False)
    consumed: bool = False


def check_batch(params: EncoderParams, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.ndim != 5:
        raise ContractError(f"batch must be (B, L, H, W, C), got shape {batch.shape}")
    _, L, H, W, C = batch.shape
    if L != params.length or C != params.in_channels:
        raise ContractError(
            f"batch (L={L}, C={C}) does not match encoder (L={params.length}, C={params.in_channels})"
        )
    if H % 4 or W % 4:
        raise ContractError("H and W must be divisible by 4 for the two 2x2 pools")
    check_finite(batch, "batch")
    return batch


def forward(params: EncoderParams, batch, need_cache: bool = True):
    """Return ``(features (B,64), logits (B,M), cache)``."""
    x = check_batch(params, batch)
    B = x.shape[0]
    pre1, cols1 = _conv(x, params.conv1_w, params.conv1_b)
    h1 = _pool(np.maximum(pre1, 0.0))
    pre2, cols2 = _conv(h1, params.conv2_w, params.conv2_b)
    h2 = _pool(np.maximum(pre2, 0.0))
    flat = h2.mean(axis=(2, 3)).reshape(B, -1)
    features = flat @ params.feat_w + params.feat_b
    logits = features @ params.head_w + params.head_b
    cache = None
    if need_cache:
        cache = Cache(x.shape, id(params), cols1, pre1, cols2, pre2, h2.shape, flat, features)
    return features, logits, cache


def backward(params: EncoderParams, cache: Cache, grad_logits=None, grad_features=None,
             need_input_grad: bool = True):
    """Return ``(grad_params, grad_input)`` for the given upstream gradients.

    Either or both of ``grad_logits`` and ``grad_features`` may be supplied;
    they are summed at the feature layer. A cache may be used only once.
    """
    if cache is None or cache.consumed or cache.params_id != id(params):
        raise ContractError("stale or mismatched forward cache")
    cache.consumed = True
    B = cache.input_shape[0]
    g_feat = np.zeros((B, FEATURE_DIM), dtype=DTYPE)
    g_head_w = np.zeros_like(params.head_w)
    g_head_b = np.zeros_like(params.head_b)
    if grad_logits is not None:
        grad_logits = np.asarray(grad_logits, dtype=DTYPE)
        g_head_w = cache.features.T @ grad_logits
        g_head_b = grad_logits.sum(axis=0)
        g_feat = g_feat + grad_logits @ params.head_w.T
    if grad_features is not None:
        g_feat = g_feat + np.asarray(grad_features, dtype=DTYPE)

    g_feat_w = cache.flat.T @ g_feat
    g_feat_b = g_feat.sum(axis=0)
    g_flat = g_feat @ params.feat_w.T

    _, T, h, w, C2 = cache.pooled2_shape
    g_h2 = np.broadcast_to(g_flat.reshape(B, T, 1, 1, C2) / (h * w), cache.pooled2_shape)
    g_pre2 = _pool_backward(g_h2) * (cache.pre2 > 0)
    g2 = g_pre2.reshape(-1, C2)
    g_conv2_w = (cache.cols2.reshape(-1, cache.cols2.shape[-1]).T @ g2).reshape(params.conv2_w.shape)
    g_conv2_b = g2.sum(axis=0)
    g_h1 = _conv_input_grad(g_pre2, params.conv2_w)

    g_pre1 = _pool_backward(g_h1) * (cache.pre1 > 0)
    g1 = g_pre1.reshape(-1, CONV1_OUT)
    g_conv1_w = (cache.cols1.reshape(-1, cache.cols1.shape[-1]).T @ g1).reshape(params.conv1_w.shape)
    g_conv1_b = g1.sum(axis=0)
    g_input = _conv_input_grad(g_pre1, params.conv1_w) if need_input_grad else None

    grads = EncoderParams(g_conv1_w, g_conv1_b, g_conv2_w, g_conv2_b,
                          g_feat_w, g_feat_b, g_head_w, g_head_b)
    return grads, g_input


def features(params: EncoderParams, batch, chunk: int = 64) -> np.ndarray:
    """Feature vectors only, computed in chunks to bound memory."""
    batch = np.asarray(batch, dtype=DTYPE)
    out = [forward(params, batch[i:i + chunk], need_cache=False)[0]
           for i in range(0, len(batch), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, FEATURE_DIM))


def logits(params: EncoderParams, batch, chunk: int = 64) -> np.ndarray:
    batch = np.asarray(batch, dtype=DTYPE)
    out = [forward(params, batch[i:i + chunk], need_cache=False)[1]
           for i in range(0, len(batch), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.num_classes))


# ---------------------------------------------------------------------------
# training and evaluation


def softmax_cross_entropy(logits_, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits_ - logits_.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class TrainConfig:
    iterations: int = 1500
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ContractError("iterations must be >= 0 and batch_size >= 1")


@dataclass
class TrainResult:
    params: EncoderParams
    loss_trace: list = field(default_factory=list)
    accuracy_trace: list = field(default_factory=list)


def train_classifier(videos, labels, num_classes: int, config: TrainConfig,
                     purpose: str = "teacher") -> TrainResult:
    """Minimise softmax cross-entropy with momentum SGD on random minibatches."""
    videos = np.asarray(videos, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.intp)
    if len(videos) == 0:
        raise ContractError("cannot train on an empty set")
    if len(videos) != len(labels):
        raise ContractError("videos and labels differ in length")
    _, L, _, _, C = videos.shape
    root = RngStream(config.seed, purpose)
    params = init_params(root.fork(purpose=f"{purpose}/init"), L, C, num_classes)
    states = {k: SgdState.zeros_like(v, config.learning_rate, config.momentum)
              for k, v in params.arrays().items()}
    result = TrainResult(params)
    n = len(videos)
    bs = min(config.batch_size, n)
    for it in range(config.iterations):
        idx = root.fork(purpose=f"{purpose}/batch", iteration=it).generator().choice(n, bs, replace=False)
        _, out, cache = forward(params, videos[idx])
        loss, g = softmax_cross_entropy(out, labels[idx])
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss became non-finite at iteration {it}")
        grads, _ = backward(params, cache, grad_logits=g, need_input_grad=False)
        params = EncoderParams(**{
            k: sgd_step(v, getattr(grads, k), states[k]) for k, v in params.arrays().items()
        })
        result.loss_trace.append(float(loss))
        result.accuracy_trace.append(float(np.mean(out.argmax(axis=1) == labels[idx])))
    result.params = params
    return result


def train_teacher(train, config: TrainConfig | None = None) -> TrainResult:
    """Train on a :class:`~tempodistill.corpus.LabeledVideoSet`."""
    config = config or TrainConfig()
    return train_classifier(train.videos, train.labels, train.num_classes, config, purpose="teacher")


def predict(params: EncoderParams, videos) -> np.ndarray:
    return logits(params, videos).argmax(axis=1)


def apply_resolution_map(videos, labels, resolution_map) -> np.ndarray:
    """Partition each video with the resolution of its class."""
    videos = np.asarray(videos, dtype=DTYPE)
    out = videos.copy()
    for cls in np.unique(labels):
        if int(cls) not in resolution_map:
            raise ContractError(f"class {int(cls)} missing from resolution map")
        sel = labels == cls
        out[sel] = partition(videos[sel], resolution_map[int(cls)])
    return out


def evaluate(params: EncoderParams, test, resolution_map=None) -> dict:
    """Per-class and overall accuracy; classes with no test videos map to ``None``."""
    labels = np.asarray(test.labels, dtype=np.intp)
    videos = np.asarray(test.videos, dtype=DTYPE)
    num_classes = params.num_classes
    if resolution_map is not None:
        unknown = [c for c in resolution_map if not 0 <= int(c) < num_classes]
        if unknown:
            raise ContractError(f"resolution map names unknown classes {unknown}")
        videos = apply_resolution_map(videos, labels, {int(k): int(v) for k, v in resolution_map.items()})
    pred = predict(params, videos) if len(videos) else np.zeros(0, dtype=np.intp)
    per_class = {}
    for c in range(num_classes):
        sel = labels == c
        per_class[c] = float(np.mean(pred[sel] == c)) if sel.any() else None
    overall = float(np.mean(pred == labels)) if len(labels) else None
    return {"per_class": per_class, "overall": overall}


# ---------------------------------------------------------------------------
# checkpoint container

PARAMS_MAGIC = b"DVDP"
PARAMS_VERSION = 1


def save_params(params: EncoderParams, path) -> None:
    """Write ``DVDP`` container: magic, u16 version, u16 block count, then
    per block a u8 rank, u32 dims and little-endian f64 payload."""
    arrays = params.arrays()
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<HH", PARAMS_VERSION, len(arrays)))
        for name in PARAM_NAMES:
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_params(path) -> EncoderParams:
    from .corpus import BadMagicError, TruncatedPayloadError, VersionMismatchError

    data = Path(path).read_bytes()
    if data[:4] != PARAMS_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedPayloadError(f"{path}: truncated payload")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<HH", take(4))
    if version != PARAMS_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {PARAMS_VERSION}")
    if count != len(PARAM_NAMES):
        raise ContractError(f"{path}: expected {len(PARAM_NAMES)} blocks, found {count}")
    arrays = {}
    for name in PARAM_NAMES:
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(DTYPE)
    return EncoderParams(**arrays)
