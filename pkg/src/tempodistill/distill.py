"""Distribution-matching distillation of compact synthetic videos.

Each class keeps ``ipc`` synthetic videos stored compactly as ``(a_m, H, W, C)``
frame stacks. Every update expands them to the full length ``L``, encodes them
with a freshly drawn random encoder, and pulls the class-mean feature towards
the mean feature of a real batch of the same class.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from .numkit import DTYPE, ContractError, DivergenceError, RngStream, SgdState, sgd_step, uniform
from .partition import CompactVideo, expand_adjoint, expand_frames


@dataclass
class DistillConfig:
    N: int = 200
    beta: float = 0.05
    lr_syn: float = 10.0
    momentum_syn: float = 0.95
    real_batch_per_class: int = 8
    ipc: int = 1

    def validate(self) -> "DistillConfig":
        if self.N < 1:
            raise ContractError("N must be >= 1")
        if not 0 < self.beta <= 1:
            raise ContractError("beta must lie in (0, 1]")
        if self.ipc < 1 or self.real_batch_per_class < 1:
            raise ContractError("ipc and real_batch_per_class must be >= 1")
        if self.lr_syn < 0 or not 0 <= self.momentum_syn < 1:
            raise ContractError("lr_syn must be >= 0 and momentum_syn in [0, 1)")
        return self


def early_iters(config: DistillConfig) -> int:
    """``round(beta * N)``, never below one iteration."""
    config.validate()
    # Half-up rounding; Python's round() would send 2.5 to 2.
    return max(1, int(np.floor(config.beta * config.N + 0.5)))


@dataclass(eq=False)
class SyntheticSet:
    """Per class a ``(ipc, a_m, H, W, C)`` array plus the global video shape."""

    frames: dict
    L: int
    H: int
    W: int
    C: int

    def __post_init__(self):
        self.frames = {int(k): np.asarray(v, dtype=DTYPE) for k, v in sorted(self.frames.items())}
        for m, arr in self.frames.items():
            if arr.ndim != 5 or arr.shape[2:] != (self.H, self.W, self.C):
                raise ContractError(f"class {m}: bad synthetic shape {arr.shape}")
            if not 1 <= arr.shape[1] <= self.L:
                raise ContractError(f"class {m}: resolution {arr.shape[1]} outside [1, {self.L}]")

    def __eq__(self, other):
        if not isinstance(other, SyntheticSet):
            return NotImplemented
        return ((self.L, self.H, self.W, self.C) == (other.L, other.H, other.W, other.C)
                and self.frames.keys() == other.frames.keys()
                and all(np.array_equal(self.frames[k], other.frames[k]) for k in self.frames))

    @property
    def classes(self) -> list[int]:
        return list(self.frames)

    @property
    def resolutions(self) -> dict[int, int]:
        return {m: arr.shape[1] for m, arr in self.frames.items()}

    @property
    def ipc(self) -> int:
        return next(iter(self.frames.values())).shape[0]

    def stored_frames(self) -> int:
        return sum(arr.shape[0] * arr.shape[1] for arr in self.frames.values())

    def compact(self, m: int) -> list[CompactVideo]:
        return [CompactVideo(v, self.L) for v in self.frames[m]]

    def expanded(self, m: int) -> np.ndarray:
        return expand_frames(self.frames[m], self.L)

    def copy(self) -> "SyntheticSet":
        return SyntheticSet({k: v.copy() for k, v in self.frames.items()}, self.L, self.H, self.W, self.C)

    def to_training_set(self):
        """Expanded videos and labels, in class order."""
        videos = np.concatenate([self.expanded(m) for m in self.classes])
        labels = np.concatenate([np.full(self.frames[m].shape[0], m) for m in self.classes])
        return videos, labels


def init_synthetic(actions: dict, config: DistillConfig, rng: RngStream,
                   shape: tuple) -> SyntheticSet:
    """Uniform ``[0, 1)`` noise, ``ipc`` compact videos per class."""
    config.validate()
    L, H, W, C = shape
    frames = {}
    for m, a in sorted(actions.items()):
        a = int(a)
        if not 1 <= a <= L:
            raise ContractError(f"class {m}: resolution {a} outside [1, {L}]")
        frames[int(m)] = uniform(rng.fork(purpose=f"{rng.purpose}/init", class_id=int(m)),
                                 0.0, 1.0, (config.ipc, a, H, W, C))
    return SyntheticSet(frames, L, H, W, C)


def dm_loss(syn: SyntheticSet, real_batches: dict, params: enc.EncoderParams):
    """Sum over classes of squared distance between mean features.

    Returns ``(loss, grads, per_class_loss)`` where ``grads[m]`` has the
    compact shape of ``syn.frames[m]``.
    """
    missing = [m for m in syn.classes if m not in real_batches or len(real_batches[m]) == 0]
    if missing:
        raise ContractError(f"no real batch for classes {missing}")
    classes = syn.classes
    real = np.concatenate([np.asarray(real_batches[m], dtype=DTYPE) for m in classes])
    real_feat = enc.features(params, real, chunk=128)
    syn_videos = np.concatenate([syn.expanded(m) for m in classes])
    syn_feat, _, cache = enc.forward(params, syn_videos)

    g_feat = np.zeros_like(syn_feat)
    per_class = {}
    r0 = s0 = 0
    for m in classes:
        nr, ns = len(real_batches[m]), syn.frames[m].shape[0]
        diff = syn_feat[s0:s0 + ns].mean(axis=0) - real_feat[r0:r0 + nr].mean(axis=0)
        per_class[m] = float(diff @ diff)
        g_feat[s0:s0 + ns] = 2.0 * diff / ns
        r0 += nr
        s0 += ns
    _, g_in = enc.backward(params, cache, grad_features=g_feat)

    grads = {}
    s0 = 0
    for m in classes:
        ns, a = syn.frames[m].shape[:2]
        grads[m] = expand_adjoint(g_in[s0:s0 + ns], a)
        s0 += ns
    return sum(per_class.values()), grads, per_class


def sample_real_batches(real, classes, batch: int, rng: RngStream) -> dict:
    out = {}
    for m in classes:
        pool = real.of_class(m)
        if len(pool) == 0:
            raise ContractError(f"no real videos for class {m}")
        g = rng.fork(class_id=m).generator()
        idx = g.choice(len(pool), min(batch, len(pool)), replace=False)
        out[m] = pool[np.sort(idx)]
    return out


@dataclass
class DistillResult:
    synthetic: SyntheticSet
    loss_trace: list = field(default_factory=list)
    class_loss_trace: dict = field(default_factory=dict)
    iterations: int = 0


def dd_update(syn: SyntheticSet, real, iters: int, config: DistillConfig,
              rng: RngStream) -> DistillResult:
    """Run ``iters`` distribution-matching steps on a copy of ``syn``.

    Each step draws a fresh random encoder (keyed by the step index only, so
    every class sees the same encoder) and per-class real batches.
    """
    config.validate()
    if iters < 1:
        raise ContractError("iters must be >= 1")
    syn = syn.copy()
    states = {m: SgdState.zeros_like(a, config.lr_syn, config.momentum_syn) for m, a in syn.frames.items()}
    result = DistillResult(syn, class_loss_trace={m: [] for m in syn.classes})
    for n in range(iters):
        params = enc.init_params(rng.fork(purpose=f"{rng.purpose}/encoder", iteration=n),
                                 syn.L, syn.C, 1)
        batches = sample_real_batches(real, syn.classes, config.real_batch_per_class,
                                      rng.fork(purpose=f"{rng.purpose}/real", iteration=n))
        loss, grads, per_class = dm_loss(syn, batches, params)
        if not np.isfinite(loss):
            raise DivergenceError(f"distribution-matching loss became non-finite at step {n}")
        for m in syn.classes:
            syn.frames[m] = np.clip(sgd_step(syn.frames[m], grads[m], states[m]), 0.0, 1.0)
            result.class_loss_trace[m].append(per_class[m])
        result.loss_trace.append(loss)
    result.iterations = iters
    return result


def distill(real, actions: dict, config: DistillConfig, rng: RngStream,
            iters: int | None = None) -> DistillResult:
    """Fresh noise init followed by ``iters`` (default ``config.N``) updates."""
    shape = tuple(real.videos.shape[1:])
    syn = init_synthetic(actions, config, rng, shape)
    return dd_update(syn, real, iters or config.N, config, rng)


# ---------------------------------------------------------------------------
# checkpoint container

SYN_MAGIC = b"DVDS"
SYN_VERSION = 1


def save_synthetic(syn: SyntheticSet, path, manifest: dict | None = None) -> None:
    """Write magic, u16 version, u32 (M, L, H, W, C), then per class
    u32 (class, a_m, ipc) and f64 pixels; a JSON manifest goes beside it."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(SYN_MAGIC)
        fh.write(struct.pack("<H5I", SYN_VERSION, len(syn.frames), syn.L, syn.H, syn.W, syn.C))
        for m, arr in syn.frames.items():
            fh.write(struct.pack("<3I", m, arr.shape[1], arr.shape[0]))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    info = {"resolutions": {str(k): v for k, v in syn.resolutions.items()},
            "ipc": syn.ipc, "L": syn.L, "stored_frames": syn.stored_frames()}
    info.update(manifest or {})
    path.with_suffix(".json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def load_synthetic(path) -> SyntheticSet:
    from .corpus import BadMagicError, TruncatedPayloadError, VersionMismatchError

    data = Path(path).read_bytes()
    if data[:4] != SYN_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    head = struct.Struct("<H5I")
    if len(data) < 4 + head.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    version, M, L, H, W, C = head.unpack_from(data, 4)
    if version != SYN_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {SYN_VERSION}")
    pos = 4 + head.size
    frames = {}
    for _ in range(M):
        if pos + 12 > len(data):
            raise TruncatedPayloadError(f"{path}: truncated class header")
        m, a, ipc = struct.unpack_from("<3I", data, pos)
        pos += 12
        n = ipc * a * H * W * C
        if pos + 8 * n > len(data):
            raise TruncatedPayloadError(f"{path}: truncated pixels for class {m}")
        frames[m] = np.frombuffer(data, "<f8", n, pos).astype(DTYPE).reshape(ipc, a, H, W, C)
        pos += 8 * n
    return SyntheticSet(frames, L, H, W, C)


def config_dict(config: DistillConfig) -> dict:
    return asdict(config)
