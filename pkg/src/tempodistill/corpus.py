"""Toy video corpus with classes of known temporal dynamics.

Static classes differ by appearance and are identifiable from any single
frame. Dynamic classes all render the same Gaussian ``dot`` and differ only by
how it moves, so a single frame never identifies them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numkit import DTYPE, ContractError, RngStream

GENERATOR_VERSION = "toy-1"

APPEARANCES = ("circle", "square", "stripes", "checker", "dot")
MOTIONS = ("none", "jitter", "left", "right", "up", "down", "oscillate_slow", "oscillate_fast")
SPLITS = ("train", "test", "reward")

DOT_SIGMA = 0.7

# Oscillation periods in frames.
_PERIODS = {"oscillate_slow": 8.0, "oscillate_fast": 4.0}


class ConfigError(ValueError):
    """Invalid corpus or run configuration."""


class CorpusFormatError(ValueError):
    """Base class for container decoding failures."""


class BadMagicError(CorpusFormatError):
    pass


class VersionMismatchError(CorpusFormatError):
    pass


class TruncatedPayloadError(CorpusFormatError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    appearance: str
    motion: str = "none"
    speed: float = 0.0

    def __post_init__(self):
        if self.appearance not in APPEARANCES:
            raise ConfigError(f"unknown appearance {self.appearance!r}")
        if self.motion not in MOTIONS:
            raise ConfigError(f"unknown motion {self.motion!r}")
        if self.speed < 0:
            raise ConfigError("speed must be >= 0")
        if self.motion == "none" and self.speed != 0:
            raise ConfigError(f"class {self.class_id}: motion 'none' requires speed 0")

    @property
    def is_dynamic(self) -> bool:
        return self.motion != "none"

    @property
    def name(self) -> str:
        if not self.is_dynamic:
            return self.appearance
        return f"{self.appearance}-{self.motion}"


def default_classes() -> list[ClassSpec]:
    return [
        ClassSpec(0, "circle"),
        ClassSpec(1, "square"),
        ClassSpec(2, "stripes"),
        ClassSpec(3, "checker"),
        ClassSpec(4, "dot", "left", 2.0),
        ClassSpec(5, "dot", "right", 2.0),
        ClassSpec(6, "dot", "up", 2.0),
        ClassSpec(7, "dot", "down", 2.0),
    ]


@dataclass
class CorpusConfig:
    classes: list = field(default_factory=default_classes)
    per_class_train: int = 16
    per_class_test: int = 16
    per_class_reward: int = 16
    T: int = 8
    H: int = 16
    W: int = 16
    C: int = 1
    noise_std: float = 0.05
    # Start positions are drawn within this many pixels of the frame centre.
    position_spread: float = 8.0
    n_dots: int = 10
    seed: int = 0

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]

    def validate(self) -> "CorpusConfig":
        if min(self.T, self.H, self.W) < 1:
            raise ConfigError("T, H, W must be >= 1")
        if self.C not in (1, 3):
            raise ConfigError("C must be 1 or 3")
        if min(self.per_class_train, self.per_class_test, self.per_class_reward) < 1:
            raise ConfigError("per-class counts must be >= 1")
        if self.noise_std < 0 or self.position_spread < 0:
            raise ConfigError("noise_std and position_spread must be >= 0")
        if not self.classes:
            raise ConfigError("at least one class is required")
        ids = [c.class_id for c in self.classes]
        if sorted(ids) != list(range(len(ids))):
            raise ConfigError(f"class ids must be 0..M-1, got {ids}")
        keys = [(c.appearance, c.motion, c.speed) for c in self.classes]
        if len(set(keys)) != len(keys):
            raise ConfigError("two classes share the same (appearance, motion, speed)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        return d


@dataclass(eq=False)
class LabeledVideoSet:
    videos: np.ndarray
    labels: np.ndarray
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.videos = np.asarray(self.videos, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.videos.ndim != 5:
            raise ContractError(f"videos must be (n, T, H, W, C), got {self.videos.shape}")
        if len(self.videos) != len(self.labels):
            raise ContractError("videos and labels differ in length")
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, LabeledVideoSet):
            return NotImplemented
        return (self.split == other.split and self.meta == other.meta
                and np.array_equal(self.labels, other.labels)
                and self.videos.shape == other.videos.shape
                and np.array_equal(self.videos, other.videos))

    @property
    def num_classes(self) -> int:
        if "num_classes" in self.meta:
            return int(self.meta["num_classes"])
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def shape(self) -> tuple:
        return tuple(self.videos.shape[1:])

    def of_class(self, c: int) -> np.ndarray:
        return self.videos[self.labels == c]

    def subset(self, idx, split=None) -> "LabeledVideoSet":
        return LabeledVideoSet(self.videos[idx], self.labels[idx], split or self.split, dict(self.meta))


# ---------------------------------------------------------------------------
# rendering


def _periodic_delta(grid, centre, size):
    d = (grid - centre) % size
    return np.minimum(d, size - d)


def _render(spec: ClassSpec, y: float, x: float, H: int, W: int, dots=None) -> np.ndarray:
    """One (H, W) frame with the pattern anchored at ``(y, x)`` on a torus."""
    yy, xx = np.meshgrid(np.arange(H, dtype=DTYPE), np.arange(W, dtype=DTYPE), indexing="ij")
    if spec.appearance == "dot":
        # Sparse field of small dots; ``dots`` holds their offsets from the anchor.
        frame = np.zeros((H, W), dtype=DTYPE)
        for oy, ox in dots:
            dy = _periodic_delta(yy, y + oy, H)
            dx = _periodic_delta(xx, x + ox, W)
            frame = np.maximum(frame, np.exp(-(dy ** 2 + dx ** 2) / (2 * DOT_SIGMA ** 2)))
        return frame
    dy = _periodic_delta(yy, y, H)
    dx = _periodic_delta(xx, x, W)
    if spec.appearance == "circle":
        r = max(H, W) / 4.0
        return (dy ** 2 + dx ** 2 <= r * r).astype(DTYPE)
    if spec.appearance == "square":
        half = max(H, W) / 6.0
        return ((dy <= half) & (dx <= half)).astype(DTYPE)
    if spec.appearance == "stripes":
        return (np.floor((xx - x) / 4.0) % 2 == 0).astype(DTYPE)
    if spec.appearance == "checker":
        return ((np.floor((yy - y) / 4.0) + np.floor((xx - x) / 4.0)) % 2 == 0).astype(DTYPE)
    raise ConfigError(f"unknown appearance {spec.appearance!r}")


def trajectory(spec: ClassSpec, T: int, y0: float, x0: float, jitter=None) -> np.ndarray:
    """Pattern anchor ``(y, x)`` per frame; every motion starts at ``(y0, x0)``."""
    t = np.arange(T, dtype=DTYPE)
    y = np.full(T, y0)
    x = np.full(T, x0)
    m, v = spec.motion, spec.speed
    if m == "left":
        x = x0 - v * t
    elif m == "right":
        x = x0 + v * t
    elif m == "up":
        y = y0 - v * t
    elif m == "down":
        y = y0 + v * t
    elif m in _PERIODS:
        period = _PERIODS[m]
        amplitude = v * period / (2 * np.pi)  # peak speed equals ``v``
        x = x0 + amplitude * np.sin(2 * np.pi * t / period)
    elif m == "jitter":
        if jitter is None:
            jitter = np.zeros((T, 2))
        jitter = np.asarray(jitter, dtype=DTYPE).copy()
        jitter[0] = 0.0
        y = y0 + v * jitter[:, 0]
        x = x0 + v * jitter[:, 1]
    return np.stack([y, x], axis=1)


def render_video(spec: ClassSpec, T: int, H: int, W: int, C: int, y0: float, x0: float,
                 jitter=None, dots=None) -> np.ndarray:
    if dots is None:
        dots = [(0.0, 0.0)]
    frames = [_render(spec, y, x, H, W, dots) for y, x in trajectory(spec, T, y0, x0, jitter)]
    video = np.stack(frames)[..., None]
    return np.repeat(video, C, axis=-1)


def _generate_split(config: CorpusConfig, split: str, count: int) -> LabeledVideoSet:
    T, H, W, C = config.T, config.H, config.W, config.C
    videos, labels = [], []
    for spec in config.classes:
        rng = RngStream(config.seed, f"corpus/{split}", spec.class_id).generator()
        for _ in range(count):
            r = config.position_spread
            y0 = (H - 1) / 2.0 + rng.uniform(-r, r)
            x0 = (W - 1) / 2.0 + rng.uniform(-r, r)
            jitter = rng.uniform(-1.0, 1.0, size=(T, 2))
            dots = rng.uniform(0, 1, size=(config.n_dots, 2)) * (H, W)
            video = render_video(spec, T, H, W, C, y0, x0, jitter, dots)
            if config.noise_std > 0:
                video = video + rng.normal(0.0, config.noise_std, size=video.shape)
            videos.append(np.clip(video, 0.0, 1.0))
            labels.append(spec.class_id)
    # Stored as f32 on disk; keep values f32-representable so round trips are exact.
    arr = np.stack(videos).astype(np.float32).astype(DTYPE)
    meta = {"seed": int(config.seed), "generator_version": GENERATOR_VERSION,
            "num_classes": len(config.classes)}
    return LabeledVideoSet(arr, np.asarray(labels), split, meta)


def generate(config: CorpusConfig | None = None):
    """Return ``(train, test, reward)`` sets; a pure function of ``config``."""
    config = (config or CorpusConfig()).validate()
    return tuple(
        _generate_split(config, split, count)
        for split, count in (("train", config.per_class_train),
                             ("test", config.per_class_test),
                             ("reward", config.per_class_reward))
    )


def staticize(video_set: LabeledVideoSet, rng: RngStream) -> LabeledVideoSet:
    """Keep one uniformly chosen frame per video, repeated over the full length."""
    if len(video_set) == 0:
        raise ContractError("cannot staticize an empty set")
    T = video_set.videos.shape[1]
    picks = staticize_indices(len(video_set), T, rng)
    frames = video_set.videos[np.arange(len(video_set)), picks]
    videos = np.repeat(frames[:, None], T, axis=1)
    return LabeledVideoSet(videos, video_set.labels.copy(), video_set.split, dict(video_set.meta))


def staticize_indices(n: int, T: int, rng: RngStream) -> np.ndarray:
    return rng.fork(purpose="staticize").generator().integers(0, T, size=n)


# ---------------------------------------------------------------------------
# container

MAGIC = b"DVDC"
VERSION = 1
_HEADER = struct.Struct("<4sH5I")


def save(video_set: LabeledVideoSet, path) -> None:
    """Write magic, u16 version, u32 (count, T, H, W, C), u32 labels, f32 pixels.

    Split and meta are not part of the binary; they travel in the manifest
    (see :func:`write_manifest`).
    """
    n, T, H, W, C = video_set.videos.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, T, H, W, C))
        fh.write(video_set.labels.astype("<u4").tobytes())
        fh.write(video_set.videos.astype("<f4").tobytes())


def load(path, split: str | None = None, meta: dict | None = None) -> LabeledVideoSet:
    """Read a container; split defaults to the file stem, meta to the manifest entry."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header")
    _, version, n, T, H, W, C = _HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    n_px = n * T * H * W * C
    expected = _HEADER.size + 4 * n + 4 * n_px
    if len(data) < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, found {len(data)}")
    labels = np.frombuffer(data, "<u4", n, _HEADER.size).astype(np.int64)
    pixels = np.frombuffer(data, "<f4", n_px, _HEADER.size + 4 * n)
    videos = pixels.astype(DTYPE).reshape(n, T, H, W, C)
    if split is None:
        split = path.stem if path.stem in SPLITS else "train"
    if meta is None:
        manifest = path.parent / "manifest.json"
        meta = {}
        if manifest.exists():
            meta = json.loads(manifest.read_text()).get("meta", {})
    return LabeledVideoSet(videos, labels, split, dict(meta))


def write_manifest(directory, config: CorpusConfig, sets) -> Path:
    directory = Path(directory)
    payload = {
        "format": "DVDC",
        "version": VERSION,
        "meta": dict(sets[0].meta),
        "config": config.to_dict(),
        "classes": [dict(asdict(c), name=c.name, dynamic=c.is_dynamic) for c in config.classes],
        "files": {s.split: f"{s.split}.dvdc" for s in sets},
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def save_corpus(directory, config: CorpusConfig, sets) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in sets:
        p = directory / f"{s.split}.dvdc"
        save(s, p)
        paths.append(p)
    paths.append(write_manifest(directory, config, sets))
    return paths


def load_corpus(directory):
    """Return ``(config, train, test, reward)`` from a directory written by :func:`save_corpus`."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    config = CorpusConfig(**manifest["config"])
    sets = tuple(load(directory / f"{split}.dvdc", split, manifest["meta"]) for split in SPLITS)
    return (config,) + sets


def dynamic_class_ids(config: CorpusConfig) -> list[int]:
    return [c.class_id for c in config.classes if c.is_dynamic]


def static_class_ids(config: CorpusConfig) -> list[int]:
    return [c.class_id for c in config.classes if not c.is_dynamic]
