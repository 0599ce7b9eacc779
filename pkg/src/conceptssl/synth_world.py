"""A synthetic stand-in for a language-aligned image/video embedding universe.

Class prototypes play two roles: they are the "text embeddings" of the class
labels, and they are the generative centers of video frame latents.  A fixed
full-rank linear map takes latents to patch tokens, so an encoder has to learn
(or be given) an inverse before its features line up with the label space.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .concept_space import EmbeddingSet
from .errors import FormatError, GenerationError, InvalidArgumentError, ParseError
from .numerics import make_rng

SPLITS = ("train", "test")
DATA_MAGIC = b"LSSDATA1"


@dataclass(frozen=True)
class WorldConfig:
    num_classes: int = 20
    d: int = 16
    d_in: int = 24
    descriptions_per_class: int = 4
    frames_per_video: int = 8
    S: int = 4
    intra_class_noise: float = 0.4
    description_noise: float = 0.2
    temporal_drift: float = 0.02
    seed: int = 0
    video_length: int = 32
    train_per_class: int = 100
    test_per_class: int = 40
    mixed_fraction: float = 0.0
    separation: float = 0.5
    max_retries: int = 2000
    nuisance_dims: int = 3
    nuisance_gain: float = 2.5

    def __post_init__(self):
        for name in ("num_classes", "d", "d_in", "descriptions_per_class", "frames_per_video",
                     "S", "video_length", "train_per_class", "test_per_class", "max_retries"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"world.{name} must be >= 1")
        if self.nuisance_dims < 0:
            raise InvalidArgumentError("world.nuisance_dims must be >= 0")
        for name in ("intra_class_noise", "description_noise", "temporal_drift", "nuisance_gain"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"world.{name} must be >= 0")
        if self.video_length < self.frames_per_video:
            raise InvalidArgumentError("world.video_length must be >= frames_per_video")
        if not 0 <= self.mixed_fraction <= 1:
            raise InvalidArgumentError("world.mixed_fraction must lie in [0, 1]")
        if not -1 < self.separation <= 1:
            raise InvalidArgumentError("world.separation must lie in (-1, 1]")


@dataclass(frozen=True)
class SynthWorld:
    cfg: WorldConfig
    prototypes: np.ndarray          # (K, d) unit rows
    descriptions: np.ndarray        # (K, m, d) unit rows
    mixing: np.ndarray              # (d, S * d_in)
    nuisance: np.ndarray = None     # (nuisance_dims, d) orthonormal rows

    def tokens(self, latents: np.ndarray) -> np.ndarray:
        """Map latents (..., d) to patch tokens (..., S, d_in)."""
        flat = latents @ self.mixing
        return flat.reshape(*latents.shape[:-1], self.cfg.S, self.cfg.d_in)


@dataclass
class Video:
    tokens: np.ndarray              # (length, S, d_in)
    label: int


@dataclass
class SynthDataset:
    tokens: np.ndarray              # (N, length, S, d_in)
    labels: np.ndarray              # (N,) int; evaluation only
    split: str = "train"
    mixed: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidArgumentError(f"unknown split {self.split!r}")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.mixed is None:
            self.mixed = np.zeros(len(self.labels), dtype=bool)

    def __len__(self):
        return len(self.labels)

    @property
    def video_length(self) -> int:
        return self.tokens.shape[1]


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def generate_world(cfg: WorldConfig) -> SynthWorld:
    rng = make_rng(cfg.seed, 0)
    protos: list[np.ndarray] = []
    for k in range(cfg.num_classes):
        for _ in range(cfg.max_retries):
            cand = _unit(rng.standard_normal(cfg.d))
            if not protos or np.max(np.stack(protos) @ cand) < cfg.separation:
                protos.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place prototype {k} of {cfg.num_classes} in d={cfg.d} with pairwise "
                f"cosine < {cfg.separation} after {cfg.max_retries} draws")
    prototypes = np.stack(protos)
    noise = rng.standard_normal((cfg.num_classes, cfg.descriptions_per_class, cfg.d))
    descriptions = _unit(prototypes[:, None, :] + cfg.description_noise * noise)
    mixing = rng.standard_normal((cfg.d, cfg.S * cfg.d_in)) / np.sqrt(cfg.d)
    if np.linalg.matrix_rank(mixing) < min(mixing.shape):
        raise GenerationError("token mixing map is rank deficient")
    # capped at d so small worlds stay valid
    nuisance = np.linalg.qr(rng.standard_normal((cfg.d, cfg.d)))[0][:, :cfg.nuisance_dims].T
    return SynthWorld(cfg, prototypes, descriptions, mixing, nuisance)


def video_latents(world: SynthWorld, center: np.ndarray, length: int, rng: np.random.Generator):
    """Per-frame latents: center plus isotropic noise, extra noise along the
    nuisance directions, and a random-walk drift."""
    cfg = world.cfg
    noise = cfg.intra_class_noise * rng.standard_normal((length, cfg.d))
    if len(world.nuisance):
        extra = rng.standard_normal((length, len(world.nuisance))) @ world.nuisance
        noise += cfg.nuisance_gain * cfg.intra_class_noise * extra
    steps = cfg.temporal_drift * rng.standard_normal((length, cfg.d))
    steps[0] = 0.0
    return center + noise + np.cumsum(steps, axis=0)


def generate_video(world: SynthWorld, class_id: int, length: int, rng: np.random.Generator,
                   mix_with: int | None = None, mix_weight: float = 0.5) -> Video:
    """Frame tokens for one video; ``mix_with`` blends a second class into the center."""
    cfg = world.cfg
    if not 0 <= class_id < cfg.num_classes:
        raise InvalidArgumentError(f"unknown class {class_id}")
    if length < cfg.frames_per_video:
        raise InvalidArgumentError(f"length {length} < frames_per_video {cfg.frames_per_video}")
    center = world.prototypes[class_id]
    if mix_with is not None:
        if not 0 <= mix_with < cfg.num_classes:
            raise InvalidArgumentError(f"unknown class {mix_with}")
        center = _unit(mix_weight * center + (1 - mix_weight) * world.prototypes[mix_with])
    return Video(world.tokens(video_latents(world, center, length, rng)), class_id)


def generate_dataset(world: SynthWorld, split: str, per_class: int | None = None,
                     mixed_fraction: float | None = None) -> SynthDataset:
    """Class-balanced videos; every video has its own seed derived from (world seed, split, index)."""
    cfg = world.cfg
    if split not in SPLITS:
        raise InvalidArgumentError(f"unknown split {split!r}")
    if per_class is None:
        per_class = cfg.train_per_class if split == "train" else cfg.test_per_class
    if mixed_fraction is None:
        mixed_fraction = cfg.mixed_fraction if split == "train" else 0.0
    n = per_class * cfg.num_classes
    code = SPLITS.index(split) + 1
    n_mixed = int(round(mixed_fraction * n))
    mixed = np.zeros(n, dtype=bool)
    if n_mixed:
        mixed[make_rng(cfg.seed, code, 0).choice(n, size=n_mixed, replace=False)] = True
    tokens = np.empty((n, cfg.video_length, cfg.S, cfg.d_in))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = make_rng(cfg.seed, code, 1, i)
        k = i % cfg.num_classes
        other, weight = None, 0.5
        if mixed[i]:
            other = (k + 1 + int(rng.integers(cfg.num_classes - 1))) % cfg.num_classes
            weight = float(rng.uniform(0.35, 0.65))
        video = generate_video(world, k, cfg.video_length, rng, other, weight)
        tokens[i] = video.tokens
        labels[i] = k
    return SynthDataset(tokens, labels, split, mixed)


def export_label_embeddings(world: SynthWorld):
    """Category embedding set and description groups, labelled ``class_k``."""
    labels = [f"class_{k}" for k in range(world.cfg.num_classes)]
    category = EmbeddingSet(labels, world.prototypes, "synthetic")
    groups = [(label, world.descriptions[k]) for k, label in enumerate(labels)]
    return category, groups


# ---------------------------------------------------------------- LSSDATA1 files

def save_dataset(ds: SynthDataset, path):
    n, length, S, d_in = ds.tokens.shape
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<IIII", n, S, d_in, SPLITS.index(ds.split)))
        for i in range(n):
            fh.write(struct.pack("<II", int(ds.labels[i]), length))
            fh.write(np.ascontiguousarray(ds.tokens[i], dtype="<f8").tobytes())


def load_dataset(path) -> SynthDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != DATA_MAGIC:
        raise FormatError("not an LSSDATA1 file (bad magic)")
    if len(buf) < 24:
        raise ParseError("truncated header", offset=len(buf))
    n, S, d_in, split = struct.unpack_from("<IIII", buf, 8)
    if split >= len(SPLITS):
        raise FormatError(f"unknown split code {split}")
    pos = 24
    labels, videos = [], []
    for i in range(n):
        if pos + 8 > len(buf):
            raise ParseError(f"truncated record {i}", offset=pos)
        label, length = struct.unpack_from("<II", buf, pos)
        pos += 8
        size = length * S * d_in * 8
        if pos + size > len(buf):
            raise ParseError(f"truncated token array in record {i}", offset=pos)
        videos.append(np.frombuffer(buf, "<f8", length * S * d_in, pos).reshape(length, S, d_in))
        labels.append(label)
        pos += size
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes")
    if len({v.shape[0] for v in videos}) > 1:
        raise FormatError("videos of unequal length are not supported")
    tokens = np.stack(videos).astype(np.float64) if videos else np.empty((0, 0, S, d_in))
    return SynthDataset(tokens, np.array(labels), SPLITS[split])
