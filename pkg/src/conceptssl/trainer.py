"""EMA teacher/student self-distillation in frozen concept spaces.

Each step: two views per video, the teacher encodes view 1, the student view 2,
both are projected through the frozen category/description spaces, the
combined loss is backpropagated into the student only, AdamW with cosine decay
updates the student, and the teacher takes an EMA step toward it.

Every random draw comes from a generator keyed on (seed, purpose, counter), so
a run resumed from a checkpoint replays exactly the same stream.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .concept_space import ConceptSpace, project_to_space
from .encoder import EncoderConfig, EncoderParams, decays, encode_clips
from .errors import FormatError, InvalidArgumentError, NumericalFailureError, ParseError
from .objectives import MovingAverageState, ObjectiveConfig, total_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"LSSCKPT1"
METRIC_COLUMNS = ("step", "epoch", "lr", "L_total", "L_CD_C", "L_UP_C", "L_CD_D", "L_UP_D",
                  "L_CA", "w_s_mean", "ma_entropy_C", "ma_entropy_D", "teacher_entropy_C")

# rng purposes
_SHUFFLE, _VIEWS = 1, 2


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr_init: float = 3e-4
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_rho: float = 0.02
    ema_mode: str = "rho"
    seed: int = 0
    checkpoint_interval: int = 0
    sigma_aug: float = 0.05
    scale_aug: bool = True
    symmetric: bool = False
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_interval < 0:
            raise InvalidArgumentError("epochs, batch_size and checkpoint_interval must be non-negative")
        if self.lr_init < 0 or self.weight_decay < 0 or self.sigma_aug < 0:
            raise InvalidArgumentError("lr_init, weight_decay and sigma_aug must be non-negative")
        if self.ema_mode not in ("rho", "momentum"):
            raise InvalidArgumentError("ema_mode must be 'rho' or 'momentum'")
        if not 0 < self.ema_rho < 1:
            raise InvalidArgumentError("ema_rho must lie in (0, 1)")

    @property
    def pull(self) -> float:
        """Per-step weight of the student in the teacher update."""
        return self.ema_rho if self.ema_mode == "rho" else 1.0 - self.ema_rho


@dataclass
class TrainerState:
    student: EncoderParams
    teacher: EncoderParams
    adam_m: dict
    adam_v: dict
    ma: MovingAverageState
    step: int = 0
    seed: int = 0
    metrics: list = field(default_factory=list)

    @classmethod
    def fresh(cls, init: EncoderParams, space_sizes: dict, seed: int) -> "TrainerState":
        return cls(
            student=init.copy(),
            teacher=init.copy(),
            adam_m={k: np.zeros_like(v) for k, v in init.arrays.items()},
            adam_v={k: np.zeros_like(v) for k, v in init.arrays.items()},
            ma=MovingAverageState.uniform(space_sizes),
            seed=seed,
        )


def cosine_lr(step: int, total_steps: int, lr_init: float) -> float:
    if total_steps <= 0:
        return lr_init
    return lr_init * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


# ---------------------------------------------------------------- views

def view_indices(length: int, T: int, rng: np.random.Generator) -> np.ndarray:
    """T indices at one random integer gap, inside one random interval."""
    if length < T:
        raise InvalidArgumentError(f"video of {length} frames is shorter than T={T}")
    if T == 1:
        return np.array([int(rng.integers(length))])
    gap = int(rng.integers(1, (length - 1) // (T - 1) + 1))
    span = (T - 1) * gap + 1
    start = int(rng.integers(length - span + 1))
    return start + gap * np.arange(T)


def augment(clip: np.ndarray, rng: np.random.Generator, sigma: float, scale: bool) -> np.ndarray:
    """Feature-space augmentation: per-dimension scaling in [0.9, 1.1] plus Gaussian jitter."""
    out = clip
    if scale:
        out = out * rng.uniform(0.9, 1.1, size=clip.shape[-1])
    if sigma > 0:
        out = out + sigma * rng.standard_normal(clip.shape)
    return out


def sample_views(video: np.ndarray, T: int, rng: np.random.Generator, sigma_aug: float = 0.05,
                 scale_aug: bool = True, same_interval: bool = False):
    """Two augmented T-frame clips from independent random intervals of one video."""
    video = np.asarray(video, dtype=np.float64)
    i1 = view_indices(len(video), T, rng)
    i2 = i1 if same_interval else view_indices(len(video), T, rng)
    return (augment(video[i1], rng, sigma_aug, scale_aug),
            augment(video[i2], rng, sigma_aug, scale_aug))


# ---------------------------------------------------------------- updates

def ema_update(teacher: EncoderParams, student: EncoderParams, rho: float) -> EncoderParams:
    """In place: teacher <- (1 - rho) * teacher + rho * student."""
    if not 0 < rho <= 1:
        raise InvalidArgumentError(f"rho {rho} outside (0, 1]")
    if teacher.arrays.keys() != student.arrays.keys():
        raise InvalidArgumentError("teacher and student have different parameters")
    for k, t in teacher.arrays.items():
        s = student.arrays[k]
        if t.shape != s.shape:
            raise InvalidArgumentError(f"shape mismatch for {k}: {t.shape} vs {s.shape}")
        if rho == 1:
            teacher.arrays[k] = s.copy()
        else:
            # exact when s == t, unlike (1 - rho) * t + rho * s
            teacher.arrays[k] = t + rho * (s - t)
    return teacher


def adamw_update(params: dict, grads: dict, m: dict, v: dict, t: int, lr: float,
                 cfg: TrainConfig, decay_filter=decays):
    """One decoupled-weight-decay Adam step; ``t`` is the 1-based step count."""
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * m[k] + (1.0 - b1) * g
        v[k] = b2 * v[k] + (1.0 - b2) * g * g
        if cfg.weight_decay and decay_filter(k):
            p = p * (1.0 - lr * cfg.weight_decay)
        params[k] = p - lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + cfg.adam_eps)


# ---------------------------------------------------------------- one step

def _needs_description(cfg: ObjectiveConfig) -> bool:
    return cfg.use_description_space or cfg.use_alignment


def step_loss(student_tensors, teacher: EncoderParams, clips_teacher, clips_student,
              spaces: dict, ma: MovingAverageState, cfg: TrainConfig, update_state: bool = False):
    """Loss of one step as a function of the student tensors (used by train_step and gradcheck)."""
    f1 = encode_clips(teacher, clips_teacher).data
    f2 = encode_clips((teacher.cfg, student_tensors), clips_student)
    keys = ("C", "D") if _needs_description(cfg.objective) else ("C",)
    t_scores = {k: project_to_space(spaces[k], f1).raw.data for k in keys}
    s_scores = {k: project_to_space(spaces[k], f2).raw for k in keys}
    return total_loss(t_scores, s_scores, ma, cfg.objective, update_state=update_state)


def make_views(batch: np.ndarray, T: int, rng: np.random.Generator, cfg: TrainConfig):
    v1, v2 = [], []
    for video in batch:
        a, b = sample_views(video, T, rng, cfg.sigma_aug, cfg.scale_aug)
        v1.append(a)
        v2.append(b)
    v1, v2 = np.stack(v1), np.stack(v2)
    if cfg.symmetric:
        return np.concatenate([v1, v2]), np.concatenate([v2, v1])
    return v1, v2


def train_step(state: TrainerState, batch: np.ndarray, spaces: dict, cfg: TrainConfig,
               total_steps: int, epoch: int = 0) -> dict:
    """Advance ``state`` by one optimizer step on a batch of unlabeled videos.

    On a non-finite loss or gradient, raises and leaves ``state`` untouched.
    """
    if len(batch) == 0:
        raise InvalidArgumentError("empty batch")
    rng = nx.make_rng(state.seed, _VIEWS, state.step)
    clips_t, clips_s = make_views(batch, state.student.cfg.T, rng, cfg)
    leaves = state.student.leaves()
    ma = state.ma.copy()
    loss, breakdown = step_loss(leaves, state.teacher, clips_t, clips_s, spaces, ma, cfg,
                                update_state=True)
    if not math.isfinite(loss.item()):
        raise NumericalFailureError(f"non-finite loss at step {state.step}")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericalFailureError(f"non-finite gradient at step {state.step}")

    lr = cosine_lr(state.step, total_steps, cfg.lr_init)
    adamw_update(state.student.arrays, grads, state.adam_m, state.adam_v, state.step + 1, lr, cfg)
    ema_update(state.teacher, state.student, cfg.pull)
    state.ma = ma
    row = {"step": state.step, "epoch": epoch, "lr": lr, **breakdown}
    state.metrics.append(row)
    state.step += 1
    return row


# ---------------------------------------------------------------- full run

def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return nx.make_rng(seed, _SHUFFLE, epoch).permutation(n)


def _append_metrics(path, rows, header: bool):
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in METRIC_COLUMNS])


def run_training(videos, spaces: dict, cfg: TrainConfig, init: EncoderParams | None = None,
                 state: TrainerState | None = None, metrics_path=None, checkpoint_dir=None,
                 stop_after: int | None = None, progress=None) -> TrainerState:
    """SSL training over ``videos`` (N, length, S, d_in) or a dataset; labels are never read.

    Pass ``state`` to resume; ``stop_after`` ends the run after that many global
    steps (the schedule still spans the full ``cfg.epochs``).
    """
    tokens = getattr(videos, "tokens", videos)
    n = len(tokens)
    if n == 0:
        raise InvalidArgumentError("empty dataset")
    for k, space in spaces.items():
        if not isinstance(space, ConceptSpace):
            raise InvalidArgumentError(f"space {k} is not a ConceptSpace")
    if state is None:
        if init is None:
            raise InvalidArgumentError("need either an initial encoder or a state to resume")
        sizes = {k: s.n for k, s in spaces.items()}
        state = TrainerState.fresh(init, sizes, cfg.seed)
    per_epoch = steps_per_epoch(n, cfg.batch_size)
    total = cfg.epochs * per_epoch
    end = total if stop_after is None else min(total, stop_after)
    digests = {k: s.digest() for k, s in spaces.items()}
    if metrics_path is not None and (state.step == 0 or not os.path.exists(metrics_path)):
        open(metrics_path, "w").close()
        header = True
    else:
        header = False

    order, order_epoch = None, -1
    while state.step < end:
        epoch, pos = divmod(state.step, per_epoch)
        if epoch != order_epoch:
            order, order_epoch = epoch_order(state.seed, epoch, n), epoch
        idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        row = train_step(state, tokens[idx], spaces, cfg, total, epoch)
        if metrics_path is not None:
            _append_metrics(metrics_path, [row], header)
            header = False
        if progress is not None:
            progress(row)
        if checkpoint_dir is not None and cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
            path = os.path.join(checkpoint_dir, f"ckpt_{state.step:07d}.bin")
            try:
                save_checkpoint(state, path)
            except OSError as exc:
                if metrics_path is not None:
                    with open(metrics_path, "a") as fh:
                        fh.write(f"# WARNING: checkpoint write failed at step {state.step}; "
                                 f"state is partial: {exc}\n")
                raise
    for k, s in spaces.items():
        if s.digest() != digests[k]:
            raise RuntimeError(f"concept space {k} changed during training")
    return state


# ---------------------------------------------------------------- checkpoints

def _encoder_cfg_vector(cfg: EncoderConfig) -> np.ndarray:
    return np.array([cfg.T, cfg.S, cfg.d_in, cfg.d_e, cfg.d_out, cfg.L, cfg.H_att, cfg.mlp_ratio], float)


def state_tensors(state: TrainerState) -> dict:
    out = {"meta/encoder": _encoder_cfg_vector(state.student.cfg),
           "meta/step": np.array([state.step], float),
           "meta/rng": np.array([state.seed, state.step], float)}
    for prefix, d in (("student", state.student.arrays), ("teacher", state.teacher.arrays),
                      ("adam_m", state.adam_m), ("adam_v", state.adam_v)):
        for k, v in d.items():
            out[f"{prefix}/{k}"] = v
    for k, v in state.ma.dists.items():
        out[f"ma/{k}"] = v
    return out


def write_tensors(path, tensors: dict, magic: bytes = CKPT_MAGIC):
    parts = [magic, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def read_tensors(path, magic: bytes = CKPT_MAGIC) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(magic):
        raise ParseError("truncated before magic", offset=len(buf))
    if buf[:len(magic)] != magic:
        raise FormatError(f"bad magic {buf[:len(magic)]!r}, expected {magic!r}")
    pos = len(magic)

    def need(k):
        if pos + k > len(buf) - 4:
            raise ParseError("truncated checkpoint", offset=pos)

    need(4)
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(count):
        need(4)
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(nlen + 4)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) * 8
        need(size)
        out[name] = np.frombuffer(buf, "<f8", size // 8, pos).reshape(dims).astype(np.float64)
        pos += size
    if pos != len(buf) - 4:
        raise ParseError("unexpected trailing bytes", offset=pos)
    (crc,) = struct.unpack_from("<I", buf, pos)
    if crc != zlib.crc32(buf[:pos]):
        raise FormatError("checksum mismatch")
    return out


def save_checkpoint(state: TrainerState, path):
    write_tensors(path, state_tensors(state))


def load_checkpoint(path) -> TrainerState:
    t = read_tensors(path)
    try:
        enc = EncoderConfig(*(int(x) for x in t["meta/encoder"]))
        seed, step = (int(x) for x in t["meta/rng"])
    except KeyError as exc:
        raise FormatError(f"checkpoint lacks {exc}") from None
    groups: dict = {"student": {}, "teacher": {}, "adam_m": {}, "adam_v": {}, "ma": {}}
    for name, arr in t.items():
        prefix, _, key = name.partition("/")
        if prefix in groups:
            groups[prefix][key] = arr
    return TrainerState(
        student=EncoderParams(enc, groups["student"]),
        teacher=EncoderParams(enc, groups["teacher"]),
        adam_m=groups["adam_m"], adam_v=groups["adam_v"],
        ma=MovingAverageState(groups["ma"]), step=step, seed=seed,
    )
