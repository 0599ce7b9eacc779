"""Toy factorized space-time transformer over pre-tokenized frame patches.

Each block runs temporal attention (every token position attends across the
frames at that position), then spatial attention (within a frame, across its
CLS copy and patches), then an MLP, all pre-norm with residuals.  The temporal
output projections and temporal position embedding start at zero, so a fresh
encoder is exactly the frame-level model averaged over frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import InvalidArgumentError, NumericalFailureError


@dataclass(frozen=True)
class EncoderConfig:
    T: int = 8
    S: int = 4
    d_in: int = 24
    d_e: int = 32
    d_out: int = 16
    L: int = 2
    H_att: int = 2
    mlp_ratio: int = 2

    def __post_init__(self):
        for name in ("T", "S", "d_in", "d_e", "d_out", "L", "H_att", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"encoder.{name} must be positive")
        if self.d_e % self.H_att:
            raise InvalidArgumentError(f"d_e={self.d_e} is not divisible by H_att={self.H_att}")


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    d, h = cfg.d_e, cfg.d_e * cfg.mlp_ratio
    shapes = {
        "w_patch": (cfg.d_in, d),
        "b_patch": (d,),
        "cls": (d,),
        "pos_space": (cfg.S + 1, d),
        "pos_time": (cfg.T, d),
    }
    for i in range(cfg.L):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln_t_g": (d,), p + "ln_t_b": (d,),
            p + "w_qkv_t": (d, 3 * d), p + "w_out_t": (d, d),
            p + "ln_s_g": (d,), p + "ln_s_b": (d,),
            p + "w_qkv_s": (d, 3 * d), p + "w_out_s": (d, d),
            p + "ln_m_g": (d,), p + "ln_m_b": (d,),
            p + "w_mlp1": (d, h), p + "b_mlp1": (h,),
            p + "w_mlp2": (h, d), p + "b_mlp2": (d,),
        })
    shapes.update({"ln_f_g": (d,), "ln_f_b": (d,), "w_head": (d, cfg.d_out)})
    return shapes


TEMPORAL_LEAVES = ("pos_time", "ln_t_g", "ln_t_b", "w_qkv_t", "w_out_t")


def is_temporal(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in TEMPORAL_LEAVES


def is_zero_init(name: str) -> bool:
    return name == "pos_time" or name.endswith("w_out_t")


def decays(name: str) -> bool:
    """Matrix weights get weight decay; norms, biases and embeddings do not."""
    return name.rsplit(".", 1)[-1].startswith("w_")


@dataclass
class EncoderParams:
    cfg: EncoderConfig
    arrays: dict = field(default_factory=dict)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def num_params(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def leaves(self) -> dict[str, nx.Tensor]:
        return {k: nx.parameter(v, k) for k, v in self.arrays.items()}

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k, v in self.arrays.items():
            h.update(k.encode() + v.tobytes())
        return h.hexdigest()


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if is_zero_init(name) or leaf.startswith("b_") or leaf.endswith("_b"):
            arrays[name] = np.zeros(shape)
        elif leaf.endswith("_g"):
            arrays[name] = np.ones(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 and leaf.startswith("w_") else shape[-1]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return EncoderParams(cfg, arrays)


def _forward(cfg: EncoderConfig, p: Mapping, x, temporal: bool, head: bool = True) -> nx.Tensor:
    """``x``: (B, T', S, d_in) -> (B, d_out); T' == T when ``temporal``.

    With ``head=False`` returns the frame-averaged normalized CLS state (B, d_e).
    """
    x = nx.as_tensor(x)
    B, Tn, S, _ = x.shape
    tok = nx.add(nx.matmul(x, p["w_patch"]), p["b_patch"])
    cls = nx.add(np.zeros((B, Tn, 1, cfg.d_e)), p["cls"])
    h = nx.add(nx.concat([cls, tok], axis=2), p["pos_space"])
    if temporal:
        h = nx.add(h, nx.reshape(p["pos_time"], (Tn, 1, cfg.d_e)))
    for i in range(cfg.L):
        q = lambda name: p[f"blocks.{i}.{name}"]  # noqa: E731
        if temporal:
            z = nx.layer_norm(h, q("ln_t_g"), q("ln_t_b"))
            z = nx.transpose(z, (0, 2, 1, 3))             # (B, S+1, T, d_e)
            z = nx.attention(z, q("w_qkv_t"), q("w_out_t"), cfg.H_att)
            h = nx.add(h, nx.transpose(z, (0, 2, 1, 3)))
        z = nx.layer_norm(h, q("ln_s_g"), q("ln_s_b"))
        h = nx.add(h, nx.attention(z, q("w_qkv_s"), q("w_out_s"), cfg.H_att))
        z = nx.layer_norm(h, q("ln_m_g"), q("ln_m_b"))
        z = nx.gelu(nx.add(nx.matmul(z, q("w_mlp1")), q("b_mlp1")))
        h = nx.add(h, nx.add(nx.matmul(z, q("w_mlp2")), q("b_mlp2")))
    cls_out = nx.layer_norm(nx.take(h, 0, axis=2), p["ln_f_g"], p["ln_f_b"])   # (B, T', d_e)
    out = nx.mean(cls_out, axis=1)
    if head:
        out = nx.matmul(out, p["w_head"])
    if not np.all(np.isfinite(out.data)):
        raise NumericalFailureError("non-finite encoder activation")
    return out


def _as_params(params) -> tuple[EncoderConfig, Mapping]:
    if isinstance(params, EncoderParams):
        return params.cfg, params.arrays
    cfg, arrays = params
    return cfg, arrays


def encode_clips(params, clips, tensors: Mapping | None = None) -> nx.Tensor:
    """Batch version of ``encode_clip``: (B, T, S, d_in) -> (B, d_out).

    ``tensors`` overrides ``params.arrays`` (e.g. with gradient-tracking leaves).
    """
    cfg, arrays = _as_params(params)
    clips = np.asarray(clips, dtype=np.float64)
    if clips.ndim != 4 or clips.shape[1:] != (cfg.T, cfg.S, cfg.d_in):
        raise InvalidArgumentError(f"clip batch shape {clips.shape} != (B, {cfg.T}, {cfg.S}, {cfg.d_in})")
    return _forward(cfg, tensors if tensors is not None else arrays, clips, temporal=True)


def encode_clip(params, clip) -> np.ndarray:
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 3:
        raise InvalidArgumentError(f"clip must be T x S x d_in, got shape {clip.shape}")
    return encode_clips(params, clip[None]).data[0]


def encode_frames(params, frames, tensors: Mapping | None = None) -> nx.Tensor:
    """Spatial-only path: (B, S, d_in) -> (B, d_out)."""
    cfg, arrays = _as_params(params)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[1:] != (cfg.S, cfg.d_in):
        raise InvalidArgumentError(f"frame batch shape {frames.shape} != (B, {cfg.S}, {cfg.d_in})")
    return _forward(cfg, tensors if tensors is not None else arrays, frames[:, None], temporal=False)


def encode_frame(params, frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise InvalidArgumentError(f"frame must be S x d_in, got shape {frame.shape}")
    return encode_frames(params, frame[None]).data[0]


def frame_states(params: EncoderParams, frames) -> np.ndarray:
    """Pre-head features of the spatial-only path, (B, S, d_in) -> (B, d_e)."""
    frames = np.asarray(frames, dtype=np.float64)
    return _forward(params.cfg, params.arrays, frames[:, None], temporal=False, head=False).data
