"""Stand-in for a language-aligned image encoder.

A freshly initialized encoder has random features, so it cannot classify
anything zero-shot.  Here the output head is fit by ridge regression so that
single clean frames ("images") land on their own latent vector, which is the
coordinate system of the concept spaces.  Every other parameter keeps its
random value, and the zero-initialized temporal parameters stay zero, so the
video model still starts as a frame-averaging image model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, frame_states
from .errors import InvalidArgumentError
from .numerics import make_rng
from .synth_world import SynthWorld


@dataclass(frozen=True)
class PretrainConfig:
    num_images: int = 4096
    ridge: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise InvalidArgumentError("pretrain.num_images must be >= 1")
        if self.ridge < 0:
            raise InvalidArgumentError("pretrain.ridge must be >= 0")


def sample_images(world: SynthWorld, num_images: int, rng: np.random.Generator):
    """Clean unit-norm latents in generic directions and their patch tokens."""
    z = rng.standard_normal((num_images, world.cfg.d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z, world.tokens(z)


def align_encoder(params: EncoderParams, world: SynthWorld,
                  cfg: PretrainConfig = PretrainConfig()) -> EncoderParams:
    """Copy of ``params`` whose head maps frame states onto image latents."""
    if params.cfg.d_out != world.cfg.d:
        raise InvalidArgumentError(f"encoder d_out={params.cfg.d_out} but world latent d={world.cfg.d}")
    if params.cfg.S != world.cfg.S or params.cfg.d_in != world.cfg.d_in:
        raise InvalidArgumentError("encoder token shape does not match the world")
    z, tokens = sample_images(world, cfg.num_images, make_rng(cfg.seed, 4))
    h = frame_states(params, tokens)
    gram = h.T @ h + cfg.ridge * np.eye(h.shape[1])
    out = params.copy()
    out.arrays["w_head"] = np.linalg.solve(gram, h.T @ z)
    return out


def pretrained_encoder(world: SynthWorld, enc_cfg, init_seed: int,
                       cfg: PretrainConfig = PretrainConfig()) -> EncoderParams:
    """Random init from ``init_seed`` followed by :func:`align_encoder`."""
    from .encoder import init_encoder
    return align_encoder(init_encoder(enc_cfg, make_rng(init_seed, 3)), world, cfg)
