"""Language-grounded self-supervised video learning at desk scale.

Concept spaces of frozen label embeddings, concept distillation with a uniform
prior and cross-space alignment, an EMA-teacher trainer over a factorized
space-time transformer, and a synthetic aligned-embedding world to test it all.
"""

from .concept_space import (ConceptSpace, EmbeddingSet, build_category_space,
                            build_description_space, dedup_embeddings, project_to_space)
from .encoder import EncoderConfig, EncoderParams, encode_clip, encode_frame, init_encoder
from .errors import (ConceptSSLError, ConfigError, DegenerateInputError, FormatError,
                     GenerationError, InvalidArgumentError, NumericalFailureError, ParseError)
from .evaluation import ProbeConfig, linear_probe, zero_shot_classify
from .objectives import MovingAverageState, ObjectiveConfig, cd_loss, total_loss
from .pretrain import PretrainConfig, pretrained_encoder
from .synth_world import WorldConfig, generate_dataset, generate_world
from .trainer import TrainConfig, load_checkpoint, run_training, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConceptSSLError", "ConceptSpace", "ConfigError", "DegenerateInputError", "EmbeddingSet",
    "EncoderConfig", "EncoderParams", "FormatError", "GenerationError", "InvalidArgumentError",
    "MovingAverageState", "NumericalFailureError", "ObjectiveConfig", "ParseError",
    "PretrainConfig", "ProbeConfig", "TrainConfig", "WorldConfig", "build_category_space",
    "build_description_space", "cd_loss", "dedup_embeddings", "encode_clip", "encode_frame",
    "generate_dataset", "generate_world", "init_encoder", "linear_probe", "load_checkpoint",
    "pretrained_encoder", "project_to_space", "run_training", "save_checkpoint", "total_loss",
    "zero_shot_classify",
]
