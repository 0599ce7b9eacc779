"""End-to-end helpers shared by the command line and the acceptance harness."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .concept_space import (ConceptSpace, EmbeddingSet, build_category_space,
                            build_description_space, project_to_space)
from .encoder import EncoderConfig, EncoderParams, encode_clips, init_encoder
from .evaluation import ProbeConfig, extract_features, linear_probe, zero_shot_classify
from .objectives import MovingAverageState, ObjectiveConfig, total_loss
from .pretrain import PretrainConfig, pretrained_encoder
from .synth_world import (SynthDataset, SynthWorld, WorldConfig, export_label_embeddings,
                          generate_dataset, generate_world)
from .trainer import TrainConfig, run_training


@dataclass
class Experiment:
    world: SynthWorld
    train: SynthDataset
    test: SynthDataset
    spaces: dict            # "C" / "D" -> ConceptSpace
    category: EmbeddingSet


def build_experiment(world_cfg: WorldConfig = WorldConfig(),
                     normalize_descriptions: bool = True) -> Experiment:
    world = generate_world(world_cfg)
    category, groups = export_label_embeddings(world)
    spaces = {"C": build_category_space(category),
              "D": build_description_space(groups, normalize_each=normalize_descriptions)}
    return Experiment(world, generate_dataset(world, "train"), generate_dataset(world, "test"),
                      spaces, category)


def teacher_entropy(params: EncoderParams, videos, space: ConceptSpace, lam: float,
                    num_crops: int = 1) -> float:
    """Entropy (nats) of the mean lam-sharpened distribution over ``videos``."""
    feats = extract_features(params, videos, num_crops)
    p = nx.softmax_temp(project_to_space(space, feats).raw.data, lam).data
    return nx.entropy(p.mean(axis=0))


@dataclass
class RunResult:
    init_zero_shot: float
    zero_shot: float
    init_probe: float | None
    probe: float | None
    steps: int
    entropy_ratio: float


def train_and_evaluate(exp: Experiment, enc_cfg: EncoderConfig, train_cfg: TrainConfig,
                       init: EncoderParams, probe_cfg: ProbeConfig | None = None,
                       stop_after: int | None = None, baseline: dict | None = None) -> RunResult:
    """Train from ``init`` and score the student; ``baseline`` caches init numbers between runs."""
    baseline = {} if baseline is None else baseline
    if "zero_shot" not in baseline:
        baseline["zero_shot"] = zero_shot_classify(init, exp.test, exp.spaces["C"])[1].top1
    if probe_cfg is not None and "probe" not in baseline:
        baseline["probe"] = linear_probe(init, exp.train, exp.train.labels, exp.test,
                                         exp.test.labels, probe_cfg).top1
    state = run_training(exp.train, exp.spaces, train_cfg, init=init, stop_after=stop_after)
    zs = zero_shot_classify(state.student, exp.test, exp.spaces["C"])[1].top1
    probe = None
    if probe_cfg is not None:
        probe = linear_probe(state.student, exp.train, exp.train.labels, exp.test,
                             exp.test.labels, probe_cfg).top1
    space = exp.spaces["C"]
    h = teacher_entropy(state.teacher, exp.train, space, train_cfg.objective.lambda_teacher)
    return RunResult(baseline["zero_shot"], zs, baseline.get("probe"), probe, state.step,
                     h / math.log(space.n))


# ---------------------------------------------------------------- ablations

ABLATIONS = {
    "full": {},
    "no_udp": {"use_udp": False},
    "no_significance_weight": {"use_significance_weight": False},
    "no_alignment": {"use_alignment": False},
    "category_only": {"use_description_space": False, "use_alignment": False},
}


def run_ablations(exp: Experiment, enc_cfg: EncoderConfig, train_cfg: TrainConfig,
                  init: EncoderParams, probe_cfg: ProbeConfig | None = None,
                  variants=tuple(ABLATIONS), progress=None) -> list[dict]:
    rows, baseline = [], {}
    for name in variants:
        obj = dataclasses.replace(train_cfg.objective, **ABLATIONS[name])
        res = train_and_evaluate(exp, enc_cfg, dataclasses.replace(train_cfg, objective=obj),
                                 init, probe_cfg, baseline=baseline)
        row = {"variant": name, "zero_shot": res.zero_shot, "init_zero_shot": res.init_zero_shot,
               "linear_probe": res.probe, "init_linear_probe": res.init_probe,
               "teacher_entropy_ratio": res.entropy_ratio}
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


# ---------------------------------------------------------------- gradient check suite

def random_gradcheck_case(rng: np.random.Generator):
    """A small random encoder, concept spaces, batch and moving-average state."""
    heads = int(rng.integers(1, 3))
    cfg = EncoderConfig(T=int(rng.integers(2, 4)), S=int(rng.integers(1, 4)),
                        d_in=int(rng.integers(2, 6)), d_e=heads * int(rng.integers(2, 5)),
                        d_out=int(rng.integers(3, 7)), L=int(rng.integers(1, 3)), H_att=heads,
                        mlp_ratio=int(rng.integers(1, 3)))
    n = int(rng.integers(2, 17))

    def randomized(p: EncoderParams) -> EncoderParams:
        # zero-init parameters would make the temporal path's gradients trivially zero
        return EncoderParams(cfg, {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in p.arrays.items()})

    student = randomized(init_encoder(cfg, rng))
    teacher = randomized(init_encoder(cfg, rng))
    spaces = {}
    for key, kind in (("C", "category"), ("D", "description")):
        basis = rng.standard_normal((n, cfg.d_out))
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
        spaces[key] = ConceptSpace([f"c{j}" for j in range(n)], basis, kind)
    clips_t = rng.standard_normal((3, cfg.T, cfg.S, cfg.d_in))
    clips_s = rng.standard_normal((3, cfg.T, cfg.S, cfg.d_in))
    ma = MovingAverageState({k: rng.dirichlet(np.ones(n)) for k in spaces})
    return cfg, student, teacher, spaces, clips_t, clips_s, ma


def full_loss_fn(teacher, spaces, clips_t, clips_s, ma, obj: ObjectiveConfig):
    t_feat = encode_clips(teacher, clips_t).data
    t_scores = {k: project_to_space(s, t_feat).raw.data for k, s in spaces.items()}

    def f(tensors):
        s_feat = encode_clips((teacher.cfg, tensors), clips_s, tensors)
        s_scores = {k: project_to_space(s, s_feat).raw for k, s in spaces.items()}
        loss, _ = total_loss(t_scores, s_scores, ma.copy(), obj, update_state=False)
        return loss

    return f


def gradcheck_suite(num_configs: int = 20, seed: int = 0, max_coords: int | None = 12,
                    obj: ObjectiveConfig = ObjectiveConfig(), progress=None) -> list[dict]:
    """Finite-difference check of the full training loss w.r.t. every student parameter."""
    results = []
    for i in range(num_configs):
        rng = nx.make_rng(seed, 11, i)
        cfg, student, teacher, spaces, clips_t, clips_s, ma = random_gradcheck_case(rng)
        f = full_loss_fn(teacher, spaces, clips_t, clips_s, ma, obj)
        err = nx.grad_check(f, student.arrays, eps=1e-6, max_coords=max_coords, rng=rng)
        row = {"case": i, "L": cfg.L, "d_e": cfg.d_e, "H_att": cfg.H_att, "T": cfg.T, "S": cfg.S,
               "n": spaces["C"].n, "max_rel_error": float(err)}
        results.append(row)
        if progress is not None:
            progress(row)
    return results


__all__ = ["ABLATIONS", "Experiment", "PretrainConfig", "RunResult", "build_experiment",
           "gradcheck_suite", "pretrained_encoder", "run_ablations", "teacher_entropy",
           "train_and_evaluate"]
