"""Zero-shot classification and linear probing on frozen encoders."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .concept_space import ConceptSpace, project_to_space
from .encoder import EncoderParams, encode_clips
from .errors import InvalidArgumentError


@dataclass
class EvalReport:
    protocol: str
    top1: float
    per_class: np.ndarray
    class_counts: np.ndarray
    num_samples: int
    config_hash: str = ""
    missing_classes: list = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"protocol      {self.protocol}",
                 f"samples       {self.num_samples}",
                 f"top1          {100 * self.top1:.2f}%",
                 f"config hash   {self.config_hash}"]
        if self.missing_classes:
            lines.append(f"absent from probe train split: {self.missing_classes}")
        return "\n".join(lines)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "count", "accuracy"])
            for k, (n, acc) in enumerate(zip(self.class_counts, self.per_class)):
                w.writerow([k, int(n), repr(float(acc))])
            w.writerow(["all", self.num_samples, repr(self.top1)])


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def top1_accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise InvalidArgumentError(f"{predictions.shape} predictions vs {labels.shape} labels")
    if predictions.size == 0:
        raise InvalidArgumentError("no predictions")
    return float(np.mean(predictions == labels))


def _report(protocol, predictions, labels, num_classes, cfg_hash="", missing=()) -> EvalReport:
    correct = (predictions == labels) & ~np.isin(labels, list(missing))
    counts = np.bincount(labels, minlength=num_classes).astype(float)
    hits = np.bincount(labels, weights=correct.astype(float), minlength=num_classes)
    per_class = np.divide(hits, counts, out=np.zeros_like(hits), where=counts > 0)
    return EvalReport(protocol, float(correct.mean()), per_class, counts, len(labels), cfg_hash,
                      sorted(int(m) for m in missing))


def eval_crops(video: np.ndarray, T: int, num_crops: int = 3) -> np.ndarray:
    """``num_crops`` evenly placed windows, each with T frames at one integer gap."""
    length = len(video)
    if length < T:
        raise InvalidArgumentError(f"video of {length} frames is shorter than T={T}")
    window = max(T, length // 2)
    gap = 1 if T == 1 else max(1, (window - 1) // (T - 1))
    span = (T - 1) * gap + 1
    starts = np.linspace(0, length - span, num_crops).round().astype(int)
    idx = starts[:, None] + gap * np.arange(T)[None, :]
    return video[idx]


def extract_features(params: EncoderParams, videos, num_crops: int = 3, chunk: int = 256) -> np.ndarray:
    """Crop-averaged (un-normalized) features, one row per video."""
    videos = np.asarray(getattr(videos, "tokens", videos), dtype=np.float64)
    if len(videos) == 0:
        raise InvalidArgumentError("no clips to encode")
    T = params.cfg.T
    crops = np.stack([eval_crops(v, T, num_crops) for v in videos])      # (N, c, T, S, d_in)
    flat = crops.reshape(-1, *crops.shape[2:])
    feats = np.concatenate([encode_clips(params, flat[i:i + chunk]).data
                            for i in range(0, len(flat), chunk)])
    return feats.reshape(len(videos), num_crops, -1).mean(axis=1)


def predict_from_features(features, space: ConceptSpace) -> np.ndarray:
    scores = project_to_space(space, features).raw.data
    return np.argmax(scores, axis=-1)      # first maximum wins ties


def zero_shot_classify(params: EncoderParams, videos, space: ConceptSpace, labels=None,
                       num_crops: int = 3):
    """Predict with the downstream text classifier; returns (predictions, report or None)."""
    preds = predict_from_features(extract_features(params, videos, num_crops), space)
    if labels is None:
        labels = getattr(videos, "labels", None)
    report = None
    if labels is not None:
        labels = np.asarray(labels)
        report = _report("zero_shot", preds, labels, space.n,
                         config_hash({"space": space.digest(), "encoder": params.digest(),
                                      "crops": num_crops}))
    return preds, report


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    num_crops: int = 3
    standardize: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise InvalidArgumentError("probe epochs/batch_size/lr out of range")


def train_linear_classifier(x: np.ndarray, y: np.ndarray, num_classes: int, cfg: ProbeConfig):
    """Softmax-regression probe fit with AdamW and cosine decay; returns (W, b)."""
    from .trainer import TrainConfig, adamw_update, cosine_lr

    rng = nx.make_rng(cfg.seed, 7)
    d = x.shape[1]
    bound = 1.0 / np.sqrt(d)
    params = {"w": rng.uniform(-bound, bound, (d, num_classes)),
              "b": rng.uniform(-bound, bound, num_classes)}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    opt = TrainConfig(weight_decay=cfg.weight_decay)
    per_epoch = -(-len(x) // cfg.batch_size)
    total = cfg.epochs * per_epoch
    onehot = np.eye(num_classes)[y]
    step = 0
    for epoch in range(cfg.epochs):
        order = nx.make_rng(cfg.seed, 8, epoch).permutation(len(x))
        for s in range(per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            xb = x[idx]
            logits = xb @ params["w"] + params["b"]
            p = np.exp(logits - logits.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[idx]) / len(idx)
            grads = {"w": xb.T @ g, "b": g.sum(axis=0)}
            adamw_update(params, grads, m, v, step + 1, cosine_lr(step, total, cfg.lr), opt,
                         decay_filter=lambda k: k == "w")
            step += 1
    return params["w"], params["b"]


def linear_probe(params: EncoderParams, train_videos, train_labels, test_videos, test_labels,
                 cfg: ProbeConfig = ProbeConfig(), num_classes: int | None = None) -> EvalReport:
    before = params.digest()
    train_labels, test_labels = np.asarray(train_labels), np.asarray(test_labels)
    if num_classes is None:
        num_classes = int(max(train_labels.max(), test_labels.max())) + 1
    x_train = extract_features(params, train_videos, cfg.num_crops)
    x_test = extract_features(params, test_videos, cfg.num_crops)
    if cfg.standardize:
        mu, sd = x_train.mean(axis=0), x_train.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        x_train, x_test = (x_train - mu) / sd, (x_test - mu) / sd
    w, b = train_linear_classifier(x_train, train_labels, num_classes, cfg)
    preds = np.argmax(x_test @ w + b, axis=1)
    missing = set(np.unique(test_labels)) - set(np.unique(train_labels))
    if params.digest() != before:
        raise RuntimeError("encoder parameters changed during linear probing")
    return _report("linear_probe", preds, test_labels, num_classes,
                   config_hash({"encoder": before, "probe": cfg.__dict__}), missing)
