import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conceptssl.concept_space import ConceptSpace, build_category_space
from conceptssl.encoder import EncoderConfig, init_encoder
from conceptssl.errors import InvalidArgumentError
from conceptssl.evaluation import (ProbeConfig, eval_crops, extract_features, linear_probe,
                                   predict_from_features, top1_accuracy, zero_shot_classify)
from conceptssl.numerics import make_rng
from conceptssl.pretrain import pretrained_encoder
from conceptssl.synth_world import (WorldConfig, export_label_embeddings, generate_dataset,
                                    generate_world)


def test_top1_examples():
    assert top1_accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert top1_accuracy([1, 1], [2, 2]) == 0.0
    assert top1_accuracy([1, 2, 2, 0], [1, 2, 0, 0]) == 0.75
    with pytest.raises(InvalidArgumentError):
        top1_accuracy([1], [1, 2])
    with pytest.raises(InvalidArgumentError):
        top1_accuracy([], [])


def test_argmax_readout():
    space = ConceptSpace(["a", "b", "c"], np.eye(3), "category")
    assert predict_from_features(np.array([0.2, 0.7, 0.1]), space) == 1


score_space = ConceptSpace([f"c{k}" for k in range(4)],
                           np.linalg.qr(make_rng(0).standard_normal((5, 5)))[0][:4], "category")


@given(hnp.arrays(np.float64, (6, 5), elements=st.floats(-3, 3)).filter(
    lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)), st.floats(0.01, 100),
    st.permutations(range(6)))
def test_zero_shot_invariances(feats, scale, perm):
    base = predict_from_features(feats, score_space)
    np.testing.assert_array_equal(predict_from_features(scale * feats, score_space), base)
    np.testing.assert_array_equal(predict_from_features(feats[list(perm)], score_space), base[list(perm)])


def test_eval_crops_shape_and_errors():
    video = np.arange(32)[:, None, None] * np.ones((1, 2, 3))
    crops = eval_crops(video, 8, 3)
    assert crops.shape == (3, 8, 2, 3)
    assert crops[0, 0, 0, 0] == 0 and crops[-1, -1, 0, 0] == 31
    with pytest.raises(InvalidArgumentError):
        eval_crops(video[:4], 8)


@pytest.fixture(scope="module")
def clean():
    world = generate_world(WorldConfig(intra_class_noise=0, temporal_drift=0, train_per_class=3,
                                       test_per_class=2))
    return world, generate_dataset(world, "train"), generate_dataset(world, "test")


def test_zero_shot_noiseless_is_perfect(clean):
    world, _, test = clean
    space = build_category_space(export_label_embeddings(world)[0])
    enc = pretrained_encoder(world, EncoderConfig(), 0)
    preds, report = zero_shot_classify(enc, test, space)
    assert report.top1 == 1.0 and len(preds) == len(test)
    # clip order does not matter
    perm = make_rng(1).permutation(len(test))
    preds2, _ = zero_shot_classify(enc, test.tokens[perm], space)
    np.testing.assert_array_equal(preds2, preds[perm])


def test_probe_separable_features(clean):
    world, train, test = clean
    enc = pretrained_encoder(world, EncoderConfig(), 0)
    before = enc.digest()
    report = linear_probe(enc, train, train.labels, test, test.labels, ProbeConfig(epochs=30, lr=1e-2))
    assert report.top1 == 1.0
    assert enc.digest() == before


def test_zero_epoch_probe_is_chance():
    world = generate_world(WorldConfig(train_per_class=5, test_per_class=40))
    train, test = generate_dataset(world, "train"), generate_dataset(world, "test")
    enc = init_encoder(EncoderConfig(), make_rng(0))
    accs = []
    for seed in range(3):
        report = linear_probe(enc, train, train.labels, test, test.labels,
                              ProbeConfig(epochs=0, seed=seed, num_crops=1))
        accs.append(report.top1)
    k, n = 20, len(test) * 3
    assert abs(np.mean(accs) - 1 / k) <= 3 * math.sqrt((1 / k) * (1 - 1 / k) / n)


def test_per_class_average_matches_top1():
    world = generate_world(WorldConfig(num_classes=6, train_per_class=4, test_per_class=3))
    test = generate_dataset(world, "test")
    space = build_category_space(export_label_embeddings(world)[0])
    enc = init_encoder(EncoderConfig(), make_rng(2))
    _, report = zero_shot_classify(enc, test, space)
    assert abs(np.sum(report.per_class * report.class_counts) / report.class_counts.sum()
               - report.top1) < 1e-15


def test_probe_reports_missing_classes(clean):
    world, train, test = clean
    enc = pretrained_encoder(world, EncoderConfig(), 0)
    keep = train.labels != 3
    report = linear_probe(enc, train.tokens[keep], train.labels[keep], test, test.labels,
                          dataclasses.replace(ProbeConfig(), epochs=5), num_classes=20)
    assert report.missing_classes == [3]
    assert report.per_class[3] == 0.0


def test_report_files(clean, tmp_path):
    world, _, test = clean
    space = build_category_space(export_label_embeddings(world)[0])
    _, report = zero_shot_classify(pretrained_encoder(world, EncoderConfig(), 0), test, space)
    report.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "class,count,accuracy" and lines[-1].startswith("all,40,")
    assert "top1" in report.summary()


def test_extract_features_rejects_empty():
    with pytest.raises(InvalidArgumentError):
        extract_features(init_encoder(EncoderConfig(), make_rng(0)), np.zeros((0, 8, 4, 24)))
