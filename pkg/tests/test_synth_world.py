import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conceptssl.concept_space import build_category_space, build_description_space
from conceptssl.encoder import EncoderConfig, encode_clips, init_encoder
from conceptssl.errors import FormatError, GenerationError, InvalidArgumentError, ParseError
from conceptssl.numerics import make_rng
from conceptssl.synth_world import (SynthDataset, WorldConfig, export_label_embeddings,
                                    generate_dataset, generate_video, generate_world, load_dataset,
                                    save_dataset, video_latents)

SMALL = WorldConfig(num_classes=5, train_per_class=3, test_per_class=2, video_length=10)


def test_world_determinism():
    a = generate_world(WorldConfig(num_classes=10, d=16, seed=3))
    b = generate_world(WorldConfig(num_classes=10, d=16, seed=3))
    for f in ("prototypes", "descriptions", "mixing", "nuisance"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    c = generate_world(WorldConfig(num_classes=10, d=16, seed=4))
    assert not np.array_equal(a.prototypes, c.prototypes)


def test_two_classes_are_separated():
    w = generate_world(WorldConfig(num_classes=2, d=16))
    assert float(w.prototypes[0] @ w.prototypes[1]) < 0.5


def test_infeasible_packing_names_the_constraint():
    # on the circle at most 5 unit vectors can have pairwise cosine < 0.5
    with pytest.raises(GenerationError, match="cosine < 0.5"):
        generate_world(WorldConfig(num_classes=100, d=2))


@given(st.integers(0, 50), st.integers(2, 25))
def test_prototype_invariants(seed, k):
    w = generate_world(WorldConfig(num_classes=k, seed=seed))
    np.testing.assert_allclose(np.linalg.norm(w.prototypes, axis=1), 1, atol=1e-12)
    g = w.prototypes @ w.prototypes.T
    assert np.max(g[~np.eye(k, dtype=bool)]) < 0.5
    np.testing.assert_allclose(np.linalg.norm(w.descriptions, axis=2), 1, atol=1e-12)
    assert np.linalg.matrix_rank(w.mixing) == w.cfg.d
    np.testing.assert_allclose(w.nuisance @ w.nuisance.T, np.eye(len(w.nuisance)), atol=1e-12)


@pytest.mark.parametrize("kwargs", [{"num_classes": 0}, {"S": 0}, {"intra_class_noise": -0.1},
                                    {"video_length": 4}, {"mixed_fraction": 2},
                                    {"nuisance_dims": -1}])
def test_world_config_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        WorldConfig(**kwargs)


def test_noiseless_video_is_the_prototype():
    cfg = WorldConfig(intra_class_noise=0, temporal_drift=0)
    w = generate_world(cfg)
    lat = video_latents(w, w.prototypes[3], 12, make_rng(0))
    np.testing.assert_array_equal(lat, np.broadcast_to(w.prototypes[3], lat.shape))
    video = generate_video(w, 3, 12, make_rng(0))
    np.testing.assert_allclose(video.tokens, np.broadcast_to(w.tokens(w.prototypes[3]), video.tokens.shape))
    enc = init_encoder(EncoderConfig(), make_rng(0, 3))
    clips = np.stack([video.tokens[s:s + 8] for s in (0, 2, 4)])
    feats = encode_clips(enc, clips).data
    np.testing.assert_allclose(feats, np.broadcast_to(feats[0], feats.shape), atol=1e-12)


def test_video_determinism_and_errors():
    w = generate_world(WorldConfig())
    a, b = generate_video(w, 1, 16, make_rng(5)), generate_video(w, 1, 16, make_rng(5))
    np.testing.assert_array_equal(a.tokens, b.tokens)
    assert a.label == 1 and a.tokens.shape == (16, 4, 24)
    with pytest.raises(InvalidArgumentError):
        generate_video(w, 20, 16, make_rng(0))
    with pytest.raises(InvalidArgumentError):
        generate_video(w, 0, 7, make_rng(0))


def test_frame_mean_converges_to_prototype():
    cfg = WorldConfig(temporal_drift=0)
    w = generate_world(cfg)
    N = 4000
    lat = video_latents(w, w.prototypes[0], N, make_rng(7))
    # per-coordinate std includes the nuisance directions
    sigma = cfg.intra_class_noise * np.sqrt(1 + cfg.nuisance_gain ** 2 * np.sum(w.nuisance ** 2, axis=0))
    assert np.all(np.abs(lat.mean(axis=0) - w.prototypes[0]) < 3 * sigma / np.sqrt(N) * 1.5)


def test_noiseless_zero_shot_by_construction():
    w = generate_world(WorldConfig(intra_class_noise=0, temporal_drift=0))
    space = build_category_space(export_label_embeddings(w)[0])
    for k in range(w.cfg.num_classes):
        lat = video_latents(w, w.prototypes[k], 8, make_rng(k)).mean(axis=0)
        assert int(np.argmax(space.basis @ lat)) == k


def test_export_label_embeddings():
    w = generate_world(WorldConfig(num_classes=10))
    cat, groups = export_label_embeddings(w)
    assert len(cat) == 10 and cat.vectors.shape == (10, 16)
    assert cat.labels[0] == "class_0"
    assert all(len(vecs) == 4 for _, vecs in groups)
    C, D = build_category_space(cat), build_description_space(groups)
    sim = C.basis @ D.basis.T
    for k in range(10):
        assert all(sim[k, k] > sim[k, j] for j in range(10) if j != k)


def test_splits_balanced_disjoint_deterministic():
    w = generate_world(SMALL)
    tr, te = generate_dataset(w, "train"), generate_dataset(w, "test")
    assert len(tr) == 15 and len(te) == 10
    assert np.all(np.bincount(tr.labels) == 3) and np.all(np.bincount(te.labels) == 2)
    for a, b in itertools.product(tr.tokens, te.tokens):
        assert not np.array_equal(a, b)
    np.testing.assert_array_equal(tr.tokens, generate_dataset(w, "train").tokens)
    with pytest.raises(InvalidArgumentError):
        generate_dataset(w, "val")


def test_mixed_fraction_plants_blended_videos():
    w = generate_world(dataclasses.replace(SMALL, mixed_fraction=0.2, train_per_class=10))
    tr, te = generate_dataset(w, "train"), generate_dataset(w, "test")
    assert tr.mixed.sum() == 10 and not te.mixed.any()


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(generate_world(SMALL), "test")
    path = tmp_path / "t.lssdata"
    save_dataset(ds, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.tokens, ds.tokens)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.split == "test"
    raw = path.read_bytes()
    assert raw[:8] == b"LSSDATA1"
    assert len(raw) == 24 + len(ds) * (8 + 10 * 4 * 24 * 8)


def test_dataset_file_errors(tmp_path):
    ds = generate_dataset(generate_world(SMALL), "train")
    path = tmp_path / "d.lssdata"
    save_dataset(ds, path)
    raw = path.read_bytes()
    cases = {"magic": (b"LSSDATA2" + raw[8:], FormatError),
             "truncated": (raw[:-5], ParseError),
             "trailing": (raw + b"\0", FormatError),
             "header": (raw[:12], ParseError)}
    for name, (blob, err) in cases.items():
        p = tmp_path / f"{name}.lssdata"
        p.write_bytes(blob)
        with pytest.raises(err):
            load_dataset(p)


def test_dataset_rejects_unknown_split():
    with pytest.raises(InvalidArgumentError):
        SynthDataset(np.zeros((1, 8, 4, 24)), [0], "val")
