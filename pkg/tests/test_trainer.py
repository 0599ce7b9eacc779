import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conceptssl import numerics as nx
from conceptssl.concept_space import build_category_space, build_description_space
from conceptssl.encoder import EncoderConfig, EncoderParams, init_encoder
from conceptssl.errors import FormatError, InvalidArgumentError, ParseError
from conceptssl.objectives import ObjectiveConfig
from conceptssl.pipeline import build_experiment
from conceptssl.pretrain import pretrained_encoder
from conceptssl.synth_world import (WorldConfig, export_label_embeddings, generate_dataset,
                                    generate_world)
from conceptssl.trainer import (TrainConfig, TrainerState, cosine_lr, ema_update, load_checkpoint,
                                run_training, sample_views, save_checkpoint, step_loss, train_step,
                                view_indices)

TINY_ENC = EncoderConfig(T=4, d_e=8, L=1, H_att=2)
TINY_TRAIN = TrainConfig(epochs=2, batch_size=8, lr_init=1e-3)


@pytest.fixture(scope="module")
def tiny():
    world = generate_world(WorldConfig(num_classes=4, train_per_class=6, test_per_class=2,
                                       video_length=12))
    cat, groups = export_label_embeddings(world)
    spaces = {"C": build_category_space(cat), "D": build_description_space(groups)}
    init = pretrained_encoder(world, TINY_ENC, 0)
    return generate_dataset(world, "train"), spaces, init


# ---------------------------------------------------------------- views

def test_view_indices_are_arithmetic_progressions():
    rng = nx.make_rng(0)
    for _ in range(200):
        idx = view_indices(80, 8, rng)
        gaps = np.diff(idx)
        assert np.all(gaps == gaps[0]) and gaps[0] >= 1
        assert idx[0] >= 0 and idx[-1] < 80


@given(st.integers(1, 40), st.integers(1, 10), st.integers(0, 1000))
def test_view_indices_in_bounds(length, T, seed):
    if length < T:
        with pytest.raises(InvalidArgumentError):
            view_indices(length, T, nx.make_rng(seed))
        return
    idx = view_indices(length, T, nx.make_rng(seed))
    assert len(idx) == T and idx.min() >= 0 and idx.max() < length


def test_degenerate_views_identical():
    video = nx.make_rng(1).standard_normal((20, 4, 24))
    a, b = sample_views(video, 8, nx.make_rng(2), sigma_aug=0, scale_aug=False, same_interval=True)
    np.testing.assert_array_equal(a, b)


def test_views_deterministic():
    video = nx.make_rng(1).standard_normal((20, 4, 24))
    a = sample_views(video, 8, nx.make_rng(3))
    b = sample_views(video, 8, nx.make_rng(3))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    with pytest.raises(InvalidArgumentError):
        sample_views(video[:5], 8, nx.make_rng(0))


# ---------------------------------------------------------------- EMA and schedule

def _params(**arrays):
    return EncoderParams(TINY_ENC, {k: np.asarray(v, float) for k, v in arrays.items()})


def test_ema_examples():
    t = ema_update(_params(w=[0, 0]), _params(w=[2, 4]), 0.5)
    np.testing.assert_array_equal(t.arrays["w"], [1, 2])
    t = ema_update(_params(w=[0.3, -1.0]), _params(w=[2, 4]), 1.0)
    np.testing.assert_array_equal(t.arrays["w"], [2, 4])
    with pytest.raises(InvalidArgumentError):
        ema_update(_params(w=[0, 0]), _params(w=[0, 0, 0]), 0.5)
    with pytest.raises(InvalidArgumentError):
        ema_update(_params(w=[0]), _params(v=[0]), 0.5)


def test_ema_geometric_contraction():
    rho = 2e-4
    student = _params(w=nx.make_rng(0).standard_normal(5))
    teacher = _params(w=np.zeros(5))
    prev = np.linalg.norm(student.arrays["w"])
    for _ in range(100):
        ema_update(teacher, student, rho)
        cur = np.linalg.norm(teacher.arrays["w"] - student.arrays["w"])
        assert abs(cur / prev - (1 - rho)) < 1e-12
        prev = cur


def test_cosine_endpoints():
    assert cosine_lr(0, 100, 3e-4) == 3e-4
    assert abs(cosine_lr(100, 100, 3e-4)) < 1e-15
    assert abs(cosine_lr(50, 100, 1.0) - 0.5) < 1e-15


@pytest.mark.parametrize("kwargs", [{"epochs": -1}, {"lr_init": -1}, {"ema_rho": 0},
                                    {"ema_rho": 1}, {"ema_mode": "x"}])
def test_train_config_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        TrainConfig(**kwargs)


def test_momentum_reading_of_ema():
    assert TrainConfig(ema_rho=2e-4, ema_mode="momentum").pull == 1 - 2e-4


# ---------------------------------------------------------------- steps

def test_zero_lr_freezes_everything(tiny):
    data, spaces, init = tiny
    state = TrainerState.fresh(init, {"C": 4, "D": 4}, 0)
    train_step(state, data.tokens[:8], spaces, dataclasses.replace(TINY_TRAIN, lr_init=0), 10)
    for k, v in init.arrays.items():
        np.testing.assert_array_equal(state.student.arrays[k], v)
        np.testing.assert_array_equal(state.teacher.arrays[k], v)


def test_step_respects_analytic_bounds(tiny):
    data, spaces, init = tiny
    state = TrainerState.fresh(init, {"C": 4, "D": 4}, 0)
    row = train_step(state, data.tokens[:8], spaces, TINY_TRAIN, 10)
    assert math.isfinite(row["L_total"])
    assert row["L_CD_C"] >= 0 and row["L_CD_D"] >= 0 and row["L_CA"] >= 0
    assert row["L_UP_C"] >= math.log(4) - 1e-12 and row["L_UP_D"] >= math.log(4) - 1e-12
    assert state.step == 1 and len(state.metrics) == 1


def test_step_loss_gradient(tiny):
    data, spaces, init = tiny
    rng = nx.make_rng(9)
    student = EncoderParams(init.cfg, {k: v + 0.2 * rng.standard_normal(v.shape)
                                       for k, v in init.arrays.items()})
    state = TrainerState.fresh(init, {"C": 4, "D": 4}, 0)
    clips = data.tokens[:3, :4]
    clips_s = data.tokens[:3, 4:8]

    def f(tensors):
        return step_loss(tensors, state.teacher, clips, clips_s, spaces, state.ma.copy(), TINY_TRAIN)[0]
    assert nx.grad_check(f, student.arrays, max_coords=10, rng=rng) < 1e-5


def test_empty_batch(tiny):
    data, spaces, init = tiny
    with pytest.raises(InvalidArgumentError):
        train_step(TrainerState.fresh(init, {"C": 4, "D": 4}, 0), data.tokens[:0], spaces, TINY_TRAIN, 1)


# ---------------------------------------------------------------- runs

def test_zero_epochs_is_a_no_op(tiny):
    data, spaces, init = tiny
    state = run_training(data, spaces, dataclasses.replace(TINY_TRAIN, epochs=0), init=init)
    assert state.step == 0
    for k, v in init.arrays.items():
        np.testing.assert_array_equal(state.student.arrays[k], v)


def test_labels_are_never_read(tiny):
    data, spaces, init = tiny
    a = run_training(data, spaces, TINY_TRAIN, init=init, stop_after=3)
    b = run_training(data.tokens, spaces, TINY_TRAIN, init=init, stop_after=3)
    for k in a.student.arrays:
        np.testing.assert_array_equal(a.student.arrays[k], b.student.arrays[k])


def test_concept_spaces_frozen(tiny):
    data, spaces, init = tiny
    before = {k: s.digest() for k, s in spaces.items()}
    run_training(data, spaces, TINY_TRAIN, init=init, stop_after=4)
    assert before == {k: s.digest() for k, s in spaces.items()}


def test_determinism_and_resume(tiny, tmp_path):
    data, spaces, init = tiny
    full = run_training(data, spaces, TINY_TRAIN, init=init, metrics_path=tmp_path / "a.csv")
    again = run_training(data, spaces, TINY_TRAIN, init=init, metrics_path=tmp_path / "b.csv")
    save_checkpoint(full, tmp_path / "full.ckpt")
    save_checkpoint(again, tmp_path / "again.ckpt")
    assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    half = run_training(data, spaces, TINY_TRAIN, init=init, stop_after=2, metrics_path=tmp_path / "c.csv")
    save_checkpoint(half, tmp_path / "half.ckpt")
    resumed = run_training(data, spaces, TINY_TRAIN, state=load_checkpoint(tmp_path / "half.ckpt"),
                           metrics_path=tmp_path / "c.csv")
    save_checkpoint(resumed, tmp_path / "resumed.ckpt")
    assert (tmp_path / "resumed.ckpt").read_bytes() == (tmp_path / "full.ckpt").read_bytes()
    assert (tmp_path / "c.csv").read_bytes() == (tmp_path / "a.csv").read_bytes()


def test_checkpoint_round_trip_and_errors(tiny, tmp_path):
    data, spaces, init = tiny
    state = run_training(data, spaces, TINY_TRAIN, init=init, stop_after=2)
    path = tmp_path / "s.ckpt"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    assert back.step == state.step and back.seed == state.seed
    for group in ("adam_m", "adam_v"):
        for k, v in getattr(state, group).items():
            np.testing.assert_array_equal(getattr(back, group)[k], v)
    for k, v in state.ma.dists.items():
        np.testing.assert_array_equal(back.ma.dists[k], v)
    for k, v in state.teacher.arrays.items():
        np.testing.assert_array_equal(back.teacher.arrays[k], v)
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"LSSCKPT2" + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "trunc.ckpt").write_bytes(raw[:len(raw) // 2])
    with pytest.raises((ParseError, FormatError)):
        load_checkpoint(tmp_path / "trunc.ckpt")
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    (tmp_path / "crc.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "crc.ckpt")


@pytest.fixture(scope="module")
def default_run():
    exp = build_experiment()
    init = pretrained_encoder(exp.world, EncoderConfig(), 0)
    return run_training(exp.train, exp.spaces, TrainConfig(), init=init).metrics


def _first_last(values):
    values = np.asarray(values)
    k = len(values) // 10
    return values[:k].mean(), values[-k:].mean()


@pytest.mark.xfail(strict=True, reason="w_s grows as the teacher sharpens (about 0.65 -> 0.89) and "
                   "multiplies a cross-entropy that cannot drop below about 1.27 nats at "
                   "lambda_student=1, so the weighted loss rises while accuracy improves")
def test_default_run_reduces_distillation_loss(default_run):
    first, last = _first_last([r["L_CD_C"] for r in default_run])
    assert last < first


def test_default_run_reduces_unweighted_distillation_loss(default_run):
    first, last = _first_last([r["L_CD_C"] / r["w_s_mean"] for r in default_run])
    assert last < first
    w_first, w_last = _first_last([r["w_s_mean"] for r in default_run])
    assert w_last > w_first


def test_udp_off_still_trains(tiny):
    data, spaces, init = tiny
    cfg = dataclasses.replace(TINY_TRAIN, objective=ObjectiveConfig(use_udp=False))
    state = run_training(data, spaces, cfg, init=init, stop_after=2)
    assert all(r["L_UP_C"] == 0.0 for r in state.metrics)


def test_encoder_init_matches_teacher():
    init = init_encoder(TINY_ENC, nx.make_rng(0))
    state = TrainerState.fresh(init, {"C": 3}, 0)
    for k in init.arrays:
        np.testing.assert_array_equal(state.student.arrays[k], state.teacher.arrays[k])
