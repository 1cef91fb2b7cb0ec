import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointdistill.errors import IncompatibleError, PairingError, TrainingAborted
from pointdistill.geometry import chamfer_l2
from pointdistill.model import Classifier, ModelConfig
from pointdistill.numerics import Tensor
from pointdistill.persistence import load_checkpoint, state_dict
from pointdistill.training import (AdamWState, AugmentConfig, FinetuneConfig, NonFiniteGradientError,
                                   ScheduleConfig, TrainConfig, adamw_step, augment, build_pretrain_model,
                                   counter_rng, decays, evaluate, finetune_classify, format_record,
                                   generate_dataset, lr_at, make_shape, mean_iou, predict_logits,
                                   pretrain, recon_probe, sample_augment, teacher_for)

CFG = ModelConfig.tiny()


@pytest.fixture(scope="module")
def data():
    ds = generate_dataset(4, 3, CFG.num_points, seed=5)
    return ds, teacher_for(ds, CFG.prefix_len, CFG.teacher_dim, 0.1, seed=5)


def small(**kw):
    base = dict(batch_size=4, epochs=20, warmup_epochs=2, seed=1, augment=AugmentConfig())
    base.update(kw)
    return TrainConfig(**base)


# --- schedule -----------------------------------------------------------------

def test_lr_schedule_reference_points():
    cfg = ScheduleConfig()
    spe = 7
    assert lr_at(0, spe, cfg) == 0.0
    assert lr_at(10 * spe, spe, cfg) == pytest.approx(1e-3, abs=1e-15)
    assert abs(lr_at(250 * spe - 1, spe, cfg) - 1e-6) < 1e-9
    assert abs(lr_at(10 * spe - 1, spe, cfg) - 1e-3 * (10 * spe - 1) / (10 * spe)) < 1e-15


def test_lr_continuous_at_junction():
    cfg = ScheduleConfig()
    spe = 100
    warm = cfg.warmup_epochs * spe
    # the warmup line and the cosine arc both reach base_lr at the junction
    assert abs(cfg.base_lr * warm / warm - cfg.base_lr) < 1e-12
    assert abs(lr_at(warm, spe, cfg) - cfg.base_lr) < 1e-12


def test_lr_closed_form_midpoint():
    cfg = ScheduleConfig(base_lr=1.0, warmup_epochs=0, total_epochs=3, min_lr=0.0)
    # steps 0..2 with one step per epoch: cosine from 1 to 0 over two intervals
    assert lr_at(1, 1, cfg) == pytest.approx(0.5 * (1 + math.cos(math.pi / 2)), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 50))
def test_lr_nonnegative_and_bounded(step, spe):
    cfg = ScheduleConfig()
    lr = lr_at(step, spe, cfg)
    assert 0.0 <= lr <= cfg.base_lr + 1e-18


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_epochs=10, total_epochs=10)
    with pytest.raises(ValueError):
        lr_at(-1, 1, ScheduleConfig())


# --- AdamW --------------------------------------------------------------------

def test_zero_gradient_no_decay_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st_ = AdamWState(weight_decay=0.0)
    for _ in range(5):
        adamw_step({"w": p}, {"w": np.zeros(2)}, st_, 0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def _adam_oracle(x, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_on_square_matches_scalar_recurrence():
    p = Tensor(np.array([1.0]), requires_grad=True)
    st_ = AdamWState(weight_decay=0.0)
    for _ in range(500):
        adamw_step({"x": p}, {"x": 2 * p.data}, st_, 0.05)
    assert abs(p.data[0]) < 1e-3
    assert p.data[0] == pytest.approx(_adam_oracle(1.0, 0.05, 500), abs=1e-12)


def test_decoupled_decay_closed_form():
    p = Tensor(np.array([3.0]), requires_grad=True)
    st_ = AdamWState(weight_decay=0.05)
    for _ in range(10):
        adamw_step({"blocks.0.w": p}, {"blocks.0.w": np.zeros(1)}, st_, 0.1)
    assert p.data[0] == pytest.approx(3.0 * (1 - 0.1 * 0.05) ** 10, rel=1e-14)


def test_no_decay_roles():
    assert decays("encoder.blocks.0.attn.q.weight")
    for name in ("encoder.blocks.0.attn.q.bias", "encoder.norm.gain", "concept.queries", "recon.mask_token"):
        assert not decays(name)
    p = Tensor(np.array([3.0]), requires_grad=True)
    adamw_step({"x.bias": p}, {"x.bias": np.zeros(1)}, AdamWState(weight_decay=0.5), 0.1)
    assert p.data[0] == 3.0


def test_nonfinite_gradient_aborts_before_update():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    st_ = AdamWState()
    with pytest.raises(NonFiniteGradientError):
        adamw_step({"a": a, "b": b}, {"a": np.ones(1), "b": np.array([np.nan])}, st_, 0.1)
    assert st_.step == 0 and not st_.m and a.data[0] == 1.0


# --- augmentation and data ----------------------------------------------------

def test_augment_identity_and_determinism():
    x = np.random.default_rng(0).standard_normal((32, 3)).astype(np.float32)
    ident = AugmentConfig(scale=(1.0, 1.0), translate=(0.0, 0.0))
    np.testing.assert_array_equal(augment(x, ident, np.random.default_rng(1)), x)
    cfg = AugmentConfig()
    np.testing.assert_array_equal(sample_augment(x, cfg, 3, 7, 2), sample_augment(x, cfg, 3, 7, 2))
    assert not np.array_equal(sample_augment(x, cfg, 3, 7, 2), sample_augment(x, cfg, 3, 7, 3))
    np.testing.assert_array_equal(augment(x, AugmentConfig(enabled=False), np.random.default_rng(1)), x)


def test_augment_is_scale_and_translate():
    x = np.random.default_rng(0).standard_normal((32, 3))
    y = augment(x, AugmentConfig(), np.random.default_rng(4))
    # fit y = s x + t by least squares; residual is exactly zero up to round-off
    a = np.concatenate([x.reshape(-1, 1), np.tile(np.eye(3), (32, 1))], axis=1)
    coef, res, *_ = np.linalg.lstsq(a, y.reshape(-1), rcond=None)
    assert 0.9 <= coef[0] <= 1.1 and np.all(np.abs(coef[1:]) <= 0.1)
    assert np.allclose(a @ coef, y.reshape(-1), atol=1e-12)
    sx = x * coef[0]
    assert chamfer_l2(Tensor(sx), Tensor(sx)).item() == 0.0


def test_augment_rejects_disordered_ranges():
    with pytest.raises(ValueError):
        AugmentConfig(scale=(1.1, 0.9))


def test_counter_rng_streams_are_independent_of_draw_history():
    a = counter_rng(1, "x", 3)
    a.standard_normal(100)
    assert counter_rng(1, "x", 3).random() != counter_rng(1, "x", 4).random()
    assert counter_rng(2, "y").random() == counter_rng(2, "y").random()


def test_sphere_samples_sit_on_their_radius():
    for i in range(10):
        pts = make_shape(0, 2000, counter_rng(0, "sphere", i), noise=0.01).astype(np.float64)
        r = np.linalg.norm(pts - pts.mean(0), axis=1)
        assert 0.6 - 0.02 < r.mean() < 1.0 + 0.02
        assert r.std() < 0.03


def test_generated_dataset_is_deterministic_and_class_major():
    a = generate_dataset(3, 2, 64, seed=9)
    b = generate_dataset(3, 2, 64, seed=9)
    np.testing.assert_array_equal(a.clouds, b.clouds)
    assert a.labels.tolist() == [0, 0, 1, 1, 2, 2]
    assert a.class_names == ["sphere", "box", "cylinder"]
    assert len(set(a.ids)) == 6


# --- pretraining --------------------------------------------------------------

def test_mode_none_leaves_parameters_unchanged(data):
    ds, _ = data
    tc = small(loss="none", max_steps=6)
    before = state_dict(build_pretrain_model(CFG, tc))
    res = pretrain(ds, CFG, tc)
    after = state_dict(res.model)
    assert res.step == 2 * 3
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_mode_both_total_is_sum_of_components(data):
    ds, fx = data
    res = pretrain(ds, CFG, small(loss="both", max_steps=3), teacher=fx)
    for values in res.step_losses:
        assert set(values) == {"distill", "recon", "total"}
        assert abs(values["total"] - (values["distill"] + values["recon"])) < 1e-6
    assert len(res.records) == 1
    rec = res.records[0]["loss"]
    assert abs(rec["total"] - (rec["distill"] + rec["recon"])) < 1e-6


def _strip(records):
    return [format_record(r) for r in records]


@pytest.mark.parametrize("loss", ["distill", "both"])
def test_resume_is_bit_exact(data, tmp_path, loss):
    ds, fx = data
    tc = small(loss=loss)
    straight = pretrain(ds, CFG, small(loss=loss, max_steps=20), teacher=fx)
    first = pretrain(ds, CFG, small(loss=loss, max_steps=10), teacher=fx)
    from pointdistill.persistence import save_checkpoint
    save_checkpoint(tmp_path / "mid.ckpt", first.checkpoint)
    resumed = pretrain(ds, CFG, small(loss=loss, max_steps=20), teacher=fx,
                       resume=load_checkpoint(tmp_path / "mid.ckpt", expected=CFG))
    assert resumed.step == straight.step == 20
    a, b = state_dict(straight.model), state_dict(resumed.model)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    for k in straight.optimizer.m:
        np.testing.assert_array_equal(straight.optimizer.m[k], resumed.optimizer.m[k])
        np.testing.assert_array_equal(straight.optimizer.v[k], resumed.optimizer.v[k])
    assert straight.step_losses == first.step_losses + resumed.step_losses
    assert _strip(straight.records) == _strip(first.records) + _strip(resumed.records)
    assert tc.to_dict()["loss"] == loss


def test_two_runs_are_identical(data):
    ds, fx = data
    a = pretrain(ds, CFG, small(max_steps=6), teacher=fx)
    b = pretrain(ds, CFG, small(max_steps=6), teacher=fx)
    assert _strip(a.records) == _strip(b.records)
    assert a.step_losses == b.step_losses


def test_teacher_receives_no_gradient(data):
    ds, fx = data
    before = {sid: fx[sid].copy() for sid in fx.ids}
    res = pretrain(ds, CFG, small(max_steps=50), teacher=fx)
    assert len(res.teacher_grad_norms) == 50
    assert all(n == 0.0 for n in res.teacher_grad_norms)
    for sid in fx.ids:
        np.testing.assert_array_equal(fx[sid], before[sid])


def test_pairing_errors(data):
    ds, fx = data
    with pytest.raises(PairingError):
        pretrain(ds, CFG, small(max_steps=1))
    partial = teacher_for(ds.subset(np.arange(5)), CFG.prefix_len, CFG.teacher_dim)
    with pytest.raises(PairingError):
        pretrain(ds, CFG, small(max_steps=1), teacher=partial)
    wrong = teacher_for(ds, CFG.prefix_len, CFG.teacher_dim + 1)
    with pytest.raises(IncompatibleError):
        pretrain(ds, CFG, small(max_steps=1), teacher=wrong)
    # recon-only needs no teacher
    assert pretrain(ds, CFG, small(loss="recon", max_steps=1)).step == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_last_good_checkpoint(data, tmp_path):
    ds, fx = data
    good = pretrain(ds, CFG, small(max_steps=2), teacher=fx).checkpoint
    poisoned = load_checkpoint_copy(good)
    # finite but huge weights overflow float32 in the forward pass
    poisoned.tensors["projection.mlp.fc1.weight"][...] = 1e30
    with pytest.raises(TrainingAborted) as info:
        pretrain(ds, CFG, small(max_steps=4), teacher=fx, resume=poisoned, abort_path=tmp_path / "abort.ckpt")
    assert info.value.step == 2
    saved = load_checkpoint(tmp_path / "abort.ckpt")
    assert saved.step == 2 and saved.meta["kind"] == "pretrain"
    np.testing.assert_array_equal(saved.tensors["encoder.norm.gain"], poisoned.tensors["encoder.norm.gain"])


def load_checkpoint_copy(ck):
    from dataclasses import replace
    return replace(ck, tensors={k: v.copy() for k, v in ck.tensors.items()})


def test_records_have_fixed_field_order(data):
    ds, fx = data
    res = pretrain(ds, CFG, small(max_steps=3), teacher=fx)
    rec = res.records[0]
    assert list(rec)[:4] == ["epoch", "mode", "loss", "lr"] and "wall" in rec
    line = format_record(rec)
    assert line.startswith('{"epoch": 0, "mode": "distill", "loss": ') and "wall" not in line
    assert '"wall"' in format_record(rec, wall=True)


# --- fine-tuning, evaluation, probe -------------------------------------------

def test_finetune_order_hash_ignores_initialisation(data):
    ds, fx = data
    ck = pretrain(ds, CFG, small(max_steps=2), teacher=fx).checkpoint
    fc = FinetuneConfig(batch_size=4, epochs=2, warmup_epochs=1, seed=3)
    scratch = finetune_classify(ds, CFG, fc)
    distilled = finetune_classify(ds, CFG, fc, init=ck)
    assert scratch.order_hash == distilled.order_hash
    assert scratch.step_losses != distilled.step_losses
    assert {"train_acc", "loss", "lr"} <= set(scratch.records[-1])


def test_finetune_rejects_mismatched_encoder(data):
    ds, fx = data
    other = ModelConfig.tiny(dim=32, heads=4)
    ck = pretrain(ds, other, small(loss="recon", max_steps=1)).checkpoint
    with pytest.raises(IncompatibleError):
        finetune_classify(ds, CFG, FinetuneConfig(batch_size=4, epochs=1, warmup_epochs=0), init=ck)


def test_votes_are_deterministic(data):
    ds, _ = data
    model = Classifier(CFG, 4, seed=2)
    a = evaluate(model, ds, votes=1, seed=4)
    b = evaluate(model, ds, votes=1, seed=4)
    assert a == b
    off = AugmentConfig(enabled=False)
    np.testing.assert_array_equal(predict_logits(model, ds, votes=10, seed=4, aug=off),
                                  predict_logits(model, ds, votes=1, seed=4))
    np.testing.assert_array_equal(predict_logits(model, ds, votes=3, seed=4),
                                  predict_logits(model, ds, votes=3, seed=4))
    with pytest.raises(ValueError):
        predict_logits(model, ds, votes=0)


def test_mean_iou():
    t = np.array([0, 1, 2, 2, 1])
    miou, ious = mean_iou(t, t, 3)
    assert miou == 1.0 and np.all(ious == 1.0)
    miou, ious = mean_iou(np.array([0, 0]), np.array([0, 1]), 2)
    assert ious.tolist() == [0.5, 0.0] and miou == 0.25


def test_untrained_probe_equals_no_training(data):
    ds, _ = data
    none = pretrain(ds, CFG, small(loss="none", max_steps=3))
    fresh = build_pretrain_model(CFG, small(loss="none"))
    a = recon_probe(none.model.encoder, CFG, ds, decoder_seed=11)
    b = recon_probe(fresh.encoder, CFG, ds, decoder_seed=11)
    assert a == b and a > 0
    assert recon_probe(fresh.encoder, CFG, ds, decoder_seed=11) == a
