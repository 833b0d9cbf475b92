import math

import numpy as np
import pytest

from shrinkpipe.autodiff import Tensor, seeded_rng
from shrinkpipe.distillation import (Adam, DistillPlan, MaskedBatch, NumericalError, TrainingTrace,
                                     apply_masking, combined_loss, distill_loss, kl_distill_loss,
                                     masked_positions_logits, mlm_loss,
                                     mlm_finetune_teacher, mse_distill_loss, train_distill)
from shrinkpipe.model import EncoderModel, ModelConfig, init_student
from shrinkpipe.tokenizer import (CLS_ID, MASK_ID, PAD_ID, SyntheticSpec, build_tokenizer,
                                  encode_corpus, generate_synthetic_corpus, train_validation_split)


def batch_with_mask(original, mask):
    original = np.asarray(original)
    return MaskedBatch(original.copy(), original, np.asarray(mask, bool))


# ------------------------------------------------------------------ masking

def test_masking_rate_concentration():
    ids = np.full((1000, 100), 7)
    batch = apply_masking(ids, 0.15, seeded_rng(0), vocab_size=50)
    assert 0.14 <= batch.mask.mean() <= 0.16


def test_masking_split_80_10_10():
    ids = np.full((1000, 100), 7)
    b = apply_masking(ids, 0.15, seeded_rng(1), vocab_size=50)
    sel = b.input_ids[b.mask]
    n = len(sel)
    assert abs((sel == MASK_ID).mean() - 0.8) < 0.02
    unchanged = (sel == 7).sum()
    # random replacements can draw 7 again, so unchanged is ~10% plus a sliver
    assert abs(unchanged / n - 0.1 - 0.1 / 45) < 0.02
    assert (sel[(sel != MASK_ID) & (sel != 7)] >= 5).all()


def test_masking_deterministic_and_dynamic():
    ids = np.arange(5, 45).reshape(4, 10)
    a = apply_masking(ids, 0.3, seeded_rng(3), 50)
    b = apply_masking(ids, 0.3, seeded_rng(3), 50)
    np.testing.assert_array_equal(a.mask, b.mask)
    rng = seeded_rng(3)
    first, second = apply_masking(ids, 0.3, rng, 50), apply_masking(ids, 0.3, rng, 50)
    assert not np.array_equal(first.mask, second.mask)


def test_masking_never_touches_specials():
    ids = np.array([[CLS_ID, 5, 6, PAD_ID, PAD_ID]] * 200)
    b = apply_masking(ids, 0.5, seeded_rng(0), 20)
    assert not b.mask[:, [0, 3, 4]].any()


def test_masking_skips_unmaskable_batch(caplog):
    assert apply_masking(np.array([[CLS_ID, PAD_ID]]), 0.15, seeded_rng(0), 20) is None
    assert "no maskable" in caplog.text


@pytest.mark.parametrize("rate", [0.0, 1.0, -0.1])
def test_masking_rate_bounds(rate):
    with pytest.raises(ValueError):
        apply_masking(np.array([[5, 6]]), rate, seeded_rng(0), 20)


# ------------------------------------------------------------------- losses

def test_mlm_uniform_logits_ln4():
    b = batch_with_mask([[1, 2, 3]], [[1, 1, 0]])
    assert math.isclose(mlm_loss(Tensor(np.zeros((1, 3, 4))), b).item(), math.log(4), rel_tol=1e-6)


def test_mlm_confident_logits_near_zero():
    logits = np.full((1, 2, 4), -50.0)
    logits[0, 0, 1] = logits[0, 1, 3] = 50.0
    b = batch_with_mask([[1, 3]], [[1, 1]])
    assert mlm_loss(Tensor(logits), b).item() < 1e-6


def test_mlm_two_position_hand_example():
    logits = np.array([[[1.0, 2.0, 0.0], [0.0, 0.0, 3.0]]])
    b = batch_with_mask([[1, 0]], [[1, 1]])
    ce0 = -math.log(math.e ** 2 / (math.e + math.e ** 2 + 1))
    ce1 = -math.log(1 / (2 + math.e ** 3))
    assert math.isclose(mlm_loss(Tensor(logits), b).item(), (ce0 + ce1) / 2, rel_tol=1e-6)


def test_mlm_ignores_unmasked_positions():
    b = batch_with_mask([[1, 2]], [[1, 0]])
    a = np.zeros((1, 2, 3))
    c = a.copy()
    c[0, 1] = [9.0, -9.0, 4.0]
    assert mlm_loss(Tensor(a), b).item() == mlm_loss(Tensor(c), b).item()


def test_mlm_no_masked_positions_error():
    with pytest.raises(ValueError):
        mlm_loss(Tensor(np.zeros((1, 2, 3))), batch_with_mask([[1, 2]], [[0, 0]]))


def test_mse_examples():
    assert mse_distill_loss(Tensor(np.ones((2, 3))), np.ones((2, 3))).item() == 0
    assert mse_distill_loss(Tensor(np.zeros((1, 2))), np.ones((1, 2))).item() == 1.0
    s = np.array([[1.0, 2.0], [0.0, -1.0]])
    t = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert math.isclose(mse_distill_loss(Tensor(s), t).item(), (1 + 4 + 1 + 4) / 4)


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        mse_distill_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 4)))


def test_kl_examples():
    z = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
    for temp in (0.5, 1.0, 3.0):
        assert abs(kl_distill_loss(Tensor(z), z, temp).item()) <= 1e-7
    # teacher uniform over 2, student [ln3, 0] -> q = [3/4, 1/4]
    kl = kl_distill_loss(Tensor(np.array([[math.log(3), 0.0]])), np.zeros((1, 2)), 1.0).item()
    assert math.isclose(kl, 0.5 * math.log(4 / 3), rel_tol=1e-6)


def test_kl_temperature_squared_scaling():
    s, t = np.array([[1.0, 0.0, -1.0]]), np.array([[0.0, 2.0, 0.0]])
    p = np.exp(t / 2) / np.exp(t / 2).sum()
    q = np.exp(s / 2) / np.exp(s / 2).sum()
    expected = 4 * float((p * np.log(p / q)).sum())
    assert math.isclose(kl_distill_loss(Tensor(s), t, 2.0).item(), expected, rel_tol=1e-5)


def test_kl_nonnegative_random():
    rng = np.random.default_rng(1)
    for _ in range(20):
        assert kl_distill_loss(Tensor(rng.standard_normal((4, 6))), rng.standard_normal((4, 6)),
                               float(rng.uniform(0.5, 3))).item() >= 0


def test_combined_loss():
    assert combined_loss(2.0, 1.0, 0.5) == 1.5
    m, d = Tensor(np.float32(2.5)), Tensor(np.float32(0.75))
    assert combined_loss(m, d, 1.0).item() == m.item()
    assert combined_loss(m, d, 0.0).item() == d.item()
    with pytest.raises(ValueError):
        combined_loss(1.0, 1.0, 1.5)


# --------------------------------------------------------------------- plan

@pytest.mark.parametrize("kwargs", [dict(alpha=1.1), dict(epochs=0), dict(temperature=0.0),
                                    dict(loss_kind="l1"), dict(init_strategy="middle")])
def test_plan_validation(kwargs):
    with pytest.raises(ValueError):
        DistillPlan(**kwargs)


def test_plan_defaults_and_roundtrip():
    plan = DistillPlan()
    assert (plan.alpha, plan.epochs, plan.temperature, plan.loss_kind) == (0.5, 10, 2.0, "mse")
    assert DistillPlan.from_dict(plan.to_dict()) == plan


def test_trace_csv():
    trace = TrainingTrace([2.0, 1.5], [0.1, 0.25])
    assert trace.to_csv() == "epoch,train_loss,val_masked_acc\n1,2.000000,0.100000\n2,1.500000,0.250000\n"


def test_adam_warmup_and_lr_zero():
    p = {"w": Tensor(np.ones(3, np.float32), requires_grad=True)}
    opt = Adam(p, 0.0, total_steps=10, warmup_fraction=0.2)
    p["w"].grad = np.ones(3, np.float32)
    opt.step()
    np.testing.assert_array_equal(p["w"].data, 1)
    opt2 = Adam(p, 1.0, total_steps=10, warmup_fraction=0.2)
    assert opt2.current_lr() == pytest.approx(0.5)


# ----------------------------------------------------------------- training

@pytest.fixture(scope="module")
def toy():
    data = generate_synthetic_corpus(SyntheticSpec(num_topics=4, vocab_per_topic=40, doc_count=1000,
                                                   doc_length=32, seed=1))
    train, val = train_validation_split(data.texts, 0.05, 0)
    tok = build_tokenizer(train, 1000)
    cfg = ModelConfig(2, 32, 4, 64, tok.vocab_size, 33)
    return cfg, encode_corpus(tok, train), encode_corpus(tok, val, "validation")


def test_teacher_finetune_loss_drops_20pct(toy):
    cfg, train, val = toy
    model = EncoderModel.random(cfg, seeded_rng(0))
    _, trace = mlm_finetune_teacher(model, train, DistillPlan(epochs=10, learning_rate=3e-3), val)
    assert len(trace.train_loss) == 10
    assert trace.train_loss[-1] <= 0.8 * trace.train_loss[0]


def test_training_deterministic_and_pure(toy):
    cfg, train, val = toy
    model = EncoderModel.random(cfg, seeded_rng(0))
    before = {k: v.copy() for k, v in model.params.items()}
    plan = DistillPlan(epochs=1, learning_rate=3e-3)
    a, ta = mlm_finetune_teacher(model, train, plan, val)
    b, tb = mlm_finetune_teacher(model, train, plan, val)
    assert ta.to_csv() == tb.to_csv()
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])
        assert a.params[k].tobytes() == b.params[k].tobytes()


def test_lr_zero_leaves_weights_bit_identical(toy):
    cfg, train, val = toy
    teacher = EncoderModel.random(cfg, seeded_rng(0))
    student = init_student(teacher, "last-k", 1)
    out, trace = train_distill(student, teacher, train, DistillPlan(epochs=1, learning_rate=0.0), val)
    for k in student.params:
        assert out.params[k].tobytes() == student.params[k].tobytes()
    assert len(trace.val_masked_acc) == 1


def test_kl_distillation_runs(toy):
    cfg, train, val = toy
    teacher = EncoderModel.random(cfg, seeded_rng(0))
    _, trace = train_distill(init_student(teacher, "first-k", 1), teacher, train,
                             DistillPlan(epochs=1, loss_kind="kl", learning_rate=1e-3), val)
    assert np.isfinite(trace.train_loss).all()


def test_vocab_mismatch_error(toy):
    cfg, train, val = toy
    teacher = EncoderModel.random(cfg, seeded_rng(0))
    from dataclasses import replace
    student = EncoderModel.random(replace(cfg, vocab_size=cfg.vocab_size + 1), seeded_rng(1))
    with pytest.raises(ValueError, match="vocab"):
        train_distill(student, teacher, train, DistillPlan(epochs=1), val)


def test_nan_loss_aborts(toy):
    cfg, train, val = toy
    model = EncoderModel.random(cfg, seeded_rng(0))
    model.params["tok_emb"][5, 0] = np.nan
    with pytest.raises(NumericalError, match="epoch 1"):
        mlm_finetune_teacher(model, train, DistillPlan(epochs=1), val)


def test_adapted_teacher_beats_unadapted():
    """A teacher adapted to the target distribution distills into a better student."""
    spec = dict(num_topics=3, vocab_per_topic=30, doc_count=600, doc_length=32)
    target = generate_synthetic_corpus(SyntheticSpec(seed=1, **spec))
    other = generate_synthetic_corpus(SyntheticSpec(seed=2, **spec))
    t_train, t_val = train_validation_split(target.texts, 0.1, 0)
    mixture = t_train[:200] + other.texts
    tok = build_tokenizer(mixture + t_train, 2000)
    cfg = ModelConfig(4, 32, 4, 64, tok.vocab_size, 33)
    target_c, val_c = encode_corpus(tok, t_train), encode_corpus(tok, t_val, "validation")
    plan = DistillPlan(epochs=4, learning_rate=3e-3)
    unadapted, _ = mlm_finetune_teacher(EncoderModel.random(cfg, seeded_rng(0)),
                                        encode_corpus(tok, mixture), plan, val_c)
    adapted, _ = mlm_finetune_teacher(unadapted, target_c, plan, val_c)
    student_plan = DistillPlan(epochs=3, learning_rate=3e-3)
    accs = {}
    for name, teacher in (("unadapted", unadapted), ("adapted", adapted)):
        _, trace = train_distill(init_student(teacher, "last-k", 2), teacher, target_c,
                                 student_plan, val_c)
        accs[name] = trace.val_masked_acc[-1]
    assert accs["adapted"] > accs["unadapted"]


@pytest.mark.parametrize("kind", ["mse", "kl"])
def test_combined_loss_gradient_small_step_oracle(kind):
    # float64 central differences with a small step isolate the backward pass from
    # finite-difference truncation error; the f32 analytic gradient must agree everywhere
    cfg = ModelConfig(2, 8, 2, 16, 12, 6)
    model = EncoderModel.random(cfg, seeded_rng(1))
    other = EncoderModel.random(cfg, seeded_rng(101))
    ids = np.random.default_rng(1).integers(5, 12, size=(2, 6))
    batch = apply_masking(ids, 0.5, seeded_rng(1), 12)
    teacher = masked_positions_logits(other, other.tensors(), batch).data
    plan = DistillPlan(loss_kind=kind)

    def objective(t, target):
        logits = masked_positions_logits(model, t, batch)
        return combined_loss(mlm_loss(logits, batch), distill_loss(plan, logits, target), plan.alpha)

    t = model.tensors(requires_grad=True)
    objective(t, teacher).backward()
    t64 = {k: Tensor(v.astype(np.float64)) for k, v in model.params.items()}
    eps, worst = 1e-6, 0.0
    for name, p in t64.items():
        for i in np.ndindex(p.data.shape):
            old = p.data[i]
            p.data[i] = old + eps
            hi = objective(t64, teacher.astype(np.float64)).item()
            p.data[i] = old - eps
            lo = objective(t64, teacher.astype(np.float64)).item()
            p.data[i] = old
            num = (hi - lo) / (2 * eps)
            ana = t[name].grad[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-5))
    assert worst <= 1e-3
