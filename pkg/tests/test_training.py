import numpy as np
import pytest

from dpc import graph as G
from dpc.classifier import PromptClassifier
from dpc.encoders import assert_frozen, snapshot
from dpc.experiment import build_model
from dpc.graph import ContractViolation, NumericError, Parameter, backward
from dpc.prompting import ABLATION_ROWS, AblationFlags, ClassEmbeddings, parse_template
from dpc.training import (
    SGD,
    Checkpoint,
    DigestMismatch,
    Metrics,
    Schedule,
    TrainSettings,
    ablate,
    batch_order,
    confusion_matrix,
    evaluate,
    sample_std,
    sensitivity,
    step_lr,
    train,
)


def test_sgd_first_and_second_step():
    p = Parameter(np.array([0.0]), name="p")
    opt = SGD([p], lr=0.1, momentum=0.9)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(-0.1)
    assert p.grad is None
    p.grad = np.array([1.0])
    opt.step()
    assert opt.velocity[0][0] == pytest.approx(1.9)
    assert p.data[0] == pytest.approx(-0.1 - 0.19)


def test_sgd_rejects_frozen_and_missing_grad():
    with pytest.raises(ContractViolation, match="frozen"):
        SGD([Parameter(np.zeros(2), trainable=False, name="w")], lr=0.1)
    opt = SGD([Parameter(np.zeros(2), name="p")], lr=0.1)
    with pytest.raises(ContractViolation, match="no gradient"):
        opt.step()


def test_frozen_parameter_unchanged_through_training_graph():
    frozen = Parameter(np.array([2.0, 3.0]), trainable=False)
    p = Parameter(np.array([1.0, 1.0]))
    opt = SGD([p], lr=0.5)
    for _ in range(3):
        backward(G.sum(p * frozen * frozen), [p])
        opt.step()
    np.testing.assert_array_equal(frozen.data, [2.0, 3.0])
    assert frozen.grad is None


def test_step_lr_examples():
    assert [step_lr(e, 0.1) for e in (0, 1, 2)] == [0.1, 0.1, 0.1]
    assert step_lr(3, 0.1) == 0.09
    assert step_lr(7, 0.1) == 0.081


def test_schedule_sequence_exact():
    assert Schedule(0.1).sequence(10) == [0.1, 0.1, 0.1, 0.09, 0.09, 0.09, 0.081, 0.081, 0.081, 0.0729]


def test_schedule_other_lrs():
    assert Schedule(0.01).sequence(4) == [0.01, 0.01, 0.01, 0.009]
    assert Schedule(0.001).lr(9) == 0.000729


def test_batch_order_deterministic_and_covering():
    a = batch_order(10, 4, seed=3, epoch=1)
    b = batch_order(10, 4, seed=3, epoch=1)
    assert [x.tolist() for x in a] == [x.tolist() for x in b]
    assert sorted(np.concatenate(a).tolist()) == list(range(10))
    assert [len(x) for x in a] == [4, 4, 2]
    assert np.concatenate(a).tolist() != np.concatenate(batch_order(10, 4, 3, 2)).tolist()


def test_confusion_identities():
    targets = np.array([0, 0, 1, 2, 2, 2])
    preds = np.array([0, 1, 1, 2, 0, 2])
    m = Metrics(confusion_matrix(targets, preds, 3))
    assert m.confusion.sum(axis=1).tolist() == [2, 1, 3]
    assert m.correct == 4 and m.total == 6
    assert m.accuracy == 4 / 6
    assert m.per_class_accuracy == [0.5, 1.0, 2 / 3]


def test_perfect_classifier_identity_confusion():
    t = np.array([0, 1, 2, 1])
    m = Metrics(confusion_matrix(t, t, 3))
    np.testing.assert_array_equal(m.confusion, np.diag([1, 2, 1]))
    assert m.accuracy == 1.0


def test_sample_std_published_values():
    assert sample_std([0.9389, 0.9407, 0.9357]) == pytest.approx(0.0025, abs=1e-4)
    assert sample_std([0.8855, 0.8872, 0.8788]) == pytest.approx(0.0044, abs=1e-4)
    assert sample_std([0.7, 0.7, 0.7]) == 0.0
    with pytest.raises(ContractViolation):
        sample_std([0.5])


def test_sample_std_uses_n_minus_one():
    assert sample_std([1.0, 3.0]) == pytest.approx(np.sqrt(2.0))


def test_sensitivity_needs_two_templates():
    with pytest.raises(ContractViolation):
        sensitivity(lambda t: 1.0, ["only one [label word]"])
    report = sensitivity(lambda t: len(t) / 100, ["ab", "abcd", "abcdef"])
    assert report.accuracies == [0.02, 0.04, 0.06]
    assert report.std == pytest.approx(0.02)


def test_ablate_runs_each_row_once():
    seen = []
    rows = ablate(lambda flags: seen.append(flags) or 0.5)
    assert seen == list(ABLATION_ROWS)
    assert [r.flags for r in rows] == list(ABLATION_ROWS)


@pytest.fixture
def small_task(toy_vocab, tiny_encoders):
    tmpl = parse_template("a photo seems to express [label word]", toy_vocab)
    classes = ClassEmbeddings.build(["amusement", "anger", "awe"], toy_vocab,
                                    tiny_encoders.text.token_embedding)
    rng = np.random.default_rng(7)
    centres = rng.standard_normal((3, 16))
    targets = np.repeat(np.arange(3), 8)
    feats = (centres[targets] + 0.3 * rng.standard_normal((24, 16))).astype(np.float32)
    return tmpl, classes, feats, targets


def _model(small_task, tiny_encoders, flags=AblationFlags()):
    tmpl, classes, _, _ = small_task
    return PromptClassifier.build(tiny_encoders, tmpl, classes, flags, seed=1)


def _overfit_ratio(prep, logit_scale):
    config = prep.config.replace(logit_scale=logit_scale)
    model = build_model(config, prep)
    idx = batch_order(len(prep.train_y), 64, 0, 0)[0]
    feats, targets = prep.train_x[idx], prep.train_y[idx]
    opt = SGD(model.parameters(), lr=0.1, momentum=0.9)
    first = model.loss(feats, targets).item()
    for _ in range(50):
        backward(model.loss(feats, targets), model.parameters())
        opt.step()
    return model.loss(feats, targets).item() / first


def test_overfit_single_batch(prepared):
    # raw cosines cap the logit margin at 2; a scale of 2 lets 50 steps show the fit
    assert _overfit_ratio(prepared, logit_scale=2.0) <= 0.5


def test_overfit_default_scale_golden(prepared):
    # frozen from the first verified run (seed 0, logit scale 1)
    assert _overfit_ratio(prepared, logit_scale=1.0) == pytest.approx(0.5499, abs=2e-3)


def test_training_keeps_encoders_frozen(small_task, tiny_encoders):
    _, _, feats, targets = small_task
    snaps = snapshot(tiny_encoders.image), snapshot(tiny_encoders.text)
    model = _model(small_task, tiny_encoders)
    result = train(model, feats, targets, TrainSettings(lr0=0.1, batch_size=4, epochs=20), max_steps=100)
    assert result.steps == 100
    assert assert_frozen(tiny_encoders.image, snaps[0]).passed
    assert assert_frozen(tiny_encoders.text, snaps[1]).passed
    assert result.optimizer.parameters == [model.bank.values]


def test_training_deterministic(small_task, tiny_encoders):
    _, _, feats, targets = small_task
    banks = []
    for _ in range(2):
        model = _model(small_task, tiny_encoders)
        train(model, feats, targets, TrainSettings(lr0=0.1, batch_size=8, epochs=3))
        banks.append(model.bank.values.data.tobytes())
    assert banks[0] == banks[1]


def test_history_records_schedule(small_task, tiny_encoders):
    _, _, feats, targets = small_task
    result = train(_model(small_task, tiny_encoders), feats, targets,
                   TrainSettings(lr0=0.1, batch_size=8, epochs=4), feats, targets)
    assert [h.lr for h in result.history] == [0.1, 0.1, 0.1, 0.09]
    assert result.final_test.confusion.sum(axis=1).tolist() == [8, 8, 8]


def test_nonfinite_loss_reports_epoch_batch_instance(small_task, tiny_encoders):
    _, _, feats, targets = small_task
    bad = feats.copy()
    bad[5] = 0  # zero image feature: cosine undefined
    with pytest.raises(NumericError, match=r"epoch 0, batch \d+, instances \[5\]"):
        train(_model(small_task, tiny_encoders), bad, targets, TrainSettings(lr0=0.1, batch_size=24))


def test_evaluate_is_thread_count_independent(small_task, tiny_encoders):
    _, _, feats, targets = small_task
    model = _model(small_task, tiny_encoders)
    a = evaluate(model, feats, targets, batch_size=5, threads=1).confusion
    b = evaluate(model, feats, targets, batch_size=5, threads=4).confusion
    np.testing.assert_array_equal(a, b)


def test_checkpoint_round_trip_and_restore(small_task, tiny_encoders, tmp_path):
    _, _, feats, targets = small_task
    model = _model(small_task, tiny_encoders)
    snap = snapshot(tiny_encoders.text)
    result = train(model, feats, targets, TrainSettings(lr0=0.1, batch_size=8, epochs=2))
    digest = bytes(range(32))
    ckpt = Checkpoint.capture(model, result.optimizer, digest, 2)
    ckpt.save(tmp_path / "c.dpcc")
    loaded = Checkpoint.load(tmp_path / "c.dpcc")
    assert loaded.to_bytes() == ckpt.to_bytes()
    assert loaded.epoch == 2 and loaded.config_digest == digest
    np.testing.assert_array_equal(loaded.velocity, result.optimizer.velocity[0])

    fresh = _model(small_task, tiny_encoders)
    loaded.restore(fresh, digest)
    np.testing.assert_array_equal(fresh.predict(feats), model.predict(feats))
    assert assert_frozen(tiny_encoders.text, snap).passed


def test_checkpoint_digest_mismatch(small_task, tiny_encoders):
    model = _model(small_task, tiny_encoders)
    ckpt = Checkpoint.capture(model, None, b"\x01" * 32, 0)
    with pytest.raises(DigestMismatch) as info:
        ckpt.restore(model, b"\x02" * 32)
    assert "01" * 32 in str(info.value) and "02" * 32 in str(info.value)


def test_checkpoint_rejects_corruption(small_task, tiny_encoders):
    model = _model(small_task, tiny_encoders)
    buf = Checkpoint.capture(model, None, b"\x00" * 32, 0).to_bytes()
    with pytest.raises(ContractViolation, match="byte offset"):
        Checkpoint.from_bytes(buf[:-3])
    with pytest.raises(ContractViolation, match="magic"):
        Checkpoint.from_bytes(b"XXXX" + buf[4:])
