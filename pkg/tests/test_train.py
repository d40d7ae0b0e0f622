import dataclasses
import math

import numpy as np
import pytest

import gano.train as train_mod
from gano import tensor as T
from gano.config import ConfigError, ModelConfig, TrainConfig
from gano.data import SynthConfig, generate_synthetic
from gano.model import GANO, STAPrediction
from gano.tensor import ContractError, Tensor
from gano.train import (
    TrainingError,
    clip_gradients,
    cosine_lr,
    evaluate,
    evaluate_predictions,
    sgd_step,
    train,
)

TINY = ModelConfig(d_model=16, heads=2, box_hidden=8, queries=4)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(21, 8, SynthConfig())


def test_cosine_lr_examples():
    assert cosine_lr(0, 10, 0.1) == 0.1
    assert cosine_lr(5, 10, 0.1) == pytest.approx(0.05)
    assert cosine_lr(10, 10, 0.1) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 0.1)


def test_sgd_step_examples():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.9)
    q = Tensor(np.array([1.0]), requires_grad=True)
    q.grad = np.array([0.0])
    sgd_step([q], 0.1, weight_decay=0.5)
    assert q.data[0] == pytest.approx(0.95)


def test_sgd_momentum_accumulates():
    p = Tensor(np.array([0.0]), requires_grad=True)
    buffers = {}
    for _ in range(2):
        p.grad = np.array([1.0])
        sgd_step([p], 1.0, momentum=0.5, buffers=buffers)
    assert p.data[0] == pytest.approx(-2.5)


def test_sgd_shape_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.zeros(3)
    with pytest.raises(ContractError):
        sgd_step([p], 0.1)


def test_clip_gradients():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert clip_gradients([p], 1.0) == 5.0
    np.testing.assert_allclose(p.grad, [0.6, 0.8])


def test_loss_decreases(data):
    hist = train(data.subset([0, 1]), TINY, TrainConfig(epochs=5, batch_size=2, lr=0.1)).history
    assert hist[-1].total < hist[0].total


@pytest.mark.parametrize("seed", range(3))
def test_loss_at_epoch_ten_below_epoch_one(data, seed):
    hist = train(data, TINY, TrainConfig(epochs=10, seed=seed)).history
    assert hist[9].total < hist[0].total


def test_same_seed_same_checkpoint(tmp_path, data):
    cfg = TrainConfig(epochs=2, seed=5, augment=True)
    train(data.subset(range(4)), TINY, cfg, out_dir=tmp_path / "a")
    train(data.subset(range(4)), TINY, cfg, out_dir=tmp_path / "b")
    for name in ("params.gt", "config.txt", "train_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    log = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,box,noun,verb,ttc,total,lr" and len(log) == 3


def test_non_finite_loss_aborts(data, monkeypatch):
    real = train_mod.batch_losses

    def poisoned(*args, **kwargs):
        comps = real(*args, **kwargs)
        comps["ttc"] = comps["ttc"] * math.nan
        return comps

    monkeypatch.setattr(train_mod, "batch_losses", poisoned)
    # debug mode catches the first non-finite op; without it the loop check does
    with pytest.raises(FloatingPointError):
        train(data, TINY, TrainConfig(epochs=1))
    prev = T.set_debug(False)
    try:
        with pytest.raises(TrainingError, match="non-finite loss at epoch 1, step 1"):
            train(data, TINY, TrainConfig(epochs=1))
    finally:
        T.set_debug(prev)


def test_vocab_mismatch(data):
    with pytest.raises(ConfigError, match="vocabularies"):
        train(data, dataclasses.replace(TINY, n_verbs=7), TrainConfig(epochs=1))


def test_empty_dataset(data):
    with pytest.raises(TrainingError):
        train(data.subset([]), TINY, TrainConfig(epochs=1))


def test_invalid_train_config(data):
    with pytest.raises(ConfigError):
        train(data, TINY, TrainConfig(lr=-1.0))


def _oracle(clip, confidence=1.0):
    t = clip.target
    return STAPrediction(t.box, t.noun, np.eye(5)[t.noun], t.verb, np.eye(4)[t.verb], t.ttc, confidence, 0, True)


def test_perfect_predictions_score_one(data):
    report = evaluate_predictions(data, [[_oracle(c)] for c in data.clips])
    assert all(r.ap == 1.0 for r in report.rows)
    assert report.top1_noun == report.top1_verb == 1.0
    assert report.best_mean_iou == pytest.approx(1.0) and report.best_mean_ttc_error == 0.0


def test_untrained_model_near_chance():
    data = generate_synthetic(4, 48, SynthConfig())
    report = evaluate(data, GANO(ModelConfig(), seed=0))
    # detector boxes cover the target, so AP_b is the baseline box rate
    assert report.ap("box+noun+verb+ttc") < report.ap("box") / data.n_verbs
