"""Training loop: schedule, optimizer math, determinism, calibration run."""

import numpy as np
import pytest

from probsmooth import tensor as T
from probsmooth.data import synth_shapes
from probsmooth.models import ModelSpec, StageSpec, build
from probsmooth.train import NaNLossError, SGD, evaluate, lr_for_step, multistep_lr, train_model


def easy_task():
    train_ds = synth_shapes(512, 4, 16, seed=100, split="train")
    test_ds = synth_shapes(256, 4, 16, seed=100, split="test")
    return train_ds, test_ds


def wide_spec(dropout=0.0):
    return ModelSpec(stages=[StageSpec(16, 1, True), StageSpec(32, 1, True)],
                     class_count=4, image_size=16, dropout_rate=dropout)


TCFG = dict(epochs=5, batch_size=16, lr=0.1, momentum=0.9, weight_decay=5e-4,
            milestones=[3, 4], gamma=0.2, warmup_epochs=1, augment_pad=2, n_train=1)


class TestSchedule:
    def test_multistep_values(self):
        lrs = [multistep_lr(0.1, [2, 4], 0.2, e) for e in range(5)]
        np.testing.assert_allclose(lrs, [0.1, 0.1, 0.02, 0.02, 0.004], rtol=1e-12)

    def test_warmup_ramps_linearly(self):
        tcfg = dict(lr=0.1, milestones=[], gamma=0.2, warmup_epochs=1)
        lrs = [lr_for_step(tcfg, 0, step, 4) for step in range(4)]
        np.testing.assert_allclose(lrs, [0.025, 0.05, 0.075, 0.1], rtol=1e-12)
        assert lr_for_step(tcfg, 1, 4, 4) == 0.1


class TestSGD:
    def test_single_step_by_hand(self):
        p = T.Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([p], momentum=0.5, weight_decay=0.1)
        p.grad = np.array([2.0])
        opt.step(lr=0.1)
        # g = 2 + 0.1*1 = 2.1, vel = 2.1, p = 1 - 0.21
        np.testing.assert_allclose(p.data, [0.79], atol=1e-15)
        p.grad = np.array([1.0])
        opt.step(lr=0.1)
        # vel = 0.5*2.1 + (1 + 0.1*0.79) = 2.129, p = 0.79 - 0.2129
        np.testing.assert_allclose(p.data, [0.79 - 0.2129], atol=1e-12)


class TestTraining:
    def test_deterministic_loss_trajectory(self):
        train_ds, test_ds = easy_task()
        runs = []
        for _ in range(2):
            model = build(wide_spec(dropout=0.2), seed=3)
            logs = train_model(model, train_ds, test_ds,
                               dict(TCFG, epochs=2), seed=3)
            runs.append([(r.train_nll, r.val_nll, r.val_acc) for r in logs])
        assert runs[0] == runs[1]

    def test_reference_model_reaches_95_percent_in_5_epochs(self):
        train_ds, test_ds = easy_task()
        model = build(wide_spec(dropout=0.3), seed=0)
        logs = train_model(model, train_ds, test_ds, TCFG, seed=0)
        assert logs[-1].val_acc >= 0.95

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_loss_raises(self):
        train_ds, test_ds = easy_task()
        model = build(wide_spec(), seed=0)
        bad = dict(TCFG, weight_decay=1e200, epochs=1)
        with pytest.raises(NaNLossError), np.errstate(all="ignore"):
            train_model(model, train_ds, test_ds, bad, seed=0)

    def test_evaluate_matches_manual(self):
        train_ds, test_ds = easy_task()
        model = build(wide_spec(), seed=1)
        nll_val, acc = evaluate(model, test_ds, batch_size=100)
        probs = model.set_mode("eval").predict(test_ds.images)
        from probsmooth.metrics import accuracy, nll

        assert nll_val == nll(probs, test_ds.labels)
        assert acc == accuracy(probs, test_ds.labels)
