"""SGD training with momentum, weight decay, and a multi-step LR schedule.

The schedule decays the base rate by gamma at each milestone epoch, with
an optional linear warmup over the first epochs. A NaN loss aborts the
run immediately so the caller's last per-epoch checkpoint stays good.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import augment
from .ensembling import train_phase_ensemble_loss
from .metrics import accuracy, nll
from .rng import stream


class NaNLossError(RuntimeError):
    """Training diverged; the previously written checkpoint is still valid."""


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_nll: float
    train_acc: float
    val_nll: float
    val_acc: float


def multistep_lr(base_lr, milestones, gamma, epoch):
    """Base rate decayed by gamma at every milestone at or before epoch."""
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)


def lr_for_step(tcfg, epoch, global_step, steps_per_epoch):
    warm = tcfg["warmup_epochs"]
    if epoch < warm:
        total = max(1, warm * steps_per_epoch)
        return tcfg["lr"] * (global_step + 1) / total
    return multistep_lr(tcfg["lr"], tcfg["milestones"], tcfg["gamma"], epoch)


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        for p, vel in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            vel *= self.momentum
            vel += g
            p.data = p.data - lr * vel

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def evaluate(model, dataset, batch_size=256):
    """Deterministic eval-mode NLL and accuracy over the whole dataset."""
    prev = model.mode
    model.set_mode("eval")
    try:
        chunks = [
            model.predict(dataset.images[i:i + batch_size])
            for i in range(0, len(dataset), batch_size)
        ]
    finally:
        model.set_mode(prev)
    probs = np.concatenate(chunks, axis=0)
    return nll(probs, dataset.labels), accuracy(probs, dataset.labels)


def train_model(model, train_ds, val_ds, tcfg, seed, on_epoch_end=None):
    """Run the configured epochs; returns the per-epoch log rows."""
    optimizer = SGD(model.parameters(), tcfg["momentum"], tcfg["weight_decay"])
    batch_size = tcfg["batch_size"]
    steps_per_epoch = max(1, len(train_ds) // batch_size)
    n_train = tcfg["n_train"]
    logs = []
    global_step = 0
    for epoch in range(tcfg["epochs"]):
        model.set_mode("train")
        order = stream(seed, "shuffle", epoch).permutation(len(train_ds))
        lr = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * batch_size:(step + 1) * batch_size]
            images = train_ds.images[idx]
            if tcfg["augment_pad"]:
                images = augment(images, tcfg["augment_pad"],
                                 stream(seed, "augment", epoch, step))
            lr = lr_for_step(tcfg, epoch, global_step, steps_per_epoch)
            optimizer.zero_grad()
            loss = train_phase_ensemble_loss(
                model, images, train_ds.labels[idx], n_train,
                stream(seed, "dropout", epoch, step),
            )
            if not math.isfinite(loss.item()):
                raise NaNLossError(f"non-finite loss at epoch {epoch} step {step}")
            loss.backward()
            optimizer.step(lr)
            global_step += 1
        train_nll, train_acc = evaluate(model, train_ds)
        val_nll, val_acc = evaluate(model, val_ds)
        logs.append(EpochLog(epoch, lr, train_nll, train_acc, val_nll, val_acc))
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, logs[-1])
    return logs


def write_train_log(logs, path):
    lines = ["epoch,lr,train_nll,train_acc,val_nll,val_acc"]
    for row in logs:
        lines.append(
            f"{row.epoch},{repr(float(row.lr))},{repr(row.train_nll)},"
            f"{repr(row.train_acc)},{repr(row.val_nll)},{repr(row.val_acc)}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
