"""Ensemble mechanisms over categorical predictions.

Four ways to combine member distributions: the equal-weight MC estimator,
explicit importance weighting, exponentially decayed temporal smoothing of
a prediction stream, and an ensemble loss for the training phase. Members
are always combined in probability space.
"""

import math

import numpy as np

from . import tensor as T
from .rng import stream

TEMPORAL_CAPACITY = 5
TEMPORAL_DECAY = math.exp(-0.8)

_ROW_TOL = 1e-9
_WEIGHT_TOL = 1e-12


class PredictiveDistribution:
    """Per-example categorical predictions from one or more ensemble members."""

    def __init__(self, members, weights=None):
        if not members:
            raise T.ConfigError("PredictiveDistribution needs at least one member")
        members = [np.asarray(m, dtype=np.float64) for m in members]
        shape = members[0].shape
        for m in members:
            if m.ndim != 2 or m.shape != shape:
                raise T.ShapeError("PredictiveDistribution", shape, m.shape)
            if np.abs(m.sum(axis=1) - 1.0).max() > _ROW_TOL:
                raise T.ConfigError("member rows must sum to 1")
        if weights is None:
            weights = np.full(len(members), 1.0 / len(members))
        else:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != (len(members),):
                raise T.ShapeError("PredictiveDistribution weights", weights.shape, (len(members),))
            if np.any(weights < 0) or weights.sum() <= 0:
                raise T.ConfigError("weights must be nonnegative and not all zero")
            weights = weights / weights.sum()
        assert abs(weights.sum() - 1.0) <= _WEIGHT_TOL
        self.members = members
        self.weights = weights
        # shift by the first member: identical members aggregate bit-exactly
        base = members[0]
        self.aggregated = base + sum(w * (m - base) for w, m in zip(weights, members))

    def __len__(self):
        return len(self.members)


def mc_predict(model, x, n, seed):
    """Equal-weight ensemble of n stochastic forward passes."""
    if n < 1:
        raise T.ConfigError(f"mc_predict: ensemble size must be >= 1, got {n}")
    if model.mode != "mc_eval":
        raise T.ConfigError(f"mc_predict requires mc_eval mode, model is in {model.mode!r}")
    rng = stream(seed, "mc_predict")
    members = [model.predict(x, rng=rng) for _ in range(n)]
    return PredictiveDistribution(members)


def weighted_ensemble(members, importances):
    """Combine members with explicit importances (renormalized internally)."""
    if len(members) != len(importances):
        raise T.ShapeError("weighted_ensemble", (len(members),), (len(importances),))
    return PredictiveDistribution(list(members), np.asarray(importances, dtype=np.float64))


class TemporalBuffer:
    """Ring of the last few member distributions with exponential decay."""

    def __init__(self, capacity=TEMPORAL_CAPACITY, decay=TEMPORAL_DECAY):
        if capacity < 1 or not 0 < decay <= 1:
            raise T.ConfigError(f"bad temporal buffer (capacity={capacity}, decay={decay})")
        self.capacity = capacity
        self.decay = decay
        self._members = []  # newest first

    def push(self, member):
        self._members.insert(0, np.asarray(member, dtype=np.float64))
        del self._members[self.capacity:]

    def distribution(self):
        weights = self.decay ** np.arange(len(self._members))
        return weighted_ensemble(self._members, weights)


def temporal_smooth(buffer, new_member):
    """Push a prediction onto the stream and return the decayed ensemble."""
    buffer.push(new_member)
    return buffer.distribution()


def train_phase_ensemble_loss(model, images, labels, n_train, rng):
    """NLL of the probability average of n_train stochastic predictions.

    Gradients flow through every member, so one optimizer step sees the
    ensembled loss rather than a single noisy draw.
    """
    if n_train < 1:
        raise T.ConfigError(f"train ensemble size must be >= 1, got {n_train}")
    acc = model.forward_probs(images, rng=rng)
    for _ in range(n_train - 1):
        acc = T.add(acc, model.forward_probs(images, rng=rng))
    return T.nll_loss(T.scale(acc, 1.0 / n_train), labels)


def export_predictions(pd, path):
    """One CSV row per example: every member's probabilities plus the mix."""
    n, c = pd.aggregated.shape
    cols = []
    for i in range(len(pd)):
        cols += [f"member{i}_p{j}" for j in range(c)]
    cols += [f"aggregate_p{j}" for j in range(c)]
    lines = ["example," + ",".join(cols)]
    for row in range(n):
        vals = []
        for m in pd.members:
            vals += [repr(float(v)) for v in m[row]]
        vals += [repr(float(v)) for v in pd.aggregated[row]]
        lines.append(f"{row}," + ",".join(vals))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
