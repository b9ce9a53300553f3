"""Evaluation metrics: calibration, corruption ratios, shift stability.

All metrics accept either a PredictiveDistribution or a plain (n, classes)
probability array. Probabilities are floored at 1e-12 before any log so a
confidently wrong prediction yields a large finite penalty.
"""

from dataclasses import dataclass, field

import numpy as np

from . import config as configfmt
from .tensor import ConfigError, PROB_CLAMP


def _probs_of(pred):
    probs = getattr(pred, "aggregated", pred)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ConfigError(f"expected (n, classes) probabilities, got shape {probs.shape}")
    return probs


def nll(pred, labels):
    """Mean negative log probability of the true class."""
    probs = _probs_of(pred)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ConfigError(f"label out of range [0, {probs.shape[1]})")
    p = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(p, PROB_CLAMP)).mean())


def accuracy(pred, labels):
    probs = _probs_of(pred)
    return float((probs.argmax(axis=1) == np.asarray(labels)).mean())


def error_rate(pred, labels):
    return 1.0 - accuracy(pred, labels)


def ece(pred, labels, bins=15):
    """Expected calibration error over equal-width, right-inclusive bins.

    Confidence is the max predicted probability; each nonempty bin
    contributes its share of |accuracy - mean confidence|.
    """
    if bins < 1:
        raise ConfigError(f"ece: bins must be >= 1, got {bins}")
    probs = _probs_of(pred)
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    n = len(labels)
    for b in range(bins):
        mask = idx == b
        if not mask.any():
            continue
        gap = abs(correct[mask].mean() - conf[mask].mean())
        total += mask.sum() / n * gap
    return float(total)


def consistency(prob_sequence):
    """Fraction of adjacent frames whose predicted class agrees."""
    seq = [np.asarray(p, dtype=np.float64) for p in prob_sequence]
    if len(seq) < 2:
        raise ConfigError("consistency needs a sequence of at least 2 predictions")
    picks = [int(p.argmax()) for p in seq]
    same = sum(a == b for a, b in zip(picks, picks[1:]))
    return same / (len(seq) - 1)


def cec(prob_sequence):
    """Mean cross-entropy between each frame's prediction and the next."""
    seq = [np.asarray(p, dtype=np.float64) for p in prob_sequence]
    if len(seq) < 2:
        raise ConfigError("cec needs a sequence of at least 2 predictions")
    total = 0.0
    for cur, nxt in zip(seq, seq[1:]):
        total += float(-(cur * np.log(np.maximum(nxt, PROB_CLAMP))).sum())
    return total / (len(seq) - 1)


def relative_confidence(pred, labels):
    """Mean ratio of true-class probability to the predicted maximum."""
    probs = _probs_of(pred)
    labels = np.asarray(labels)
    top = probs.max(axis=1)
    if np.any(top <= 0):
        raise ConfigError("relative_confidence: max probability must be positive")
    return float((probs[np.arange(len(labels)), labels] / top).mean())


# ---------------------------------------------------------------------------
# corruption tables and their ratio aggregates
# ---------------------------------------------------------------------------


def corruption_cell(pred, labels, bins=15):
    """Metrics for one (corruption type, severity) dataset."""
    return {
        "nll": nll(pred, labels),
        "err": error_rate(pred, labels),
        "ece": ece(pred, labels, bins=bins),
    }


def corruption_aggregates(model_table, baseline_table):
    """Per-type ratio of summed error/nll/ece against a baseline model.

    Both tables map (type, severity) to a cell dict over an identical grid;
    each type's ratio divides the model's sum over severities by the
    baseline's. Means over types summarize each ratio family.
    """
    if set(model_table) != set(baseline_table):
        missing = set(model_table) ^ set(baseline_table)
        raise ConfigError(f"corruption grids differ; unmatched cells: {sorted(missing)}")
    if not model_table:
        raise ConfigError("corruption tables are empty")
    types = sorted({t for t, _ in model_table})
    out = {"ce": {}, "cnll": {}, "cece": {}}
    for ratio_key, cell_key in (("ce", "err"), ("cnll", "nll"), ("cece", "ece")):
        for ctype in types:
            cells = sorted(sev for t, sev in model_table if t == ctype)
            num = sum(model_table[(ctype, s)][cell_key] for s in cells)
            den = sum(baseline_table[(ctype, s)][cell_key] for s in cells)
            if den == 0:
                raise ConfigError(f"zero baseline denominator for {ratio_key} of {ctype!r}")
            out[ratio_key][ctype] = num / den
        out["m" + ratio_key] = float(np.mean([out[ratio_key][t] for t in types]))
    return out


# ---------------------------------------------------------------------------
# report container and serialization
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    nll: float = None
    accuracy: float = None
    ece: float = None
    consistency: float = None
    cec: float = None
    relative_confidence: float = None
    corruption: dict = field(default_factory=dict)  # (type, severity) -> cell
    aggregates: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def validate(self):
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise ConfigError(f"accuracy out of [0, 1]: {self.accuracy}")
        if self.ece is not None and not 0.0 <= self.ece <= 1.0:
            raise ConfigError(f"ece out of [0, 1]: {self.ece}")
        if self.nll is not None and self.nll < 0.0:
            raise ConfigError(f"nll negative: {self.nll}")
        return self


_SCALARS = ("nll", "accuracy", "ece", "consistency", "cec", "relative_confidence")


def report_to_dict(report):
    d = {}
    for key in _SCALARS:
        value = getattr(report, key)
        if value is not None:
            d[key] = float(value)
    if report.corruption:
        table = {}
        for (ctype, sev), cell in sorted(report.corruption.items()):
            table.setdefault(ctype, {})[f"severity_{sev}"] = {
                k: float(v) for k, v in cell.items()
            }
        d["corruption"] = table
    if report.aggregates:
        agg = {}
        for key, value in report.aggregates.items():
            agg[key] = {t: float(r) for t, r in value.items()} if isinstance(value, dict) \
                else float(value)
        d["aggregates"] = agg
    if report.metadata:
        d["metadata"] = dict(report.metadata)
    return d


def report_from_dict(d):
    report = MetricsReport()
    for key in _SCALARS:
        if key in d:
            setattr(report, key, float(d[key]))
    for ctype, severities in d.get("corruption", {}).items():
        for sev_key, cell in severities.items():
            sev = int(sev_key.split("_", 1)[1])
            report.corruption[(ctype, sev)] = dict(cell)
    report.aggregates = d.get("aggregates", {})
    report.metadata = d.get("metadata", {})
    return report


def write_report(report, path):
    """Human-readable hierarchical text (the canonical config format)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(configfmt.dumps(report_to_dict(report)))


def read_report(path):
    with open(path, "r", encoding="utf-8") as fh:
        return report_from_dict(configfmt.loads(fh.read()))


def write_report_csv(report, path):
    """Flat plotting table: one row per metric value."""
    lines = ["metric,corruption,severity,value"]
    for key in _SCALARS:
        value = getattr(report, key)
        if value is not None:
            lines.append(f"{key},,,{repr(float(value))}")
    for (ctype, sev), cell in sorted(report.corruption.items()):
        for metric in sorted(cell):
            lines.append(f"{metric},{ctype},{sev},{repr(float(cell[metric]))}")
    for family, value in sorted(report.aggregates.items()):
        if isinstance(value, dict):
            for ctype in sorted(value):
                lines.append(f"{family},{ctype},,{repr(float(value[ctype]))}")
        else:
            lines.append(f"{family},,,{repr(float(value))}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
