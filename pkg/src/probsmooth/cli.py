"""Operator surface: training, evaluation, and analysis subcommands.

Every subcommand validates the full config before any side effect, derives
all randomness from the config seed through named streams, and writes
reports whose bytes depend only on (config, seed), so reruns are
byte-identical. Reports embed the config/model/protocol hashes so results
from incompatible runs cannot be mixed silently.
"""

import argparse
import os
import sys

import numpy as np

from . import analysis
from . import config as configfmt
from . import metrics
from .data import ParseError, corrupt, load_cifar_binary, load_idx, shift_sequence, synth_shapes
from .ensembling import PredictiveDistribution, export_predictions, mc_predict
from .models import build, load_checkpoint, model_hash, save_checkpoint, spec_from_config
from .rng import derive, stream
from .tensor import ConfigError
from .train import NaNLossError, train_model, write_train_log


def _check_exists(path, what):
    if path and not os.path.exists(path):
        raise ConfigError(f"{what} does not exist: {path}")


def load_datasets(cfg):
    """Train/test datasets per the config; file shapes are verified."""
    ds = cfg["dataset"]
    if ds["source"] == "synth":
        train = synth_shapes(ds["train_count"], ds["classes"], ds["size"], ds["seed"],
                             channels=ds["channels"], split="train")
        test = synth_shapes(ds["test_count"], ds["classes"], ds["size"], ds["seed"],
                            channels=ds["channels"], split="test")
    elif ds["source"] == "idx":
        _check_exists(ds["path"], "dataset.path")
        _check_exists(ds["labels_path"], "dataset.labels_path")
        train = load_idx(ds["path"], ds["labels_path"], class_count=ds["classes"])
        if ds["test_path"]:
            _check_exists(ds["test_path"], "dataset.test_path")
            _check_exists(ds["test_labels_path"], "dataset.test_labels_path")
            test = load_idx(ds["test_path"], ds["test_labels_path"], class_count=ds["classes"],
                            split="test")
        else:
            n_test = min(ds["test_count"], len(train) // 2)
            test = train.subset(np.arange(len(train) - n_test, len(train)))
            train = train.subset(np.arange(len(train) - n_test))
    else:  # cifar
        _check_exists(ds["path"], "dataset.path")
        train = load_cifar_binary(ds["path"], ds["classes"])
        if ds["test_path"]:
            _check_exists(ds["test_path"], "dataset.test_path")
            test = load_cifar_binary(ds["test_path"], ds["classes"], split="test")
        else:
            n_test = min(ds["test_count"], len(train) // 2)
            test = train.subset(np.arange(len(train) - n_test, len(train)))
            train = train.subset(np.arange(len(train) - n_test))
    expect = (ds["channels"], ds["size"], ds["size"])
    if train.images.shape[1:] != expect:
        raise ConfigError(
            f"dataset images {train.images.shape[1:]} do not match config {expect}"
        )
    return train, test


def _hashes(cfg):
    # the output directory is where results land, not part of their identity
    identity = {k: v for k, v in cfg.items() if k != "out"}
    return {
        "config": configfmt.config_hash(identity),
        "model": model_hash(spec_from_config(cfg)),
        "protocol": configfmt.config_hash({"dataset": cfg["dataset"], "eval": cfg["eval"]}),
    }


def _load_compatible_checkpoint(cfg, path):
    _check_exists(path, "checkpoint")
    if not path:
        raise ConfigError("this subcommand requires --checkpoint")
    model = load_checkpoint(path)
    want = model_hash(spec_from_config(cfg))
    have = model_hash(model.spec)
    if want != have:
        raise ConfigError(
            f"checkpoint/config mismatch: checkpoint model {have}, config model {want}"
        )
    return model


def _ensemble(model, images, n, seed, batch_size):
    """Chunked MC ensemble over a dataset; members stay aligned across chunks."""
    model.set_mode("mc_eval")
    member_chunks = []
    for c, start in enumerate(range(0, images.shape[0], batch_size)):
        chunk = images[start:start + batch_size]
        pd = mc_predict(model, chunk, n, seed=derive(seed, "ensemble-chunk", c))
        member_chunks.append(pd.members)
    members = [np.concatenate([mc[i] for mc in member_chunks]) for i in range(n)]
    return PredictiveDistribution(members)


def _write_summary(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(configfmt.dumps(payload))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(cfg, args):
    train_ds, test_ds = load_datasets(cfg)
    model = build(spec_from_config(cfg), seed=cfg["seed"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    ckpt_path = os.path.join(out, "checkpoint.ckpt")

    def on_epoch_end(epoch, m, row):
        save_checkpoint(ckpt_path, m)

    logs = train_model(model, train_ds, test_ds, cfg["train"], cfg["seed"],
                       on_epoch_end=on_epoch_end)
    write_train_log(logs, os.path.join(out, "train_log.csv"))
    final = logs[-1]
    _write_summary(os.path.join(out, "train_summary.txt"), {
        "hashes": _hashes(cfg),
        "seed": cfg["seed"],
        "epochs": cfg["train"]["epochs"],
        "final": {
            "train_nll": final.train_nll, "train_acc": final.train_acc,
            "val_nll": final.val_nll, "val_acc": final.val_acc,
        },
    })
    return 0


def _base_report(cfg, pd, labels):
    report = metrics.MetricsReport(
        nll=metrics.nll(pd, labels),
        accuracy=metrics.accuracy(pd, labels),
        ece=metrics.ece(pd, labels),
        relative_confidence=metrics.relative_confidence(pd, labels),
    )
    report.metadata = dict(_hashes(cfg))
    report.metadata.update({"seed": cfg["seed"], "n": cfg["eval"]["n"]})
    return report.validate()


def cmd_eval(cfg, args):
    _, test_ds = load_datasets(cfg)
    model = _load_compatible_checkpoint(cfg, args.checkpoint)
    pd = _ensemble(model, test_ds.images, cfg["eval"]["n"], cfg["seed"],
                   cfg["eval"]["batch_size"])
    report = _base_report(cfg, pd, test_ds.labels)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    metrics.write_report(report, os.path.join(out, "eval_report.txt"))
    metrics.write_report_csv(report, os.path.join(out, "eval_report.csv"))
    export_predictions(pd, os.path.join(out, "predictions.csv"))
    return 0


def cmd_eval_corruption(cfg, args):
    _, test_ds = load_datasets(cfg)
    model = _load_compatible_checkpoint(cfg, args.checkpoint)
    ev = cfg["eval"]
    report = metrics.MetricsReport()
    report.metadata = dict(_hashes(cfg))
    report.metadata.update({"seed": cfg["seed"], "n": ev["n"]})
    for ctype in ev["corruption_types"]:
        for sev in ev["severities"]:
            corrupted = corrupt(test_ds, ctype, sev, seed=cfg["dataset"]["seed"])
            pd = _ensemble(model, corrupted.images, ev["n"], cfg["seed"], ev["batch_size"])
            report.corruption[(ctype, sev)] = metrics.corruption_cell(pd, corrupted.labels)
    if args.baseline:
        _check_exists(args.baseline, "baseline report")
        baseline = metrics.read_report(args.baseline)
        if baseline.metadata.get("protocol") != report.metadata["protocol"]:
            raise ConfigError(
                "baseline report was produced under a different evaluation protocol"
            )
        report.aggregates = metrics.corruption_aggregates(report.corruption,
                                                          baseline.corruption)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    metrics.write_report(report, os.path.join(out, "corruption_report.txt"))
    metrics.write_report_csv(report, os.path.join(out, "corruption_report.csv"))
    return 0


def cmd_eval_consistency(cfg, args):
    _, test_ds = load_datasets(cfg)
    model = _load_compatible_checkpoint(cfg, args.checkpoint)
    ev = cfg["eval"]
    count = min(ev["shift_count"], len(test_ds))
    steps, stride = ev["shift_steps"], ev["shift_stride"]
    sequences = [shift_sequence(test_ds.images[i], steps, stride) for i in range(count)]
    frame_preds = []
    for f in range(steps + 1):
        batch = np.stack([sequences[i][f] for i in range(count)])
        pd = _ensemble(model, batch, ev["shift_n"], derive(cfg["seed"], "shift-frame", f),
                       ev["batch_size"])
        frame_preds.append(pd.aggregated)
    cons, cecs, relcs = [], [], []
    for i in range(count):
        seq = [frame_preds[f][i] for f in range(steps + 1)]
        cons.append(metrics.consistency(seq))
        cecs.append(metrics.cec(seq))
        relcs.append(np.mean([
            p[test_ds.labels[i]] / p.max() for p in seq
        ]))
    report = metrics.MetricsReport(
        consistency=float(np.mean(cons)),
        cec=float(np.mean(cecs)),
        relative_confidence=float(np.mean(relcs)),
    )
    report.metadata = dict(_hashes(cfg))
    report.metadata.update({
        "seed": cfg["seed"], "n": ev["shift_n"],
        "shift_steps": steps, "shift_stride": stride, "count": count,
    })
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    metrics.write_report(report, os.path.join(out, "consistency_report.txt"))
    metrics.write_report_csv(report, os.path.join(out, "consistency_report.csv"))
    return 0


def cmd_analyze_fft(cfg, args):
    _, test_ds = load_datasets(cfg)
    model = _load_compatible_checkpoint(cfg, args.checkpoint)
    an = cfg["analysis"]
    x = test_ds.images[:an["fft_count"]]
    prev = model.mode
    model.set_mode("mc_eval")
    try:
        runs = []
        for r in range(an["trace_n"]):
            record = []
            model.predict(x, rng=stream(cfg["seed"], "fft-run", r), record=record)
            runs.append(record)
    finally:
        model.set_mode(prev)
    names = [name for name, _ in runs[0]]
    diag_lines = ["layer,index,frequency,log_amplitude"]
    spec_lines = ["layer,u,v,re,im"]
    for pos, name in enumerate(names):
        stack = np.stack([run[pos][1] for run in runs])  # (runs, n, c, h, w)
        h = stack.shape[-1]
        amp = np.abs(np.fft.fft2(stack)).mean(axis=(0, 1, 2))
        diag = analysis.diagonal_log_amplitude(amp)
        for d, value in enumerate(diag):
            freq = 2.0 * np.pi * d / h
            diag_lines.append(f"{name},{d},{repr(float(freq))},{repr(float(value))}")
        grid = np.fft.fft2(runs[0][pos][1][0]).mean(axis=0)  # channel-mean, first example
        for u in range(grid.shape[0]):
            for v in range(grid.shape[1]):
                spec_lines.append(
                    f"{name},{u},{v},{repr(float(grid[u, v].real))},{repr(float(grid[u, v].imag))}"
                )
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "fft_diag.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(diag_lines) + "\n")
    with open(os.path.join(out, "fft_spectrum.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(spec_lines) + "\n")
    return 0


def cmd_analyze_variance(cfg, args):
    _, test_ds = load_datasets(cfg)
    model = _load_compatible_checkpoint(cfg, args.checkpoint)
    an = cfg["analysis"]
    trace = analysis.trace_feature_variance(
        model, test_ds.images[:an["trace_count"]], an["trace_n"], cfg["seed"]
    )
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    trace.to_csv(os.path.join(out, "variance_trace.csv"))
    return 0


def cmd_hessian_spectrum(cfg, args):
    train_ds, _ = load_datasets(cfg)
    model = _load_compatible_checkpoint(cfg, args.checkpoint)
    an = cfg["analysis"]
    subset = train_ds.subset(np.arange(min(len(train_ds),
                                           an["hessian_batches"] * an["hessian_batch_size"])))
    report = analysis.hessian_max_spectrum(
        model, subset, an["hessian_batch_size"], an["hessian_k"],
        cfg["train"]["augment_pad"], an["l2_coeff"], cfg["seed"],
    )
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    report.to_csv(os.path.join(out, "hessian_spectrum.csv"))
    lams = report.eigenvalues()
    _write_summary(os.path.join(out, "hessian_summary.txt"), {
        "hashes": _hashes(cfg),
        "seed": cfg["seed"],
        "spectrum": {
            "count": len(report.rows),
            "max": float(lams.max()),
            "median": float(np.median(lams)),
            "unconverged": int(sum(1 for _, _, _, c in report.rows if not c)),
        },
        "settings": report.metadata,
    })
    return 0


def cmd_loss_variance(cfg, args):
    train_ds, _ = load_datasets(cfg)
    model = _load_compatible_checkpoint(cfg, args.checkpoint)
    an = cfg["analysis"]
    subset = train_ds.subset(np.arange(min(len(train_ds), an["loss_variance_count"])))
    table = analysis.loss_variance_vs_n(model, subset, an["loss_variance_n"],
                                        an["loss_variance_trials"], cfg["seed"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    analysis.loss_variance_table_to_csv(table, os.path.join(out, "loss_variance.csv"))
    ns = [n for n, _ in table]
    vs = [v for _, v in table]
    slope = None
    if all(v > 0 for v in vs) and len(vs) >= 2:
        slope = analysis.ols_slope(np.log(ns), np.log(vs))
    _write_summary(os.path.join(out, "loss_variance_summary.txt"), {
        "hashes": _hashes(cfg),
        "seed": cfg["seed"],
        "ensemble_sizes": ns,
        "log_log_slope": slope,
        "trials": an["loss_variance_trials"],
    })
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "eval-corruption": cmd_eval_corruption,
    "eval-consistency": cmd_eval_consistency,
    "analyze-fft": cmd_analyze_fft,
    "analyze-variance": cmd_analyze_variance,
    "hessian-spectrum": cmd_hessian_spectrum,
    "loss-variance": cmd_loss_variance,
}

_NEEDS_CHECKPOINT = {name for name in COMMANDS if name != "train"}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="probsmooth",
        description="Train, evaluate, and analyze spatially smoothed MC-dropout CNNs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--checkpoint", default=None, help="model checkpoint path")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name == "eval-corruption":
            p.add_argument("--baseline", default=None,
                           help="baseline corruption report for CE/CNLL/CECE ratios")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _check_exists(args.config, "config file")
        cfg = configfmt.load_file(args.config, seed_override=args.seed,
                                  out_override=args.out)
        if args.command in _NEEDS_CHECKPOINT and not args.checkpoint:
            raise ConfigError(f"{args.command} requires --checkpoint")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NaNLossError as exc:
        print(f"error: {exc} (last per-epoch checkpoint retained)", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
