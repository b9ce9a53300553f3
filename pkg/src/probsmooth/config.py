"""Run configuration: file format, defaults, validation, and hashing.

The config file is a small indented key/value format:

  - one `key: value` pair per line; `key:` alone opens a nested section
  - nesting is exactly two spaces per level; tabs are rejected
  - scalars: integers, floats, true/false, null, bare or double-quoted
    strings; lists are single-line `[a, b, c]` of scalars
  - lines whose first non-space character is `#` are comments

`dumps` emits a canonical form (sorted keys, shortest float repr), and the
config hash is the SHA-256 of that canonical text, so two configs hash
equal exactly when they resolve to the same settings.
"""

import copy
import hashlib
import re

from .tensor import ConfigError

_BARE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.+/-]*$")
_INT = re.compile(r"^[+-]?\d+$")


def _parse_scalar(text, lineno):
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part.strip(), lineno) for part in inner.split(",")]
    if text == "true":
        return True
    if text == "false":
        return False
    if text in ("null", "none"):
        return None
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    if _INT.match(text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        pass
    if _BARE.match(text):
        return text
    raise ConfigError(f"config line {lineno}: cannot parse value {text!r}")


def loads(text):
    """Parse config text into nested dicts."""
    root = {}
    stack = [root]
    for lineno, raw in enumerate(text.splitlines(), 1):
        if "\t" in raw:
            raise ConfigError(f"config line {lineno}: tabs are not allowed")
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        indent = len(raw) - len(raw.lstrip(" "))
        if indent % 2:
            raise ConfigError(f"config line {lineno}: indentation must be multiples of 2")
        level = indent // 2
        if level > len(stack) - 1:
            raise ConfigError(f"config line {lineno}: indentation jumps a level")
        del stack[level + 1:]
        container = stack[level]
        key, sep, rest = raw.strip().partition(":")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"config line {lineno}: expected 'key: value'")
        if key in container:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        rest = rest.strip()
        if rest:
            container[key] = _parse_scalar(rest, lineno)
        else:
            child = {}
            container[key] = child
            stack.append(child)
    return root


def _fmt_scalar(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "null"
    if isinstance(v, int):
        return str(int(v))
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, list):
        return "[" + ", ".join(_fmt_scalar(x) for x in v) + "]"
    s = str(v)
    if _BARE.match(s) and s not in ("true", "false", "null", "none") and not _INT.match(s):
        return s
    return '"' + s + '"'


def dumps(d):
    """Canonical text for a nested dict: sorted keys, round-trip scalars."""
    lines = []

    def emit(mapping, level):
        for key in sorted(mapping):
            value = mapping[key]
            pad = "  " * level
            if isinstance(value, dict):
                lines.append(f"{pad}{key}:")
                emit(value, level + 1)
            else:
                lines.append(f"{pad}{key}: {_fmt_scalar(value)}")

    emit(d, 0)
    return "\n".join(lines) + "\n"


def config_hash(d):
    return hashlib.sha256(dumps(d).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

DEFAULTS = {
    "dataset": {
        "source": "synth",  # synth | idx | cifar
        "path": None,
        "labels_path": None,
        "test_path": None,
        "test_labels_path": None,
        "seed": 0,  # generation/corruption stream, independent of the run seed
        "classes": 6,
        "size": 16,
        "channels": 1,
        "train_count": 512,
        "test_count": 256,
    },
    "model": {
        "stage_channels": [6, 12],
        "stage_blocks": [2, 2],
        "stage_downsample": [True, True],
        "classifier": "gap",  # gap | mlp | gmaxp | gmedp
        "activation": "post",  # post | pre
        "residual": False,
        "dropout_rate": 0.3,
        "mlp_dropout_rate": 0.5,
        "smoothing": {
            "enabled": False,
            "variant": "tanh_tau",
            "tau": 10.0,
            "kernel": [1.0, 1.0],
            "placements": "all",
            "padding": "replicate",
        },
    },
    "train": {
        "epochs": 8,
        "batch_size": 16,
        "lr": 0.1,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "milestones": [6, 7],
        "gamma": 0.2,
        "warmup_epochs": 1,
        "augment_pad": 2,
        "n_train": 1,
    },
    "eval": {
        "n": 50,
        "batch_size": 256,
        "corruption_types": [
            "gaussian_noise",
            "impulse_noise",
            "gaussian_blur",
            "brightness",
            "contrast",
        ],
        "severities": [1, 2, 3, 4, 5],
        "shift_steps": 15,
        "shift_stride": 1,
        "shift_count": 32,
        "shift_n": 8,
    },
    "analysis": {
        "hessian_k": 1,
        "hessian_batches": 8,
        "hessian_batch_size": 16,
        "l2_coeff": 0.0005,
        "loss_variance_n": [1, 2, 4, 8, 16],
        "loss_variance_trials": 200,
        "loss_variance_count": 64,
        "noise_frequency": 0.7,  # units of pi radians/pixel
        "noise_width": 0.2,
        "noise_magnitude": 2.5,
        "trace_n": 8,
        "trace_count": 32,
        "fft_count": 32,
    },
}


def _merge(defaults, override, path=""):
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in merged:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a section")
            merged[key] = _merge(merged[key], value, where)
        else:
            merged[key] = value
    return merged


def _require(cond, message):
    if not cond:
        raise ConfigError(message)


def resolve(raw, seed_override=None, out_override=None):
    """Merge defaults, apply overrides, and validate the full config."""
    top_known = {"seed", "out"} | set(DEFAULTS)
    for key in raw:
        _require(key in top_known, f"unknown config key {key!r}")
    cfg = _merge(DEFAULTS, {k: v for k, v in raw.items() if k in DEFAULTS})
    cfg["seed"] = seed_override if seed_override is not None else raw.get("seed")
    cfg["out"] = out_override if out_override is not None else raw.get("out", "runs")
    _require(isinstance(cfg["seed"], int), "config requires an integer 'seed'")

    ds = cfg["dataset"]
    _require(ds["source"] in ("synth", "idx", "cifar"),
             f"dataset.source must be synth|idx|cifar, got {ds['source']!r}")
    if ds["source"] == "idx":
        _require(ds["path"] and ds["labels_path"],
                 "dataset.source idx requires dataset.path and dataset.labels_path")
    if ds["source"] == "cifar":
        _require(ds["path"], "dataset.source cifar requires dataset.path")
        _require(ds["classes"] in (10, 100), "cifar dataset.classes must be 10 or 100")
    _require(ds["classes"] >= 2, "dataset.classes must be >= 2")
    _require(ds["size"] >= 16, "dataset.size must be >= 16")

    model = cfg["model"]
    n_stages = len(model["stage_channels"])
    _require(n_stages >= 1, "model.stage_channels must be non-empty")
    _require(len(model["stage_blocks"]) == n_stages and len(model["stage_downsample"]) == n_stages,
             "model.stage_* lists must have equal lengths")
    _require(model["classifier"] in ("gap", "mlp", "gmaxp", "gmedp"),
             f"model.classifier must be gap|mlp|gmaxp|gmedp, got {model['classifier']!r}")
    _require(model["activation"] in ("post", "pre"),
             f"model.activation must be post|pre, got {model['activation']!r}")
    _require(0.0 <= model["dropout_rate"] < 1.0, "model.dropout_rate must be in [0, 1)")
    sm = model["smoothing"]
    if sm["placements"] != "all":
        _require(isinstance(sm["placements"], list)
                 and all(isinstance(p, int) and 0 <= p < n_stages for p in sm["placements"]),
                 f"smoothing.placements must be 'all' or stage indices in [0, {n_stages})")

    tr = cfg["train"]
    _require(tr["epochs"] >= 1 and tr["batch_size"] >= 1, "train.epochs/batch_size must be >= 1")
    _require(cfg["eval"]["n"] >= 1 and tr["n_train"] >= 1, "ensemble sizes must be >= 1")
    return cfg


def loads_resolved(text, seed_override=None, out_override=None):
    return resolve(loads(text), seed_override=seed_override, out_override=out_override)


def load_file(path, seed_override=None, out_override=None):
    with open(path, "r", encoding="utf-8") as fh:
        return loads_resolved(fh.read(), seed_override, out_override)
