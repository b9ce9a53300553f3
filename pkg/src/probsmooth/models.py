"""Stage-based CNN builder with smoothing placement and pooling heads.

A model is a stack of stages; each stage runs its conv blocks at a fixed
channel width, optionally applies a smoothing layer, then downsamples.
Heads reduce the final feature volume to class logits by global average /
max / median pooling plus one linear map, or by a small MLP.

Modes: ``train`` (batch statistics, stochastic dropout), ``eval``
(running statistics, dropout off), ``mc_eval`` (running statistics,
dropout kept stochastic for Monte-Carlo sampling).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import config as configfmt
from . import tensor as T
from .ensembling import PredictiveDistribution
from .rng import stream
from .smoothing import BlurKernel, ProbConfig, smooth

MODES = ("train", "eval", "mc_eval")
CLASSIFIERS = ("gap", "mlp", "gmaxp", "gmedp")

CHECKPOINT_MAGIC = b"PSCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class StageSpec:
    channels: int
    blocks: int = 1
    downsample: bool = True


@dataclass
class SmoothingSpec:
    prob: ProbConfig = field(default_factory=ProbConfig)
    kernel: BlurKernel = field(default_factory=BlurKernel)
    placements: tuple | None = None  # None means every stage
    padding: str = "replicate"


@dataclass
class ModelSpec:
    stages: list
    class_count: int
    in_channels: int = 1
    image_size: int = 16
    classifier: str = "gap"
    activation_arrangement: str = "post"
    dropout_rate: float = 0.0
    mlp_dropout_rate: float = 0.5
    residual: bool = False
    smoothing: SmoothingSpec | None = None

    def __post_init__(self):
        if not self.stages:
            raise T.ConfigError("model needs at least one stage")
        for s in self.stages:
            if s.channels < 1 or s.blocks < 1:
                raise T.ConfigError(f"stage needs channels >= 1 and blocks >= 1, got {s}")
        if self.classifier not in CLASSIFIERS:
            raise T.ConfigError(f"unknown classifier {self.classifier!r}")
        if self.activation_arrangement not in ("post", "pre"):
            raise T.ConfigError(f"unknown arrangement {self.activation_arrangement!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise T.ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.smoothing is not None and self.smoothing.placements is not None:
            bad = [p for p in self.smoothing.placements if not 0 <= p < len(self.stages)]
            if bad:
                raise T.ConfigError(f"smoothing placement out of range: {bad}")

    def placements(self):
        if self.smoothing is None:
            return ()
        if self.smoothing.placements is None:
            return tuple(range(len(self.stages)))
        return tuple(sorted(set(self.smoothing.placements)))


def resnet18_spec(class_count=100, in_channels=3, image_size=32, **kw):
    """Four-stage preset mirroring a classic 18-layer residual layout."""
    stages = [StageSpec(64, 2, False), StageSpec(128, 2, True),
              StageSpec(256, 2, True), StageSpec(512, 2, True)]
    return ModelSpec(stages, class_count, in_channels, image_size, residual=True, **kw)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class _Context:
    __slots__ = ("mode", "rng", "record")

    def __init__(self, mode, rng, record):
        self.mode = mode
        self.rng = rng
        self.record = record

    @property
    def stochastic(self):
        return self.mode in ("train", "mc_eval")

    def tap(self, name, t):
        if self.record is not None:
            self.record.append((name, t.data.copy()))


class Conv:
    def __init__(self, name, cin, cout, rng, ksize=3, stride=1, padding=1):
        bound = np.sqrt(6.0 / (cin * ksize * ksize))
        self.name = name
        self.stride = stride
        self.padding = padding
        self.weight = T.Tensor(rng.uniform(-bound, bound, (cout, cin, ksize, ksize)),
                               requires_grad=True)
        self.bias = T.Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, t, ctx):
        out = T.conv2d(t, self.weight, self.stride, self.padding)
        return T.add(out, T.reshape(self.bias, (self.bias.shape[0], 1, 1)))

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def buffers(self):
        return []


class BatchNorm:
    def __init__(self, name, channels):
        self.name = name
        self.gamma = T.Tensor(np.ones(channels), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, t, ctx):
        return T.batch_norm(t, self.gamma, self.beta, self.running_mean,
                            self.running_var, training=ctx.mode == "train")

    def params(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]


class Linear:
    def __init__(self, name, din, dout, rng):
        bound = np.sqrt(6.0 / din)
        self.name = name
        self.weight = T.Tensor(rng.uniform(-bound, bound, (din, dout)), requires_grad=True)
        self.bias = T.Tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, t, ctx):
        return T.add(T.matmul(t, self.weight), self.bias)

    def params(self):
        return [(f"{self.name}.weight", self.weight), (f"{self.name}.bias", self.bias)]

    def buffers(self):
        return []


class Block:
    """One conv unit: conv/norm/relu in the configured order plus dropout."""

    def __init__(self, name, cin, cout, spec, seed):
        self.name = name
        self.residual = spec.residual and cin == cout
        self.dropout_rate = spec.dropout_rate
        self.pre = spec.activation_arrangement == "pre"
        norm_c = cin if self.pre else cout
        self.conv = Conv(f"{name}.conv", cin, cout, stream(seed, "init", f"{name}.conv"))
        self.bn = BatchNorm(f"{name}.bn", norm_c)

    def __call__(self, t, ctx):
        x = t
        if self.pre:
            t = self.conv(T.relu(self.bn(t, ctx)), ctx)
        else:
            t = T.relu(self.bn(self.conv(t, ctx), ctx))
        t = T.dropout(t, self.dropout_rate, train_mode=ctx.stochastic, rng=ctx.rng)
        if self.residual:
            t = T.add(t, x)
        return t

    def params(self):
        return self.conv.params() + self.bn.params()

    def buffers(self):
        return self.bn.buffers()


class SmoothLayer:
    def __init__(self, name, smoothing):
        self.name = name
        self.smoothing = smoothing

    def __call__(self, t, ctx):
        ctx.tap(f"{self.name}.in", t)
        t = smooth(t, self.smoothing.prob, self.smoothing.kernel,
                   padding=self.smoothing.padding)
        ctx.tap(f"{self.name}.out", t)
        return t

    def params(self):
        return []

    def buffers(self):
        return []


class Stage:
    def __init__(self, index, cin, spec, seed):
        stage = spec.stages[index]
        self.name = f"stage{index}"
        self.downsample = stage.downsample
        self.blocks = []
        c = cin
        for b in range(stage.blocks):
            self.blocks.append(Block(f"{self.name}.block{b}", c, stage.channels, spec, seed))
            c = stage.channels
        self.smooth = None
        if index in spec.placements():
            self.smooth = SmoothLayer(f"{self.name}.smooth", spec.smoothing)

    def __call__(self, t, ctx):
        for block in self.blocks:
            t = block(t, ctx)
        ctx.tap(f"{self.name}.out", t)
        if self.smooth is not None:
            t = self.smooth(t, ctx)
        if self.downsample:
            t = T.avg_pool2d(t, 2, stride=2)
        return t

    def params(self):
        return [p for b in self.blocks for p in b.params()]

    def buffers(self):
        return [b for blk in self.blocks for b in blk.buffers()]


class PoolHead:
    _REDUCE = {"gap": T.spatial_mean, "gmaxp": T.spatial_max, "gmedp": T.spatial_median}

    def __init__(self, kind, channels, classes, seed):
        self.kind = kind
        self.fc = Linear("head.fc", channels, classes, stream(seed, "init", "head.fc"))

    def __call__(self, t, ctx):
        return self.fc(self._REDUCE[self.kind](t), ctx)

    def params(self):
        return self.fc.params()

    def buffers(self):
        return []


class MLPHead:
    """Flatten, hidden layer as wide as the channel count, optional dropout."""

    def __init__(self, channels, spatial, classes, dropout_rate, seed):
        din = channels * spatial * spatial
        self.din = din
        self.dropout_rate = dropout_rate
        self.fc1 = Linear("head.fc1", din, channels, stream(seed, "init", "head.fc1"))
        self.fc2 = Linear("head.fc2", channels, classes, stream(seed, "init", "head.fc2"))

    def __call__(self, t, ctx):
        t = T.reshape(t, (t.shape[0], self.din))
        t = T.relu(self.fc1(t, ctx))
        t = T.dropout(t, self.dropout_rate, train_mode=ctx.stochastic, rng=ctx.rng)
        return self.fc2(t, ctx)

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def buffers(self):
        return []


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class Model:
    def __init__(self, spec, seed):
        self.spec = spec
        self.seed = seed
        self.mode = "eval"
        self.stages = []
        c = spec.in_channels
        size = spec.image_size
        for i, st in enumerate(spec.stages):
            self.stages.append(Stage(i, c, spec, seed))
            c = st.channels
            if st.downsample:
                size = (size - 2) // 2 + 1
        if size < 1:
            raise T.ConfigError(f"image_size {spec.image_size} too small for {len(spec.stages)} stages")
        self.feature_spatial = size
        if spec.classifier == "mlp":
            self.head = MLPHead(c, size, spec.class_count, spec.mlp_dropout_rate, seed)
        else:
            self.head = PoolHead(spec.classifier, c, spec.class_count, seed)

    def set_mode(self, mode):
        if mode not in MODES:
            raise T.ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        return self

    def named_parameters(self):
        out = []
        for stage in self.stages:
            out += stage.params()
        out += self.head.params()
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        out = []
        for stage in self.stages:
            out += stage.buffers()
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward_probs(self, x, rng=None, record=None):
        """Graph-building forward pass; returns per-example probabilities."""
        t = x if isinstance(x, T.Tensor) else T.Tensor(x)
        expect = (self.spec.in_channels, self.spec.image_size, self.spec.image_size)
        if t.ndim != 4 or t.shape[1:] != expect:
            raise T.ShapeError("model.forward", t.shape, ("n",) + expect)
        ctx = _Context(self.mode, rng, record)
        for stage in self.stages:
            t = stage(t, ctx)
        logits = self.head(t, ctx)
        return T.softmax(logits)

    def predict(self, x, rng=None, record=None):
        """Tape-free forward pass; returns a (n, classes) probability array."""
        with T.no_grad():
            return self.forward_probs(x, rng=rng, record=record).data

    def forward(self, x, rng=None):
        """Single-member predictive distribution for one forward pass."""
        return PredictiveDistribution([self.predict(x, rng=rng)])


def build(spec, seed):
    """Instantiate a model with deterministic per-layer initialization."""
    return Model(spec, seed)


# ---------------------------------------------------------------------------
# spec <-> dict (the model section of config files and checkpoints)
# ---------------------------------------------------------------------------


def spec_to_dict(spec):
    sm = spec.smoothing
    placements = "all" if (sm is not None and sm.placements is None) else (
        list(spec.placements()) if sm is not None else [])
    return {
        "stage_channels": [s.channels for s in spec.stages],
        "stage_blocks": [s.blocks for s in spec.stages],
        "stage_downsample": [s.downsample for s in spec.stages],
        "class_count": spec.class_count,
        "in_channels": spec.in_channels,
        "image_size": spec.image_size,
        "classifier": spec.classifier,
        "activation": spec.activation_arrangement,
        "dropout_rate": float(spec.dropout_rate),
        "mlp_dropout_rate": float(spec.mlp_dropout_rate),
        "residual": spec.residual,
        "smoothing": {
            "enabled": sm is not None,
            "variant": sm.prob.variant if sm else "tanh_tau",
            "tau": float(sm.prob.tau) if sm else 10.0,
            "kernel": [float(v) for v in sm.kernel.k] if sm else [1.0, 1.0],
            "placements": placements if sm else "all",
            "padding": sm.padding if sm else "replicate",
        },
    }


def spec_from_dict(d):
    sm = None
    smd = d["smoothing"]
    if smd["enabled"]:
        placements = None if smd["placements"] == "all" else tuple(smd["placements"])
        sm = SmoothingSpec(
            prob=ProbConfig(smd["variant"], float(smd["tau"])),
            kernel=BlurKernel(smd["kernel"]),
            placements=placements,
            padding=smd["padding"],
        )
    stages = [
        StageSpec(c, b, down)
        for c, b, down in zip(d["stage_channels"], d["stage_blocks"], d["stage_downsample"])
    ]
    return ModelSpec(
        stages=stages,
        class_count=d["class_count"],
        in_channels=d["in_channels"],
        image_size=d["image_size"],
        classifier=d["classifier"],
        activation_arrangement=d["activation"],
        dropout_rate=float(d["dropout_rate"]),
        mlp_dropout_rate=float(d["mlp_dropout_rate"]),
        residual=d["residual"],
        smoothing=sm,
    )


def spec_from_config(cfg):
    """Resolve the model section of a run config against its dataset."""
    m = cfg["model"]
    d = {
        "stage_channels": m["stage_channels"],
        "stage_blocks": m["stage_blocks"],
        "stage_downsample": m["stage_downsample"],
        "class_count": cfg["dataset"]["classes"],
        "in_channels": cfg["dataset"]["channels"],
        "image_size": cfg["dataset"]["size"],
        "classifier": m["classifier"],
        "activation": m["activation"],
        "dropout_rate": float(m["dropout_rate"]),
        "mlp_dropout_rate": float(m["mlp_dropout_rate"]),
        "residual": m["residual"],
        "smoothing": dict(m["smoothing"]),
    }
    return spec_from_dict(d)


def model_hash(spec):
    return configfmt.config_hash(spec_to_dict(spec))


# ---------------------------------------------------------------------------
# checkpoints: magic, version byte, spec text, named tensors
# ---------------------------------------------------------------------------


def _write_blob(parts, data):
    parts.append(struct.pack("<I", len(data)))
    parts.append(data)


def save_checkpoint(path, model):
    spec_text = configfmt.dumps(spec_to_dict(model.spec)).encode()
    parts = [CHECKPOINT_MAGIC, bytes([CHECKPOINT_VERSION])]
    _write_blob(parts, spec_text)
    parts.append(struct.pack("<q", model.seed))
    entries = model.named_parameters() + [
        (name, T.Tensor(buf)) for name, buf in model.named_buffers()
    ]
    parts.append(struct.pack("<I", len(entries)))
    for name, tensor in entries:
        _write_blob(parts, name.encode())
        _write_blob(parts, T.array_to_bytes(tensor.data))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise T.ConfigError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version = buf[off]
    if version != CHECKPOINT_VERSION:
        raise T.ConfigError(f"{path}: unsupported checkpoint version {version}")
    off += 1
    (spec_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    spec_dict = configfmt.loads(buf[off:off + spec_len].decode())
    off += spec_len
    (seed,) = struct.unpack_from("<q", buf, off)
    off += 8
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + name_len].decode()
        off += name_len
        (blob_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        arr, _ = T.array_from_bytes(buf[off:off + blob_len])
        off += blob_len
        tensors[name] = arr

    model = Model(spec_from_dict(spec_dict), seed=seed)
    for name, tensor in model.named_parameters():
        if name not in tensors or tensors[name].shape != tensor.shape:
            raise T.ConfigError(f"{path}: checkpoint missing or mismatched tensor {name!r}")
        tensor.data = tensors[name]
    for name, bufarr in model.named_buffers():
        if name not in tensors or tensors[name].shape != bufarr.shape:
            raise T.ConfigError(f"{path}: checkpoint missing or mismatched buffer {name!r}")
        bufarr[...] = tensors[name]
    return model
