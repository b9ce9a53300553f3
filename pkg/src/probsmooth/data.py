"""Datasets: binary loaders, synthetic shapes, augmentation, corruption.

Images are float64 (n, c, h, w) batches in [0, 1]; labels are integer
vectors. Every generator is a pure function of its inputs and seed.
"""

from dataclasses import dataclass

import numpy as np

from .rng import stream
from .tensor import ConfigError

IDX_UBYTE = 0x08

CORRUPTION_TYPES = ("gaussian_noise", "impulse_noise", "gaussian_blur", "brightness", "contrast")

# severity ladders, index 0 = severity 1
_SEVERITY = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),  # additive sigma
    "impulse_noise": (0.01, 0.02, 0.04, 0.06, 0.09),  # per-pixel flip probability
    "gaussian_blur": (0.4, 0.6, 0.8, 1.0, 1.3),  # blur sigma in pixels
    "brightness": (0.05, 0.10, 0.15, 0.20, 0.25),  # additive shift
    "contrast": (0.85, 0.75, 0.60, 0.45, 0.30),  # scale toward the image mean
}


class ParseError(ValueError):
    """Malformed dataset file; message carries the byte offset."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path} at byte {offset}: {message}")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError(
                f"dataset needs (n, c, h, w) images and matching labels, "
                f"got {self.images.shape} and {self.labels.shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigError(f"labels must lie in [0, {self.class_count})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("image values must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, index):
        return Dataset(self.images[index], self.labels[index], self.class_count, self.split)


# ---------------------------------------------------------------------------
# IDX files (big-endian magic + dims, ubyte payload)
# ---------------------------------------------------------------------------


def _read_idx_array(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise ParseError(path, 0, "file shorter than the 4-byte magic")
    if buf[0] != 0 or buf[1] != 0:
        raise ParseError(path, 0, f"bad magic prefix {buf[:2].hex()}")
    if buf[2] != IDX_UBYTE:
        raise ParseError(path, 2, f"unsupported dtype byte 0x{buf[2]:02x} (only ubyte 0x08)")
    ndim = buf[3]
    header_len = 4 + 4 * ndim
    if len(buf) < header_len:
        raise ParseError(path, len(buf), f"truncated header, expected {header_len} bytes")
    dims = [int.from_bytes(buf[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    count = int(np.prod(dims)) if ndim else 1
    if len(buf) != header_len + count:
        raise ParseError(
            path, len(buf),
            f"expected {header_len + count} bytes for dims {dims}, found {len(buf)}",
        )
    return np.frombuffer(buf, dtype=np.uint8, offset=header_len).reshape(dims)


def _write_idx_array(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, IDX_UBYTE, array.ndim])
    header += b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx(images_path, labels_path, class_count=None, split="train"):
    """Decode an IDX image file plus its IDX label vector."""
    raw = _read_idx_array(images_path)
    if raw.ndim == 3:
        raw = raw[:, None, :, :]
    elif raw.ndim != 4:
        raise ParseError(images_path, 3, f"images need 3 or 4 dims, got {raw.ndim}")
    labels = _read_idx_array(labels_path)
    if labels.ndim != 1:
        raise ParseError(labels_path, 3, f"labels need 1 dim, got {labels.ndim}")
    if labels.shape[0] != raw.shape[0]:
        raise ParseError(labels_path, 4, f"{labels.shape[0]} labels for {raw.shape[0]} images")
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return Dataset(raw.astype(np.float64) / 255.0, labels.astype(np.int64), class_count, split)


def save_idx(dataset, images_path, labels_path):
    """Quantize to bytes and write the IDX pair (single-channel drops its axis)."""
    img = np.round(np.clip(dataset.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.shape[1] == 1:
        img = img[:, 0]
    _write_idx_array(images_path, img)
    _write_idx_array(labels_path, dataset.labels.astype(np.uint8))


# ---------------------------------------------------------------------------
# CIFAR-style binary records (label byte(s) + 3072 planar pixel bytes)
# ---------------------------------------------------------------------------


def load_cifar_binary(path, class_count=10, split="train"):
    if class_count not in (10, 100):
        raise ConfigError(f"cifar class_count must be 10 or 100, got {class_count}")
    label_bytes = 1 if class_count == 10 else 2  # coarse + fine for 100 classes
    record = label_bytes + 3072
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf or len(buf) % record:
        raise ParseError(path, len(buf),
                         f"expected whole {record}-byte records, found {len(buf)} bytes")
    n = len(buf) // record
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)  # fine label is last
    images = raw[:, label_bytes:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, class_count, split)


def save_cifar_binary(dataset, path, coarse_labels=None):
    if dataset.images.shape[1:] != (3, 32, 32):
        raise ConfigError(f"cifar records need (3, 32, 32) images, got {dataset.images.shape[1:]}")
    img = np.round(np.clip(dataset.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    out = bytearray()
    for i in range(len(dataset)):
        if dataset.class_count == 100:
            coarse = 0 if coarse_labels is None else int(coarse_labels[i])
            out.append(coarse)
        out.append(int(dataset.labels[i]))
        out += img[i].tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


# ---------------------------------------------------------------------------
# synthetic shape classes
# ---------------------------------------------------------------------------


def _draw_shape(canvas, cls, rng):
    """Draw one of six shape families with pose jitter, in place.

    The first four families are mutually easy to tell apart so small
    models separate a 4-class set quickly; disk and ring (classes 4, 5)
    deliberately resemble the square and each other less strongly.
    """
    size = canvas.shape[0]
    cx = size / 2 + rng.uniform(-size / 10, size / 10)
    cy = size / 2 + rng.uniform(-size / 10, size / 10)
    r = size * rng.uniform(0.26, 0.38)
    yy, xx = np.mgrid[0:size, 0:size]
    if cls == 0:  # filled square
        canvas[(np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)] = 1.0
    elif cls == 1:  # plus sign
        bar = max(1.0, r / 2.8)
        canvas[(np.abs(yy - cy) <= bar) & (np.abs(xx - cx) <= r)] = 1.0
        canvas[(np.abs(xx - cx) <= bar) & (np.abs(yy - cy) <= r)] = 1.0
    elif cls == 2:  # horizontal bars
        period = max(3, int(size / 4))
        canvas[(yy // (period // 2)) % 2 == 0] = 1.0
    elif cls == 3:  # diagonal stripes
        period = max(3, int(size / 4))
        canvas[((xx + yy) // (period // 2)) % 2 == 0] = 1.0
    elif cls == 4:  # filled disk
        canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1.0
    elif cls == 5:  # ring
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        canvas[(d2 <= r * r) & (d2 >= (0.55 * r) ** 2)] = 1.0
    else:
        raise ConfigError(f"no shape family for class {cls}")


def synth_shapes(n, classes, size, seed, channels=1, split="train"):
    """Procedural class-discriminable shapes with pose/brightness jitter."""
    if size < 16:
        raise ConfigError(f"synthetic images need size >= 16, got {size}")
    if not 2 <= classes <= 6:
        raise ConfigError(f"synthetic shapes support 2..6 classes, got {classes}")
    images = np.zeros((n, channels, size, size))
    labels = np.arange(n) % classes  # uniform prior within one count
    for i in range(n):
        rng = stream(seed, "synth", split, i)
        canvas = np.zeros((size, size))
        _draw_shape(canvas, int(labels[i]), rng)
        canvas *= rng.uniform(0.6, 1.0)  # brightness jitter
        canvas += rng.normal(0.0, 0.02, canvas.shape)
        images[i] = np.clip(canvas, 0.0, 1.0)
    return Dataset(images, labels, classes, split)


# ---------------------------------------------------------------------------
# augmentation, corruption, shift sequences
# ---------------------------------------------------------------------------


def augment(images, pad, rng, flip=True):
    """Reflect-pad + random crop back to size, then 50% horizontal flips."""
    if pad < 0:
        raise ConfigError(f"augment pad must be >= 0, got {pad}")
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    if pad >= min(h, w):
        raise ConfigError(f"augment pad {pad} too large for {h}x{w} images")
    out = images
    if pad:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
        out = np.empty_like(images)
        for i in range(n):
            dy, dx = offsets[i]
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    if flip:
        coins = rng.random(n) < 0.5
        out = out.copy() if out is images else out
        out[coins] = out[coins, :, :, ::-1]
    return out


def _gaussian_blur(images, sigma):
    radius = max(1, int(np.ceil(3.0 * sigma)))
    taps = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = images
    for axis in (2, 3):
        padw = [(0, 0)] * 4
        padw[axis] = (radius, radius)
        padded = np.pad(out, padw, mode="reflect")
        acc = np.zeros_like(out)
        for j, t in enumerate(taps):
            sl = [slice(None)] * 4
            sl[axis] = slice(j, j + out.shape[axis])
            acc += t * padded[tuple(sl)]
        out = acc
    return out


def corrupt(dataset, ctype, severity, seed):
    """Apply one corruption type at a 1..5 severity; values re-clipped to [0, 1]."""
    if ctype not in CORRUPTION_TYPES:
        raise ConfigError(f"unknown corruption {ctype!r}; expected one of {CORRUPTION_TYPES}")
    if severity not in (1, 2, 3, 4, 5):
        raise ConfigError(f"severity must be 1..5, got {severity}")
    level = _SEVERITY[ctype][severity - 1]
    rng = stream(seed, "corrupt", ctype, severity)
    img = dataset.images
    if ctype == "gaussian_noise":
        img = img + rng.normal(0.0, level, img.shape)
    elif ctype == "impulse_noise":
        hit = rng.random(img.shape) < level
        salt = rng.random(img.shape) < 0.5
        img = np.where(hit, salt.astype(np.float64), img)
    elif ctype == "gaussian_blur":
        img = _gaussian_blur(img, level)
    elif ctype == "brightness":
        img = img + level
    else:  # contrast
        mean = img.mean(axis=(1, 2, 3), keepdims=True)
        img = mean + (img - mean) * level
    img = np.clip(img, 0.0, 1.0)
    return Dataset(img, dataset.labels, dataset.class_count, dataset.split)


def shift_sequence(image, steps, stride):
    """steps+1 horizontal translations of one (c, h, w) image, reflect filled."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ConfigError(f"shift_sequence expects one (c, h, w) image, got {image.shape}")
    w = image.shape[2]
    if steps * stride >= w:
        raise ConfigError(f"total shift {steps * stride} overflows width {w}")
    frames = []
    for i in range(steps + 1):
        shift = i * stride
        if shift == 0:
            frames.append(image.copy())
        else:
            padded = np.pad(image, ((0, 0), (0, 0), (shift, 0)), mode="reflect")
            frames.append(padded[:, :, :w])
    return frames
