"""Probabilistic spatial smoothing: Prob, Blur, and their composition.

Prob squashes a real-valued feature map into unnormalized per-point
probabilities; Blur averages neighboring probabilities with a normalized
separable kernel applied depth-wise. Smooth = Blur after Prob. All three
are differentiable and parameter-free.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T

PROB_VARIANTS = ("tanh_tau", "relu6", "constant_scale")
PAD_MODES = ("replicate", "zero")


class BlurKernel:
    """Separable blur kernel built from a 1-D positive coefficient vector.

    The 2-D kernel is the outer product of the coefficients normalized by
    the squared L1 norm, so its entries always sum to one. A length-1
    vector yields the identity.
    """

    def __init__(self, k=(1.0, 1.0)):
        k = np.asarray(k, dtype=np.float64)
        if k.ndim != 1 or k.size == 0:
            raise T.ConfigError(f"blur kernel must be a non-empty 1-D vector, got shape {k.shape}")
        if np.any(k <= 0):
            raise T.ConfigError(f"blur kernel coefficients must be positive, got {k.tolist()}")
        self.k = k
        self.matrix = np.outer(k, k) / np.sum(k) ** 2

    @property
    def size(self):
        return self.k.size

    def __repr__(self):
        return f"BlurKernel({self.k.tolist()})"

    def __eq__(self, other):
        return isinstance(other, BlurKernel) and np.array_equal(self.k, other.k)


@dataclass(frozen=True)
class ProbConfig:
    """Which squashing map turns feature values into probabilities."""

    variant: str = "tanh_tau"
    tau: float = 10.0

    def __post_init__(self):
        if self.variant not in PROB_VARIANTS:
            raise T.ConfigError(
                f"unknown prob variant {self.variant!r}; expected one of {PROB_VARIANTS}"
            )
        # relu6 has a built-in bound of 6 and ignores the temperature
        if self.variant != "relu6" and not self.tau > 0:
            raise T.ConfigError(f"temperature must be positive, got {self.tau}")

    @property
    def upper_bound(self):
        """Least upper bound of the output, or None if unbounded."""
        if self.variant == "tanh_tau":
            return self.tau
        if self.variant == "relu6":
            return 6.0
        return None


def tanh_tau(z, tau):
    """Temperature-scaled tanh: tau * tanh(z / tau).

    Bounded by tau in magnitude; the derivative at zero is 1 regardless
    of the temperature.
    """
    if not tau > 0:
        raise T.ConfigError(f"temperature must be positive, got {tau}")
    return T.scale(T.tanh(T.scale(z, 1.0 / tau)), tau)


def prob(z, cfg):
    """Map feature values to probabilities in [0, upper_bound]."""
    if cfg.variant == "tanh_tau":
        return T.relu(tanh_tau(z, cfg.tau))
    if cfg.variant == "relu6":
        return T.relu(T.clamp_max(z, 6.0))
    return T.relu(T.scale(z, 1.0 / cfg.tau))


def blur(p, kernel, padding="replicate"):
    """Depth-wise convolution with the normalized kernel, shape preserved.

    Stride is 1. The input is edge-padded (or zero-padded) so spatial
    dimensions survive: a size-2 kernel pads the right/bottom edge only,
    odd sizes pad symmetrically.
    """
    if padding not in PAD_MODES:
        raise T.ConfigError(f"unknown blur padding {padding!r}; expected one of {PAD_MODES}")
    m = kernel.size
    if m == 1:
        return p
    before, after = (m - 1) // 2, m // 2
    mode = "replicate" if padding == "replicate" else "zero"
    padded = T.pad2d(p, (before, after, before, after), mode=mode)
    return T.depthwise_conv2d(padded, kernel.matrix)


def smooth(z, cfg, kernel, padding="replicate"):
    """Blur of Prob: spatially ensemble neighboring feature probabilities."""
    return blur(prob(z, cfg), kernel, padding=padding)


def kernel_frequency_response(kernel, n=64):
    """Magnitude of the kernel's 2-D frequency response on an n-by-n grid.

    Entry (i, j) is |H| at angular frequency (2*pi*i/n, 2*pi*j/n) per pixel.
    """
    return np.abs(np.fft.fft2(kernel.matrix, s=(n, n)))
