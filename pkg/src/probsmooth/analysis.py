"""Numerical probes for the ensemble behavior of smoothing layers.

Covers feature-map variance tracing, Fourier analysis of features,
band-limited input noise, the neighboring-output covariance identity for
size-3 convolutions, per-minibatch Hessian max-eigenvalue spectra via
power iteration, and the 1/N scaling of ensemble loss variance.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import augment
from .ensembling import mc_predict
from .metrics import nll
from .rng import derive, stream

POWER_TOL = 1e-6
POWER_MAX_ITER = 100


def ols_slope(xs, ys):
    """Ordinary least squares slope of ys against xs."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xc = xs - xs.mean()
    return float((xc * (ys - ys.mean())).sum() / (xc * xc).sum())


# ---------------------------------------------------------------------------
# feature-map variance tracing
# ---------------------------------------------------------------------------


@dataclass
class VarianceTrace:
    """Per-tap uncertainty: across stochastic runs and across space."""

    entries: list = field(default_factory=list)  # (layer, model_unc, data_unc)

    def by_layer(self):
        return {name: (m, d) for name, m, d in self.entries}

    def to_csv(self, path):
        lines = ["layer,model_uncertainty,data_uncertainty"]
        for name, m, d in self.entries:
            lines.append(f"{name},{repr(float(m))},{repr(float(d))}")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def trace_feature_variance(model, x, n, seed):
    """Record model and data uncertainty at stage ends and smooth layers.

    Model uncertainty: per-position standard deviation across n stochastic
    forwards, averaged over all positions. Data uncertainty: spatial
    standard deviation per channel within one forward, averaged over
    channels, runs, and examples.
    """
    if n < 1:
        raise T.ConfigError(f"trace needs n >= 1, got {n}")
    prev_mode = model.mode
    model.set_mode("mc_eval")
    try:
        runs = []
        for i in range(n):
            record = []
            model.predict(x, rng=stream(seed, "trace", i), record=record)
            runs.append(record)
    finally:
        model.set_mode(prev_mode)
    names = [name for name, _ in runs[0]]
    trace = VarianceTrace()
    for pos, name in enumerate(names):
        stack = np.stack([run[pos][1] for run in runs])  # (n, batch, c, h, w)
        model_unc = stack.std(axis=0).mean()
        data_unc = stack.std(axis=(3, 4)).mean()
        trace.entries.append((name, float(model_unc), float(data_unc)))
    return trace


# ---------------------------------------------------------------------------
# Fourier analysis and band-limited noise
# ---------------------------------------------------------------------------


def _require_square(x, op):
    h, w = x.shape[-2], x.shape[-1]
    if h != w:
        raise T.ShapeError(op, x.shape)
    return h


def fft2(feature):
    """2-D discrete Fourier transform over the trailing square axes."""
    feature = np.asarray(feature)
    _require_square(feature, "fft2")
    return np.fft.fft2(feature)


def ifft2(grid):
    grid = np.asarray(grid)
    _require_square(grid, "ifft2")
    return np.fft.ifft2(grid)


def diagonal_log_amplitude(fft_grid):
    """Log mean amplitude along the spectrum diagonal, DC to high frequency.

    Channel/batch axes (leading) are averaged in amplitude before the log;
    entry d corresponds to per-axis frequency 2*pi*d/n.
    """
    grid = np.asarray(fft_grid)
    n = _require_square(grid, "diagonal_log_amplitude")
    amp = np.abs(grid)
    while amp.ndim > 2:
        amp = amp.mean(axis=0)
    shifted = np.fft.fftshift(amp)
    center = n // 2
    diag = np.array([shifted[center + d, center + d] for d in range(n - center)])
    return np.log(np.maximum(diag, T.PROB_CLAMP))


def frequency_mask(n, f, w):
    """Centered boolean annulus selecting radial frequencies in [f-w/2, f+w/2].

    Frequencies are in radians/pixel; each axis spans [-pi, pi).
    """
    if w <= 0:
        raise T.ConfigError(f"mask width must be positive, got {w}")
    k = np.arange(n) - n // 2
    omega = 2.0 * np.pi * k / n
    rr = np.sqrt(omega[:, None] ** 2 + omega[None, :] ** 2)
    return (rr >= f - w / 2) & (rr <= f + w / 2)


def frequency_noise(x0, f, w, magnitude, seed):
    """Add band-limited Gaussian noise of a fixed per-image L2 magnitude.

    The noise is masked in the frequency domain, brought back with the real
    part of the inverse transform, and rescaled so the added component has
    L2 norm ``magnitude`` per image. Values are intentionally not re-clipped
    so the perturbation stays inside the band.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 4:
        raise T.ShapeError("frequency_noise", x0.shape)
    if magnitude == 0.0:
        return x0.copy()
    n = _require_square(x0, "frequency_noise")
    mask = frequency_mask(n, f, w)
    if not mask.any():
        raise T.ConfigError(f"frequency mask is empty for f={f}, w={w}, n={n}")
    unshifted = np.fft.ifftshift(mask)
    rng = stream(seed, "freq-noise")
    delta = rng.standard_normal(x0.shape)
    band = np.fft.ifft2(np.fft.fft2(delta) * unshifted).real
    norms = np.sqrt((band ** 2).sum(axis=(1, 2, 3), keepdims=True))
    return x0 + band * (magnitude / norms)


# ---------------------------------------------------------------------------
# neighboring-output covariance of a size-3 convolution on white noise
# ---------------------------------------------------------------------------


def neighbor_covariance_check(kernel_weights, input_variance, samples, seed):
    """Empirical vs analytic covariance of two adjacent conv outputs.

    For y = w * x with a size-3 kernel and white-noise x, adjacent outputs
    covary as w1*w2*var + w2*w3*var. Returns (empirical, analytic, stderr).
    """
    w = np.asarray(kernel_weights, dtype=np.float64)
    if w.shape != (3,):
        raise T.ShapeError("neighbor_covariance_check", w.shape, (3,))
    if samples < 2:
        raise T.ConfigError("need at least 2 samples")
    rng = stream(seed, "neighbor-cov")
    x = rng.normal(0.0, np.sqrt(input_variance), size=(samples, 4))
    y1 = x[:, 0:3] @ w
    y2 = x[:, 1:4] @ w
    d1 = y1 - y1.mean()
    d2 = y2 - y2.mean()
    products = d1 * d2
    empirical = products.sum() / (samples - 1)
    stderr = products.std(ddof=1) / np.sqrt(samples)
    analytic = (w[0] * w[1] + w[1] * w[2]) * input_variance
    return float(empirical), float(analytic), float(stderr)


# ---------------------------------------------------------------------------
# Hessian max-eigenvalue spectrum
# ---------------------------------------------------------------------------


@dataclass
class SpectrumReport:
    rows: list = field(default_factory=list)  # (batch_index, rank, eigenvalue, converged)
    metadata: dict = field(default_factory=dict)

    def eigenvalues(self, rank=None):
        return np.array([lam for _, r, lam, _ in self.rows if rank is None or r == rank])

    def to_csv(self, path):
        lines = ["minibatch,rank,eigenvalue,converged"]
        for batch, rank, lam, conv in self.rows:
            lines.append(f"{batch},{rank},{repr(float(lam))},{int(conv)}")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def _flatten(vs):
    return np.concatenate([v.ravel() for v in vs])


def _unflatten(flat, shapes):
    out, off = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(flat[off:off + size].reshape(shape))
        off += size
    return out


def _dominant(hvp_fn, dim, found_vecs, rng, tol, max_iter, shift):
    """Power iteration for the dominant eigenpair of P (H + shift I) P."""
    v = rng.standard_normal(dim)
    for basis in found_vecs:
        v -= (basis @ v) * basis
    v /= np.linalg.norm(v)
    lam = 0.0
    converged = False
    for _ in range(max_iter):
        hv = hvp_fn(v) + shift * v
        for basis in found_vecs:
            hv -= (basis @ hv) * basis
        lam = float(v @ hv)
        if np.linalg.norm(hv - lam * v) <= tol * max(abs(lam), 1.0):
            converged = True
            break
        norm = np.linalg.norm(hv)
        if norm == 0.0:
            lam = 0.0
            converged = True
            break
        v = hv / norm
    return lam, v, converged


def power_iteration(hvp_fn, dim, k, seed, tol=POWER_TOL, max_iter=POWER_MAX_ITER):
    """Top-k (largest, signed) eigenvalues of an implicit symmetric operator.

    Deflation projects every iterate onto the orthogonal complement of the
    eigenvectors found so far. Plain iteration converges to the dominant
    magnitude; when that is negative, a second pass on the spectrally
    shifted operator recovers the largest signed eigenvalue. The stop rule
    bounds the residual |Hv - lam v| by tol, which implies the eigenvalue
    change itself is below tol. Returns (eigenvalue, converged) pairs in
    extraction order.
    """
    if k < 1:
        raise T.ConfigError(f"power iteration needs k >= 1, got {k}")
    if k > dim:
        raise T.ConfigError(f"cannot extract {k} eigenvalues from a {dim}-dim operator")
    found_vecs = []
    results = []
    for rank in range(k):
        rng = stream(seed, "power", rank)
        lam, vec, conv = _dominant(hvp_fn, dim, found_vecs, rng, tol, max_iter, shift=0.0)
        if lam < 0.0:
            # negative dominance: shift the spectrum nonnegative and redo
            sigma = 1.5 * abs(lam)
            rng = stream(seed, "power", rank, "shifted")
            lam_s, vec, conv_s = _dominant(hvp_fn, dim, found_vecs, rng, tol,
                                           max_iter, shift=sigma)
            lam = lam_s - sigma
            conv = conv and conv_s
        found_vecs.append(vec)
        results.append((lam, conv))
    return results


def regularized_loss(model, images, labels, l2_coeff, mask_rng_factory=None):
    """Training-style objective: NLL plus l2 penalty over every parameter."""
    rng = mask_rng_factory() if mask_rng_factory is not None else None
    loss = T.nll_loss(model.forward_probs(images, rng=rng), labels)
    if l2_coeff:
        penalty = None
        for p in model.parameters():
            term = T.tsum(T.mul(p, p))
            penalty = term if penalty is None else T.add(penalty, term)
        loss = T.add(loss, T.scale(penalty, l2_coeff))
    return loss


def hessian_max_spectrum(model, dataset, batch_size, k, augment_pad, l2_coeff, seed):
    """Top-k Hessian eigenvalues of the regularized loss per minibatch.

    Each minibatch is augmented once, its dropout masks are frozen by
    reseeding per loss evaluation, and batch norm runs on its inference
    statistics, so the per-minibatch loss is a fixed smooth function of the
    weights. Non-converged eigenvalues are flagged, never dropped.
    """
    if k < 1 or batch_size < 1:
        raise T.ConfigError("hessian spectrum needs k >= 1 and batch_size >= 1")
    prev_mode = model.mode
    model.set_mode("mc_eval")
    weights = model.parameters()
    shapes = [w.shape for w in weights]
    report = SpectrumReport(metadata={
        "k": k, "batch_size": batch_size, "l2_coeff": l2_coeff,
        "augment_pad": augment_pad, "seed": seed, "loss": "nll+l2",
    })
    try:
        count = len(dataset) // batch_size
        if count < 1:
            raise T.ConfigError(
                f"dataset of {len(dataset)} examples is smaller than one minibatch"
            )
        for b in range(count):
            sl = slice(b * batch_size, (b + 1) * batch_size)
            images = augment(dataset.images[sl], augment_pad,
                             stream(seed, "hessian-augment", b))
            labels = dataset.labels[sl]

            def loss_fn(images=images, labels=labels, b=b):
                return regularized_loss(
                    model, images, labels, l2_coeff,
                    mask_rng_factory=lambda: stream(seed, "hessian-mask", b),
                )

            def hvp_flat(vflat):
                out = T.hvp(loss_fn, weights, _unflatten(vflat, shapes))
                return _flatten(out)

            eigs = power_iteration(hvp_flat, sum(int(np.prod(s)) for s in shapes),
                                   k, derive(seed, "hessian-power", b))
            for rank, (lam, conv) in enumerate(
                    sorted(eigs, key=lambda e: -e[0])):
                report.rows.append((b, rank + 1, lam, conv))
    finally:
        model.set_mode(prev_mode)
    return report


# ---------------------------------------------------------------------------
# ensemble-size scaling of the loss variance
# ---------------------------------------------------------------------------


def loss_variance_vs_n(model, dataset, n_list, trials, seed):
    """Variance over trials of the N-member ensemble NLL, per N."""
    if trials < 2:
        raise T.ConfigError("need at least 2 trials")
    prev_mode = model.mode
    model.set_mode("mc_eval")
    try:
        table = []
        for n in n_list:
            losses = []
            for t in range(trials):
                pd = mc_predict(model, dataset.images, n,
                                seed=derive(seed, "loss-variance", n, t))
                losses.append(nll(pd, dataset.labels))
            table.append((int(n), float(np.var(losses))))
    finally:
        model.set_mode(prev_mode)
    return table


def loss_variance_table_to_csv(table, path):
    lines = ["ensemble_size,loss_variance"]
    for n, var in table:
        lines.append(f"{n},{repr(float(var))}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
