"""Analysis probes: FFT, masks, covariance identity, power iteration."""

import numpy as np
import pytest

from probsmooth import tensor as T
from probsmooth.analysis import (
    diagonal_log_amplitude,
    fft2,
    frequency_mask,
    frequency_noise,
    hessian_max_spectrum,
    ifft2,
    loss_variance_vs_n,
    neighbor_covariance_check,
    ols_slope,
    power_iteration,
    trace_feature_variance,
)
from probsmooth.data import synth_shapes
from probsmooth.models import ModelSpec, SmoothingSpec, StageSpec, build
from probsmooth.rng import stream
from probsmooth.smoothing import BlurKernel

from oracles import dft2_naive, dense_hessian


def tiny_model(dropout=0.0, smooth=False, seed=0):
    spec = ModelSpec(
        stages=[StageSpec(4, 1, True), StageSpec(4, 1, True)],
        class_count=3,
        image_size=8,
        dropout_rate=dropout,
        smoothing=SmoothingSpec() if smooth else None,
    )
    return build(spec, seed=seed)


class TestVarianceTrace:
    def test_deterministic_model_has_zero_model_uncertainty(self):
        model = tiny_model(dropout=0.0, smooth=True)
        x = stream(1, "trace-x").random((2, 1, 8, 8))
        trace = trace_feature_variance(model, x, n=4, seed=3)
        assert trace.entries, "expected taps to be recorded"
        for name, model_unc, _ in trace.entries:
            assert model_unc == 0.0, name

    def test_constant_features_have_zero_data_uncertainty(self):
        model = tiny_model(smooth=True)
        # zeroed convs leave only per-channel biases: all maps spatially constant
        for name, p in model.named_parameters():
            if name.endswith("conv.weight"):
                p.data[...] = 0.0
        model.stages[0].smooth.smoothing.kernel = BlurKernel((1.0,))
        model.stages[1].smooth.smoothing.kernel = BlurKernel((1.0,))
        x = np.full((2, 1, 8, 8), 0.25)
        trace = trace_feature_variance(model, x, n=2, seed=3)
        for name, _, data_unc in trace.entries:
            assert abs(data_unc) < 1e-12, name

    def test_records_stage_and_smooth_taps(self):
        model = tiny_model(smooth=True)
        x = np.zeros((1, 1, 8, 8))
        trace = trace_feature_variance(model, x, n=2, seed=0)
        names = [name for name, _, _ in trace.entries]
        assert "stage0.out" in names
        assert "stage0.smooth.in" in names
        assert "stage0.smooth.out" in names

    def test_csv(self, tmp_path):
        model = tiny_model()
        trace = trace_feature_variance(model, np.zeros((1, 1, 8, 8)), n=2, seed=0)
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        assert path.read_text().splitlines()[0] == "layer,model_uncertainty,data_uncertainty"


class TestFFT:
    def test_matches_naive_dft(self):
        rng = stream(2, "fft")
        for _ in range(3):
            img = rng.standard_normal((8, 8))
            np.testing.assert_allclose(fft2(img), dft2_naive(img), atol=1e-9)

    def test_constant_map_concentrates_at_dc(self):
        grid = fft2(np.full((8, 8), 0.5))
        assert abs(grid[0, 0] - 32.0) < 1e-9
        rest = np.abs(grid).sum() - abs(grid[0, 0])
        assert rest < 1e-9

    def test_impulse_is_flat(self):
        img = np.zeros((8, 8))
        img[3, 5] = 1.0
        np.testing.assert_allclose(np.abs(fft2(img)), 1.0, atol=1e-12)

    def test_round_trip(self):
        rng = stream(2, "fft-rt")
        img = rng.standard_normal((3, 16, 16))
        np.testing.assert_allclose(ifft2(fft2(img)).real, img, atol=1e-9)

    def test_non_square_rejected(self):
        with pytest.raises(T.ShapeError):
            fft2(np.zeros((4, 6)))

    def test_diagonal_log_amplitude_shape_and_dc(self):
        img = np.full((2, 8, 8), 0.5)  # 2 channels
        diag = diagonal_log_amplitude(fft2(img))
        assert diag.shape == (4,)
        assert abs(diag[0] - np.log(32.0)) < 1e-12


class TestFrequencyNoise:
    x0 = stream(3, "noise-x").random((3, 1, 16, 16))

    def test_zero_magnitude_unchanged(self):
        out = frequency_noise(self.x0, 0.7 * np.pi, 0.2 * np.pi, 0.0, seed=1)
        np.testing.assert_array_equal(out, self.x0)

    def test_support_inside_mask(self):
        f, w = 0.7 * np.pi, 0.2 * np.pi
        out = frequency_noise(self.x0, f, w, 2.0, seed=1)
        delta = out - self.x0
        mask = frequency_mask(16, f, w)
        spec = np.fft.fftshift(np.abs(np.fft.fft2(delta)) ** 2, axes=(-2, -1))
        outside = spec[..., ~mask].sum()
        assert outside < 1e-9 * spec.sum()

    def test_magnitude_is_per_image_l2(self):
        out = frequency_noise(self.x0, 0.5 * np.pi, 0.2 * np.pi, 1.5, seed=2)
        norms = np.sqrt(((out - self.x0) ** 2).sum(axis=(1, 2, 3)))
        np.testing.assert_allclose(norms, 1.5, atol=1e-9)

    def test_empty_mask_rejected(self):
        with pytest.raises(T.ConfigError):
            frequency_noise(self.x0, 10.0, 0.01, 1.0, seed=0)

    def test_mask_is_radially_symmetric_annulus(self):
        mask = frequency_mask(32, 0.5 * np.pi, 0.2 * np.pi)
        k = np.arange(32) - 16
        omega = 2 * np.pi * k / 32
        rr = np.sqrt(omega[:, None] ** 2 + omega[None, :] ** 2)
        want = (rr >= 0.4 * np.pi) & (rr <= 0.6 * np.pi)
        np.testing.assert_array_equal(mask, want)


class TestNeighborCovariance:
    def test_disjoint_support_gives_zero(self):
        _, analytic, _ = neighbor_covariance_check((1.0, 0.0, 0.0), 1.0, 100, seed=0)
        assert analytic == 0.0

    def test_all_ones_kernel(self):
        _, analytic, _ = neighbor_covariance_check((1.0, 1.0, 1.0), 1.0, 100, seed=0)
        assert analytic == 2.0

    def test_empirical_within_three_stderr(self):
        rng = stream(4, "cov-w")
        for trial in range(3):
            w = rng.uniform(-1.0, 1.0, 3)
            emp, ana, se = neighbor_covariance_check(w, 0.7, 100_000, seed=trial)
            assert abs(emp - ana) < 3.0 * se


class TestPowerIteration:
    A = np.diag([3.0, 2.0, 1.0])
    Q = np.linalg.qr(stream(5, "rot").standard_normal((3, 3)))[0]
    H = Q @ A @ Q.T  # eigenvalues 3, 2, 1 in a rotated basis

    def test_top1_exact(self):
        (lam, conv), = power_iteration(lambda v: self.H @ v, 3, 1, seed=0)
        assert conv
        assert abs(lam - 3.0) < 1e-6

    def test_top2_deflation(self):
        out = power_iteration(lambda v: self.H @ v, 3, 2, seed=0)
        lams = sorted((lam for lam, _ in out), reverse=True)
        assert abs(lams[0] - 3.0) < 1e-5
        assert abs(lams[1] - 2.0) < 1e-5

    def test_quadratic_loss_through_hvp(self):
        w = T.Tensor(np.zeros((3, 1)), requires_grad=True)
        a = T.Tensor(self.H)

        def loss():
            return T.scale(T.tsum(T.mul(w, T.matmul(a, w))), 0.5)

        def hvp_flat(v):
            out = T.hvp(loss, [w], [v.reshape(3, 1)])
            return out[0].ravel()

        (lam, conv), = power_iteration(hvp_flat, 3, 1, seed=1)
        assert conv
        assert abs(lam - 3.0) < 1e-6

    def test_mlp_top1_matches_dense_hessian(self):
        rng = stream(6, "mlp-h")
        w1 = T.Tensor(rng.standard_normal((4, 3)) * 0.7, requires_grad=True)
        w2 = T.Tensor(rng.standard_normal((3, 2)) * 0.7, requires_grad=True)
        x = rng.standard_normal((6, 4))
        y = rng.integers(0, 2, 6)

        def loss():
            hidden = T.tanh(T.matmul(T.Tensor(x), w1))
            return T.nll_loss(T.softmax(T.matmul(hidden, w2)), y)

        def loss_flat(flat):
            a = flat[:12].reshape(4, 3)
            b = flat[12:].reshape(3, 2)
            hidden = np.tanh(x @ a)
            z = hidden @ b
            e = np.exp(z - z.max(axis=1, keepdims=True))
            p = e / e.sum(axis=1, keepdims=True)
            return float(-np.log(p[np.arange(6), y]).mean())

        flat = np.concatenate([w1.data.ravel(), w2.data.ravel()])
        dense = dense_hessian(loss_flat, flat)
        want = np.linalg.eigvalsh(dense).max()

        def hvp_flat(v):
            out = T.hvp(loss, [w1, w2], [v[:12].reshape(4, 3), v[12:].reshape(3, 2)])
            return np.concatenate([g.ravel() for g in out])

        (lam, conv), = power_iteration(hvp_flat, 18, 1, seed=2)
        assert conv
        assert abs(lam - want) / abs(want) < 1e-4


class TestHessianSpectrum:
    dataset = synth_shapes(32, 3, 16, seed=9)

    def model(self, dropout):
        spec = ModelSpec(
            stages=[StageSpec(3, 1, True), StageSpec(3, 1, True)],
            class_count=3, image_size=16, dropout_rate=dropout,
        )
        return build(spec, seed=1)

    def test_rows_sorted_and_flagged(self):
        report = hessian_max_spectrum(self.model(0.0), self.dataset, batch_size=16,
                                      k=2, augment_pad=1, l2_coeff=5e-4, seed=4)
        assert len(report.rows) == 2 * 2  # 2 minibatches, k=2
        for b in (0, 1):
            lams = [lam for bi, _, lam, _ in report.rows if bi == b]
            assert lams == sorted(lams, reverse=True)
        assert all(isinstance(conv, bool) for _, _, _, conv in report.rows)

    def test_reproducible(self):
        a = hessian_max_spectrum(self.model(0.3), self.dataset, 16, 1, 1, 5e-4, seed=4)
        b = hessian_max_spectrum(self.model(0.3), self.dataset, 16, 1, 1, 5e-4, seed=4)
        np.testing.assert_allclose(a.eigenvalues(), b.eigenvalues(), atol=1e-10)

    def test_csv(self, tmp_path):
        report = hessian_max_spectrum(self.model(0.0), self.dataset, 16, 1, 0, 0.0, seed=4)
        path = tmp_path / "spectrum.csv"
        report.to_csv(path)
        assert path.read_text().splitlines()[0] == "minibatch,rank,eigenvalue,converged"


class TestLossVariance:
    def test_deterministic_model_has_zero_variance(self):
        model = tiny_model(dropout=0.0)
        dataset = _dataset8()
        table = loss_variance_vs_n(model, dataset, [1, 2, 4], trials=5, seed=0)
        assert all(var == 0.0 for _, var in table)

    def test_variance_decreases_with_n(self):
        model = tiny_model(dropout=0.5)
        dataset = _dataset8()
        table = loss_variance_vs_n(model, dataset, [1, 4, 16], trials=60, seed=0)
        variances = [var for _, var in table]
        assert variances[0] > variances[1] > variances[2]
        slope = ols_slope(np.log([1, 4, 16]), np.log(variances))
        assert -1.4 < slope < -0.6


def _dataset8():
    from probsmooth.data import Dataset

    rng = stream(7, "lv-ds")
    return Dataset(rng.random((16, 1, 8, 8)), rng.integers(0, 3, 16), 3)
