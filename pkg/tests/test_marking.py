"""Tests for watermark embedding: gradients, projections, stealth metrics."""

import math

import numpy as np
import pytest
import torch
from torch import nn

from featuremark import marking
from featuremark.datasets import LabeledImageDataset, select_marking_targets
from featuremark.errors import EmbeddingError
from featuremark.secret import EmbedParams
from featuremark.stats import CarrierSet, generate_carriers


def flatten_features(batch: torch.Tensor) -> torch.Tensor:
    return batch.reshape(batch.shape[0], -1)


class TinySmoothNet(nn.Module):
    """Small tanh convnet: smooth everywhere, safe for finite differences."""

    def __init__(self, seed=0, dtype=torch.float64):
        super().__init__()
        torch.manual_seed(seed)
        self.conv1 = nn.Conv2d(3, 4, 3, padding=1).to(dtype)
        self.conv2 = nn.Conv2d(4, 8, 3, padding=1).to(dtype)

    def forward(self, x):
        h = torch.tanh(self.conv1(x))
        h = torch.tanh(self.conv2(h))
        return h.mean(dim=(2, 3))


def unit_rows(rng, m, d):
    v = rng.standard_normal((m, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestEmbedMark:
    def test_zero_steps_is_identity(self):
        rng = np.random.default_rng(0)
        x = (rng.integers(0, 256, size=(3, 8, 8)) / 255.0).astype(np.float32)
        carriers = generate_carriers(2, 3 * 8 * 8, seed=1)
        out = marking.embed_mark(x, 0, carriers, flatten_features, EmbedParams(steps=0))
        assert np.array_equal(out, x)

    def test_identity_extractor_single_step_moves_along_carrier(self):
        # gradient of -(xt - x)^T u is -u, so one unclipped step adds
        # step_size * u exactly when both penalties are off
        rng = np.random.default_rng(1)
        x = np.full((3, 4, 4), 0.5, dtype=np.float64)
        d = x.size
        carriers = CarrierSet(unit_rows(rng, 1, d), seed=0)
        params = EmbedParams(
            steps=1, step_size=1e-3, lambda_pixel=0.0, lambda_feature=0.0,
            quantize_8bit=False,
        )
        out = marking.embed_mark(x, 0, carriers, flatten_features, params)
        diff = (out - x).reshape(-1)
        expected = params.step_size * carriers.vectors[0].astype(np.float64)
        assert np.allclose(diff, expected, atol=1e-9)
        cos = diff @ expected / (np.linalg.norm(diff) * np.linalg.norm(expected))
        assert cos == pytest.approx(1.0, abs=1e-9)

    def test_output_stays_in_unit_interval(self):
        rng = np.random.default_rng(2)
        x = (rng.integers(0, 256, size=(4, 3, 8, 8)) / 255.0).astype(np.float32)
        carriers = generate_carriers(4, 8, seed=3)
        net = TinySmoothNet(dtype=torch.float32)
        params = EmbedParams(steps=25, step_size=0.05, quantize_8bit=False)
        out = marking.embed_batch(x, np.arange(4), carriers, net, params)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_linf_budget_respected_with_quantization(self):
        rng = np.random.default_rng(3)
        x = (rng.integers(0, 256, size=(2, 3, 8, 8)) / 255.0).astype(np.float32)
        carriers = generate_carriers(2, 8, seed=4)
        net = TinySmoothNet(dtype=torch.float32)
        budget = 4 / 255
        params = EmbedParams(steps=30, step_size=0.05, linf_budget=budget)
        out = marking.embed_batch(x, np.arange(2), carriers, net, params)
        half_step = 0.5 / 255
        assert np.abs(out - x).max() <= budget + half_step + 1e-7

    def test_quantization_snaps_to_grid(self):
        rng = np.random.default_rng(4)
        x = (rng.integers(0, 256, size=(1, 3, 8, 8)) / 255.0).astype(np.float32)
        carriers = generate_carriers(1, 8, seed=5)
        net = TinySmoothNet(dtype=torch.float32)
        out = marking.embed_batch(
            x, np.zeros(1, dtype=int), carriers, net, EmbedParams(steps=5, step_size=0.02)
        )
        assert np.array_equal(out, np.round(out * 255.0) / 255.0)

    def test_feature_dim_mismatch(self):
        x = np.full((3, 8, 8), 0.5, dtype=np.float32)
        carriers = generate_carriers(1, 16, seed=0)  # net emits 8 dims
        net = TinySmoothNet(dtype=torch.float32)
        with pytest.raises(EmbeddingError, match="dim"):
            marking.embed_mark(x, 0, carriers, net, EmbedParams(steps=1))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        xs = (rng.integers(0, 256, size=(3, 3, 8, 8)) / 255.0).astype(np.float32)
        carriers = generate_carriers(3, 8, seed=6)
        net = TinySmoothNet(dtype=torch.float32)
        params = EmbedParams(steps=10, step_size=0.02)
        batched = marking.embed_batch(xs, np.arange(3), carriers, net, params)
        for i in range(3):
            single = marking.embed_mark(xs[i], i, carriers, net, params)
            assert np.allclose(batched[i], single, atol=1e-5)

    def test_augment_hook_defaults_to_identity(self):
        rng = np.random.default_rng(6)
        x = (rng.integers(0, 256, size=(3, 8, 8)) / 255.0).astype(np.float32)
        carriers = generate_carriers(1, 8, seed=7)
        net = TinySmoothNet(dtype=torch.float32)
        params = EmbedParams(steps=5, step_size=0.02)
        plain = marking.embed_mark(x, 0, carriers, net, params)
        with_id = marking.embed_mark(x, 0, carriers, net, params, augment=lambda t: t)
        assert np.array_equal(plain, with_id)


class TestGradientCorrectness:
    def test_analytic_matches_central_differences(self):
        # ten random (image, carrier) pairs against a tiny smooth extractor
        net = TinySmoothNet(seed=3)
        params = EmbedParams(lambda_pixel=0.05, lambda_feature=0.05)
        rng = np.random.default_rng(7)
        h = 1e-5
        for case in range(10):
            x0_np = rng.uniform(0.2, 0.8, size=(1, 3, 6, 6))
            xt_np = np.clip(x0_np + rng.normal(0, 0.02, size=x0_np.shape), 0.05, 0.95)
            u = unit_rows(rng, 1, 8)
            x0 = torch.tensor(x0_np, dtype=torch.float64)
            u_t = torch.tensor(u, dtype=torch.float64)
            with torch.no_grad():
                f0 = net(x0)

            def objective(arr):
                xt = torch.tensor(arr, dtype=torch.float64, requires_grad=False)
                return float(
                    marking.embedding_objective(xt, x0, f0, u_t, net, params).sum()
                )

            xt = torch.tensor(xt_np, dtype=torch.float64, requires_grad=True)
            loss = marking.embedding_objective(xt, x0, f0, u_t, net, params).sum()
            (grad,) = torch.autograd.grad(loss, xt)
            analytic = grad.numpy().reshape(-1)
            numeric = np.empty_like(analytic)
            flat = xt_np.reshape(-1)
            for i in range(flat.size):
                bump = np.zeros_like(flat)
                bump[i] = h
                numeric[i] = (
                    objective((flat + bump).reshape(xt_np.shape))
                    - objective((flat - bump).reshape(xt_np.shape))
                ) / (2 * h)
            rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
            assert rel <= 1e-3, f"case {case}: relative error {rel}"

    def test_objective_nonincreasing_with_small_steps(self):
        # use a feature gain so the carrier gradient dominates the penalty
        # slope at the start point; otherwise x itself is a local minimum
        base = TinySmoothNet(seed=5)
        net = lambda x: 20.0 * base(x)
        rng = np.random.default_rng(8)
        x = rng.uniform(0.3, 0.7, size=(2, 3, 6, 6))
        carriers = CarrierSet(unit_rows(rng, 2, 8).astype(np.float32), seed=0)
        params = EmbedParams(steps=1, step_size=1e-3, quantize_8bit=False)
        x0 = torch.tensor(x, dtype=torch.float64)
        u = torch.tensor(carriers.vectors, dtype=torch.float64)
        with torch.no_grad():
            f0 = net(x0)
        xt = x0.clone()
        values = []
        for _ in range(40):
            xt = xt.detach().requires_grad_(True)
            loss = marking.embedding_objective(xt, x0, f0, u, net, params)
            total = loss.sum()
            values.append(float(total.detach()))
            (grad,) = torch.autograd.grad(total, xt)
            with torch.no_grad():
                xt = xt - params.step_size * grad
        assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))


class TestMarkDataset:
    def _dataset(self, classes=3, per_class=6, side=8, seed=0):
        rng = np.random.default_rng(seed)
        n = classes * per_class
        images = (rng.integers(0, 256, size=(n, 3, side, side)) / 255.0).astype(np.float32)
        labels = np.repeat(np.arange(classes), per_class)
        return LabeledImageDataset(
            images, labels, tuple(f"c{i}" for i in range(classes)), "train", "toy"
        )

    def test_only_selected_samples_change(self):
        ds = self._dataset()
        sel = select_marking_targets(ds, 0.5, seed=1)
        carriers = generate_carriers(3, 8, seed=2)
        net = TinySmoothNet(dtype=torch.float32)
        marked, secret = marking.mark_dataset(
            ds, sel, carriers, net,
            EmbedParams(steps=20, step_size=0.3, quantize_8bit=False),
        )
        marked_idx = {i for _, i in sel.pairs()}
        changed = {
            i for i in range(len(ds)) if not np.array_equal(marked.images[i], ds.images[i])
        }
        assert changed <= marked_idx
        assert len(changed) == len(marked_idx)  # embedding actually moved them
        assert np.array_equal(marked.labels, ds.labels)
        assert set(secret.clean_originals) == {(c, i) for c, i in sel.pairs()}
        for (c, i), img in secret.clean_originals.items():
            assert np.array_equal(img, ds.images[i])

    def test_empty_selection_returns_equal_dataset(self):
        from featuremark.datasets import MarkingSelection

        ds = self._dataset()
        sel = MarkingSelection(0.5, {}, seed=0)
        carriers = generate_carriers(3, 8, seed=2)
        net = TinySmoothNet(dtype=torch.float32)
        marked, secret = marking.mark_dataset(ds, sel, carriers, net, EmbedParams(steps=5))
        assert np.array_equal(marked.images, ds.images)
        assert secret.clean_originals == {}

    def test_deterministic(self):
        ds = self._dataset()
        sel = select_marking_targets(ds, 0.4, seed=3)
        carriers = generate_carriers(3, 8, seed=2)
        net = TinySmoothNet(dtype=torch.float32)
        params = EmbedParams(steps=8, step_size=0.03)
        a, _ = marking.mark_dataset(ds, sel, carriers, net, params)
        b, _ = marking.mark_dataset(ds, sel, carriers, net, params)
        assert np.array_equal(a.images, b.images)

    def test_selection_label_mismatch_rejected(self):
        from featuremark.datasets import MarkingSelection

        ds = self._dataset()
        sel = MarkingSelection(0.5, {0: (17,)}, seed=0)  # index 17 is class 2
        carriers = generate_carriers(3, 8, seed=2)
        net = TinySmoothNet(dtype=torch.float32)
        with pytest.raises(ValueError, match="labels it"):
            marking.mark_dataset(ds, sel, carriers, net, EmbedParams(steps=1))


class TestStealthMetrics:
    def test_identical_images(self):
        x = np.random.default_rng(0).random((4, 3, 8, 8))
        report = marking.stealth_metrics(x, x)
        assert report.psnr_db == math.inf
        assert report.l2_pixel == 0.0
        assert report.linf_pixel == 0.0

    def test_single_pixel_change(self):
        clean = np.zeros((1, 3, 32, 32))
        marked = clean.copy()
        marked[0, 0, 0, 0] = 1.0
        report = marking.stealth_metrics(clean, marked)
        assert report.linf_pixel == 1.0
        assert report.l2_pixel == pytest.approx(1.0)
        assert report.psnr_db == pytest.approx(10 * math.log10(3072), abs=1e-9)

    def test_uniform_shift(self):
        clean = np.full((2, 3, 32, 32), 0.3)
        marked = clean + 8 / 255
        report = marking.stealth_metrics(clean, marked)
        assert report.linf_pixel == pytest.approx(8 / 255)
        assert report.psnr_db == pytest.approx(20 * math.log10(255 / 8), abs=1e-9)

    def test_mixed_identical_and_changed_stays_finite(self):
        clean = np.zeros((2, 1, 4, 4))
        marked = clean.copy()
        marked[1, 0, 0, 0] = 0.5
        report = marking.stealth_metrics(clean, marked)
        assert math.isfinite(report.psnr_db)
        assert report.per_sample[0][0] == math.inf

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            marking.stealth_metrics(np.zeros((2, 1, 4, 4)), np.zeros((3, 1, 4, 4)))
