"""Tests for per-sample adaptation and its baselines."""

import numpy as np
import pytest

from sada.adapt import adapt_one, entropy_adapt, predict_plain, tta_fused, tta_predict
from sada.config import AdaptConfig
from sada.model import snapshot_params
from sada.norm import SanConfig
from sada.pseudo_label import IGNORE, PseudoLabelMap


def _assert_same_state(net, snapshot):
    now = snapshot_params(net)
    for name, arr in snapshot.params.items():
        np.testing.assert_array_equal(now.params[name], arr, err_msg=name)
    for name, arr in snapshot.buffers.items():
        np.testing.assert_array_equal(now.buffers[name], arr, err_msg=name)


class TestPlainAndTta:
    """Predictions without updates."""

    def test_plain_shapes(self, tiny_net, image):
        """Mask and probabilities cover the image."""
        mask, probs = predict_plain(tiny_net, image, SanConfig.tbn())
        assert mask.shape == (16, 16) and mask.dtype == np.uint8
        assert probs.shape == (5, 16, 16)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)

    def test_single_view_tta_is_plain(self, tiny_net, image):
        """TTA over the original view alone equals a plain forward."""
        cfg = AdaptConfig(scales=(1.0,), use_flip=False, use_gray=False, alpha=0.3)
        mask, probs = predict_plain(tiny_net, image, cfg.norm)
        fused = tta_fused(tiny_net, image, cfg)
        assert fused.view_count == 1
        np.testing.assert_allclose(fused.probs.data, probs, atol=1e-7)
        np.testing.assert_array_equal(tta_predict(tiny_net, image, cfg), mask)

    def test_tta_view_count(self, tiny_net, image, fast_cfg):
        """Two scales with flips fuse four views."""
        assert tta_fused(tiny_net, image, fast_cfg).view_count == 4


class TestAdaptOne:
    """The fine-tune and reset loop."""

    def test_zero_iterations_is_san(self, tiny_net, image, fast_cfg):
        """Without updates the result is the SaN prediction."""
        cfg = fast_cfg.replace(n_iters=0)
        mask, report = adapt_one(tiny_net, image, cfg)
        plain_mask, plain_probs = predict_plain(tiny_net, image, cfg.norm)
        np.testing.assert_array_equal(mask, plain_mask)
        np.testing.assert_array_equal(report.probs, plain_probs)
        assert report.losses == [] and report.coverage == []

    def test_parameters_restored(self, tiny_net, image, fast_cfg):
        """Every parameter and running statistic is bitwise restored."""
        before = snapshot_params(tiny_net)
        _, report = adapt_one(tiny_net, image, fast_cfg)
        assert len(report.losses) == fast_cfg.n_iters
        _assert_same_state(tiny_net, before)

    def test_requires_grad_restored(self, tiny_net, image, fast_cfg):
        """Gradient flags are put back after the session."""
        flags = [t.requires_grad for t in tiny_net.parameters()]
        adapt_one(tiny_net, image, fast_cfg)
        assert [t.requires_grad for t in tiny_net.parameters()] == flags
        assert all(t.grad is None for t in tiny_net.parameters())

    def test_repeatable(self, tiny_net, image, fast_cfg):
        """The same image twice gives bitwise equal results."""
        a_mask, a = adapt_one(tiny_net, image, fast_cfg)
        b_mask, b = adapt_one(tiny_net, image, fast_cfg)
        np.testing.assert_array_equal(a_mask, b_mask)
        np.testing.assert_array_equal(a.probs, b.probs)
        assert a.losses == b.losses

    def test_order_independent(self, tiny_net, rng, fast_cfg):
        """Twenty images adapted in two orders give bitwise equal results."""
        images = [rng.random((3, 16, 16)).astype(np.float32) for _ in range(20)]
        forward = [adapt_one(tiny_net, x, fast_cfg) for x in images]
        order = rng.permutation(len(images))
        shuffled = {int(i): adapt_one(tiny_net, images[i], fast_cfg) for i in order}
        for i, (mask, report) in enumerate(forward):
            other_mask, other = shuffled[i]
            np.testing.assert_array_equal(mask, other_mask)
            np.testing.assert_array_equal(report.probs, other.probs)
            assert report.losses == other.losses

    def test_shared_snapshot(self, tiny_net, image, fast_cfg):
        """A snapshot taken once serves every image."""
        snap = snapshot_params(tiny_net)
        a_mask, _ = adapt_one(tiny_net, image, fast_cfg, snapshot=snap)
        b_mask, _ = adapt_one(tiny_net, image, fast_cfg)
        np.testing.assert_array_equal(a_mask, b_mask)

    def test_descent_with_frozen_labels(self, tiny_net, image):
        """Fixed pseudo labels and a small step never increase the loss."""
        cfg = AdaptConfig(n_iters=6, eta=1e-3, alpha=0.0, scales=(1.0,), use_flip=False, use_gray=False)
        _, report = adapt_one(tiny_net, image, cfg, freeze_pseudo=True)
        losses = report.losses
        assert len(losses) == 6
        assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))
        assert len(set(report.coverage)) == 1

    def test_frozen_labels_loss_falls(self, tiny_net, image):
        """A few larger steps on fixed labels lower the loss overall."""
        cfg = AdaptConfig(n_iters=4, eta=0.005, alpha=0.0, scales=(1.0,), use_flip=False, use_gray=False)
        _, report = adapt_one(tiny_net, image, cfg, freeze_pseudo=True)
        assert report.losses[-1] < report.losses[0]

    def test_loss_on_all_views(self, tiny_net, image, fast_cfg):
        """Per-view losses also run and reset."""
        before = snapshot_params(tiny_net)
        _, report = adapt_one(tiny_net, image, fast_cfg.replace(loss_on_all_views=True))
        assert all(np.isfinite(report.losses))
        _assert_same_state(tiny_net, before)

    def test_zero_coverage_skips_update(self, tiny_net, image, fast_cfg, monkeypatch):
        """Empty pseudo labels skip the step and record a guard event."""
        empty = PseudoLabelMap(
            labels=np.full((16, 16), IGNORE, dtype=np.uint8), thresholds=np.zeros(5), psi=0.7, coverage=0.0
        )
        monkeypatch.setattr("sada.adapt.make_pseudo_gt", lambda fused, psi: empty)
        mask, report = adapt_one(tiny_net, image, fast_cfg)
        plain_mask, _ = predict_plain(tiny_net, image, fast_cfg.norm)
        assert report.skipped == fast_cfg.n_iters
        assert report.losses == []
        assert report.guards["zero_coverage"] == fast_cfg.n_iters
        np.testing.assert_array_equal(mask, plain_mask)

    def test_report_fields(self, tiny_net, image, fast_cfg):
        """Views, coverage and wall time are filled in."""
        _, report = adapt_one(tiny_net, image, fast_cfg)
        assert report.views == 4
        assert all(0.0 < c <= 1.0 for c in report.coverage)
        assert report.wall_ms > 0.0
        assert report.pseudo is not None


class TestEntropyAdapt:
    """Entropy-minimization baseline."""

    def test_restores_and_logs(self, tiny_net, image, fast_cfg):
        """One entropy value per step, parameters reset afterwards."""
        before = snapshot_params(tiny_net)
        mask, report = entropy_adapt(tiny_net, image, fast_cfg)
        assert mask.shape == (16, 16)
        assert len(report.losses) == fast_cfg.n_iters
        assert all(0.0 <= v <= np.log(5) + 1e-5 for v in report.losses)
        _assert_same_state(tiny_net, before)

    def test_zero_iterations_is_san(self, tiny_net, image, fast_cfg):
        """Without updates it is the SaN prediction."""
        cfg = fast_cfg.replace(n_iters=0)
        mask, _ = entropy_adapt(tiny_net, image, cfg)
        np.testing.assert_array_equal(mask, predict_plain(tiny_net, image, cfg.norm)[0])
