"""Tests for test-time views and fusion."""

import numpy as np
import pytest

from sada.augment import (
    ViewSpec,
    apply_view,
    build_views,
    fuse,
    invert_and_align,
    nearest_resize,
    to_grayscale,
    transform_map,
    view_specs,
    warp_labels,
)
from sada.config import AdaptConfig
from sada.exceptions import SadaContractError, SadaShapeError, SadaValidationError
from sada.tensor import guard_scope


class TestViewSpec:
    """View descriptions."""

    @pytest.mark.parametrize("size,scale,expected", [(64, 0.75, 48), (16, 0.25, 4), (18, 0.5, 8), (64, 1.0, 64)])
    def test_extent_rounds_to_stride(self, size, scale, expected):
        """Scaled extents round to the nearest multiple of 4."""
        assert ViewSpec(scale).extent(size) == expected

    def test_identity(self):
        """Only scale 1.0 color unflipped is the identity."""
        assert ViewSpec().is_identity
        assert not ViewSpec(1.0, flipped=True).is_identity
        assert not ViewSpec(0.5).is_identity

    def test_scale_must_be_positive(self):
        """Zero scale is rejected."""
        with pytest.raises(SadaValidationError):
            ViewSpec(0.0)

    def test_label(self):
        """Labels name scale, flip and gray."""
        assert ViewSpec(0.5, True, True).label() == "s0.5-flip-gray"


class TestViewSet:
    """Ordering and construction of views."""

    def test_canonical_order(self):
        """Scale ascending, then unflipped first, then color first."""
        specs = view_specs((1.0, 0.5), use_flip=True, use_gray=True)
        assert specs[:4] == [
            ViewSpec(0.5, False, False),
            ViewSpec(0.5, False, True),
            ViewSpec(0.5, True, False),
            ViewSpec(0.5, True, True),
        ]
        assert len(specs) == 8

    def test_original_scale_always_present(self):
        """Scale 1.0 is added when missing."""
        specs = view_specs((0.5,), use_flip=False, use_gray=False)
        assert [s.scale for s in specs] == [0.5, 1.0]

    def test_build_views_shapes(self, image):
        """Every view is 3 x h x w at its scaled extent."""
        cfg = AdaptConfig(scales=(0.5, 1.0), use_flip=True, use_gray=False)
        views = build_views(image, cfg)
        assert [v.shape for _, v in views] == [(3, 8, 8), (3, 8, 8), (3, 16, 16), (3, 16, 16)]

    def test_identity_view_is_the_image(self, image):
        """The scale-1 color view equals the input exactly."""
        views = build_views(image, AdaptConfig(use_flip=False, use_gray=False))
        identity = [v for spec, v in views if spec.is_identity]
        np.testing.assert_array_equal(identity[0].data, image)

    def test_tiny_views_skipped(self, rng):
        """Views below 4 pixels are skipped and counted."""
        small = rng.random((3, 4, 4)).astype(np.float32)
        cfg = AdaptConfig(scales=(0.25, 1.0), use_flip=False, use_gray=False)
        with guard_scope() as counter:
            views = build_views(small, cfg)
        assert [spec.scale for spec, _ in views] == [1.0]
        assert counter.counts["view_skipped"] == 1

    def test_use_scales_off(self, image):
        """Without scales only the original resolution is used."""
        cfg = AdaptConfig(use_scales=False, use_flip=False, use_gray=True)
        assert [spec for spec, _ in build_views(image, cfg)] == [ViewSpec(1.0), ViewSpec(1.0, False, True)]

    def test_build_views_needs_rgb(self):
        """Only 3 x H x W images are accepted."""
        with pytest.raises(SadaShapeError):
            build_views(np.zeros((1, 8, 8), dtype=np.float32), AdaptConfig())


class TestPixelOps:
    """Grayscale, flip and nearest resize."""

    def test_grayscale_red(self):
        """Pure red maps to luminance 0.299 in all channels."""
        red = np.zeros((3, 2, 2), dtype=np.float32)
        red[0] = 1.0
        np.testing.assert_allclose(to_grayscale(red), 0.299, rtol=1e-6)

    def test_flip_view(self, image):
        """A flipped view mirrors columns."""
        np.testing.assert_array_equal(apply_view(ViewSpec(1.0, True), image), image[:, :, ::-1])

    def test_nearest_resize_down(self):
        """Halving picks one pixel per 2x2 block."""
        labels = np.repeat(np.repeat(np.arange(4, dtype=np.uint8).reshape(2, 2), 2, axis=0), 2, axis=1)
        np.testing.assert_array_equal(nearest_resize(labels, 2, 2), [[0, 1], [2, 3]])

    def test_warp_labels_flip(self):
        """Labels follow the view's flip."""
        labels = np.array([[1, 2, 3, 4]] * 4, dtype=np.uint8)
        out = warp_labels(ViewSpec(1.0, True), labels)
        np.testing.assert_array_equal(out[0], [4, 3, 2, 1])


class TestAlignment:
    """Mapping view predictions back to the image grid."""

    def test_flip_round_trip(self):
        """Flip and gray views round-trip exactly on random maps."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = rng.random((3, 8, 8)).astype(np.float32)
            for spec in (ViewSpec(1.0, True), ViewSpec(1.0, False, True), ViewSpec(1.0, True, True)):
                out = invert_and_align(spec, transform_map(spec, p), 8, 8).data
                np.testing.assert_allclose(out, p, atol=1e-5)

    @pytest.mark.parametrize("scale", [0.25, 0.5, 0.75, 1.5])
    def test_constant_round_trip_any_scale(self, scale):
        """Constant maps survive any rescale exactly."""
        p = np.full((2, 16, 16), 0.37, dtype=np.float32)
        spec = ViewSpec(scale, flipped=True)
        out = invert_and_align(spec, transform_map(spec, p), 16, 16).data
        np.testing.assert_allclose(out, p, atol=1e-5)

    @pytest.mark.parametrize("scale", [0.25, 0.5])
    def test_block_constant_downscale(self, scale):
        """Maps constant on 8x8 blocks downscale to the block values exactly.

        Half-pixel bilinear sampling at these scales only mixes pixels of the
        same block, so the forward transform is exact. The way back is not:
        upsampling blends neighbouring blocks at their edges (the pixel next
        to a boundary gets 0.75 / 0.25 of the two values), so only flips,
        gray views and constant maps round-trip exactly.
        """
        rng = np.random.default_rng(1)
        step = int(8 * scale)
        for _ in range(100):
            nh, nw = rng.choice([2, 4, 6], size=2)
            blocks = rng.random((3, nh, nw)).astype(np.float32)
            p = np.repeat(np.repeat(blocks, 8, axis=1), 8, axis=2)
            spec = ViewSpec(scale, flipped=bool(rng.integers(2)))
            expected = np.repeat(np.repeat(blocks, step, axis=1), step, axis=2)
            if spec.flipped:
                expected = expected[..., ::-1]
            down = transform_map(spec, p).data
            np.testing.assert_allclose(down, expected, atol=1e-5)


class TestFuse:
    """Averaging of aligned maps."""

    def test_mean(self):
        """Fusion is the elementwise mean."""
        a = np.zeros((2, 2, 2), dtype=np.float32)
        b = np.ones((2, 2, 2), dtype=np.float32)
        fused = fuse([a, b])
        assert fused.view_count == 2
        assert (fused.probs.data == 0.5).all()

    def test_order_independent(self, rng):
        """Any permutation of the views gives a bitwise-identical result."""
        maps = [rng.random((3, 5, 5)).astype(np.float32) for _ in range(6)]
        ref = fuse(maps).probs.data
        for perm in ([5, 4, 3, 2, 1, 0], [2, 0, 5, 1, 4, 3]):
            np.testing.assert_array_equal(fuse([maps[i] for i in perm]).probs.data, ref)

    def test_empty(self):
        """At least one map is needed."""
        with pytest.raises(SadaContractError):
            fuse([])

    def test_shape_mismatch(self):
        """All maps must share one shape."""
        with pytest.raises(SadaShapeError):
            fuse([np.zeros((2, 2, 2)), np.zeros((2, 3, 3))])
