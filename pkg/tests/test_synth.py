"""Tests for the procedural scene generator."""

import json

import numpy as np
import pytest

from sada.exceptions import SadaArtifactError, SadaDataError, SadaValidationError
from sada.synth import (
    CANVAS,
    MANIFEST_NAME,
    SPLIT_SHIFTS,
    SceneSpec,
    Shape,
    ShiftSpec,
    apply_shift,
    generate,
    hue_rotation_matrix,
    make_sample,
    read_manifest,
    render_scene,
    sample_scene,
    shape_coverage,
)


class TestShiftSpec:
    """Shift parameters."""

    def test_parameters_scale_with_strength(self):
        """Strength 0.5 with a negative hue sign."""
        s = ShiftSpec(0.5, -1)
        assert s.brightness == pytest.approx(0.125)
        assert s.contrast == pytest.approx(1.3)
        assert s.hue_degrees == pytest.approx(-15.0)
        assert s.noise_sigma == pytest.approx(0.05)
        assert s.blur_radius == 1

    def test_split_table(self):
        """Each split has its documented strength and hue direction."""
        expected = {"source": (0.0, 1), "val": (0.35, 1), "targetA": (0.5, -1), "targetB": (0.7, 1), "targetC": (0.9, -1)}
        assert {k: (v.strength, v.hue_sign) for k, v in SPLIT_SHIFTS.items()} == expected

    @pytest.mark.parametrize("kwargs", [{"strength": 1.5}, {"strength": 0.5, "hue_sign": 0}])
    def test_invalid(self, kwargs):
        """Out-of-range settings are rejected."""
        with pytest.raises(SadaValidationError):
            ShiftSpec(**kwargs)


class TestRendering:
    """Scene rasterization."""

    def test_zero_shift_is_identity(self, rng):
        """Strength 0 returns the image unchanged."""
        image = rng.random((3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(apply_shift(image, ShiftSpec(0.0)), image)

    def test_shift_stays_in_range(self, rng):
        """Shifted images are clamped to [0, 1]."""
        out = apply_shift(rng.random((3, 16, 16)).astype(np.float32), ShiftSpec(0.9, -1), rng)
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_hue_rotation_keeps_gray(self):
        """Gray pixels are fixed points of the hue rotation."""
        gray = np.full(3, 0.4)
        np.testing.assert_allclose(hue_rotation_matrix(25.0) @ gray, gray, atol=1e-9)

    def test_mask_matches_coverage(self):
        """A single rectangle labels exactly its covered pixels."""
        shape = Shape(cls=2, params=(4.0, 4.0, 11.0, 9.0), color=(1.0, 0.0, 0.0))
        spec = SceneSpec(seed=0, shapes=(shape,), size=16, noise=0.0)
        image, mask = render_scene(spec)
        cover = shape_coverage(shape, 16)
        assert cover.sum() == 7 * 5
        np.testing.assert_array_equal(mask == 2, cover)
        np.testing.assert_allclose(image[:, cover], np.array([[1.0], [0.0], [0.0]]).repeat(cover.sum(), 1))

    def test_later_shapes_occlude(self):
        """The last shape wins where shapes overlap."""
        a = Shape(cls=2, params=(0.0, 0.0, 16.0, 16.0), color=(0.0, 0.0, 1.0))
        b = Shape(cls=1, params=(8.0, 8.0, 3.0), color=(1.0, 0.0, 0.0))
        _, mask = render_scene(SceneSpec(seed=0, shapes=(a, b), size=16, noise=0.0))
        assert mask[8, 8] == 1
        assert mask[0, 0] == 2

    def test_scene_sampling_deterministic(self):
        """One seed always gives one scene."""
        assert sample_scene(11) == sample_scene(11)
        assert 2 <= len(sample_scene(11).shapes) <= 5

    def test_sample_has_foreground(self):
        """Generated samples contain at least one object."""
        for index in range(10):
            image, mask = make_sample("source", index, 0)
            assert image.shape == (3, CANVAS, CANVAS)
            assert (mask > 0).any()
            assert mask.max() < 5


class TestDatasets:
    """Splits on disk."""

    def test_generate_writes_manifest(self, tmp_path):
        """One manifest line per sample with relative paths."""
        manifest = generate(tmp_path / "src", "source", n=4, seed=0)
        lines = manifest.read_text().splitlines()
        assert len(lines) == 4
        entry = json.loads(lines[0])
        assert entry["domain"] == "source"
        assert entry["shift"] == 0.0
        assert (tmp_path / "src" / entry["image"]).exists()

    def test_generate_deterministic(self, tmp_path):
        """Same arguments give byte-identical files, with or without threads."""
        generate(tmp_path / "a", "targetB", n=3, seed=5)
        generate(tmp_path / "b", "targetB", n=3, seed=5, jobs=3)
        for rel in ["manifest.jsonl", "images/targetB_00002.sadt", "masks/targetB_00002.sadt"]:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_seed_changes_samples(self, tmp_path):
        """Different seeds give different images."""
        generate(tmp_path / "a", "val", n=1, seed=0)
        generate(tmp_path / "b", "val", n=1, seed=1)
        a = (tmp_path / "a" / "images" / "val_00000.sadt").read_bytes()
        b = (tmp_path / "b" / "images" / "val_00000.sadt").read_bytes()
        assert a != b

    def test_shift_override(self, tmp_path):
        """An explicit shift is recorded in the manifest."""
        generate(tmp_path / "x", "val", n=1, seed=0, shift=ShiftSpec(0.2, -1))
        assert read_manifest(tmp_path / "x").entries[0]["shift"] == 0.2

    @pytest.mark.parametrize("kwargs", [{"split": "nope"}, {"n": 0}, {"seed": -1}])
    def test_generate_rejects(self, tmp_path, kwargs):
        """Bad arguments fail before writing."""
        args = {"split": "val", "n": 1, "seed": 0, **kwargs}
        with pytest.raises(SadaValidationError):
            generate(tmp_path / "x", **args)

    def test_read_manifest(self, val_dir):
        """Reading a directory finds its manifest."""
        ds = read_manifest(val_dir)
        assert len(ds) == 3
        assert ds.domains == {"val"}
        assert [e["id"] for e in ds] == ["val_00000", "val_00001", "val_00002"]

    def test_load_sample(self, val_set):
        """Loaded samples have matching shapes and dtypes."""
        image, mask = val_set.load(val_set.entries[0])
        assert image.dtype == np.float32 and mask.dtype == np.uint8
        assert image.shape == (3,) + mask.shape

    def test_subset_and_shuffle(self, val_set):
        """Subsets filter by id and shuffles are seeded."""
        assert len(val_set.subset(["val_00001"])) == 1
        a = [e["id"] for e in val_set.shuffled(3)]
        assert a == [e["id"] for e in val_set.shuffled(3)]
        assert sorted(a) == [e["id"] for e in val_set]

    def test_missing_manifest(self, tmp_path):
        """A directory without a manifest is a data error."""
        with pytest.raises(SadaDataError) as exc_info:
            read_manifest(tmp_path)
        assert exc_info.value.exit_code == 5

    def test_bad_manifest_line(self, tmp_path):
        """Invalid JSON names the line."""
        (tmp_path / MANIFEST_NAME).write_text('{"image": "a"}\nnot json\n')
        with pytest.raises(SadaDataError):
            read_manifest(tmp_path)

    def test_missing_keys(self, tmp_path):
        """Entries need image, mask, domain and seed."""
        (tmp_path / MANIFEST_NAME).write_text('{"image": "images/a.sadt"}\n')
        with pytest.raises(SadaDataError) as exc_info:
            read_manifest(tmp_path)
        assert "missing keys" in str(exc_info.value)

    def test_corrupt_sample(self, val_dir, val_set):
        """A truncated image file fails to load."""
        entry = val_set.entries[0]
        path = val_dir / entry["image"]
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(SadaArtifactError):
            val_set.load(entry)
