"""Tests for the decoded-sample cache."""

import numpy as np
import pytest

from sada import cache
from sada.cache import CacheStats, LRUCache


class TestCacheStats:
    """Tests for CacheStats."""

    def test_hit_rate_zero_total(self):
        """Hit rate should be 0 when no requests."""
        assert CacheStats().hit_rate == 0.0

    def test_hit_rate_calculation(self):
        """Hit rate should be calculated correctly."""
        assert CacheStats(hits=80, misses=20).hit_rate == 0.8

    def test_to_dict(self):
        """Stats should convert to dict."""
        d = CacheStats(hits=100, misses=25, size=50, max_size=512).to_dict()
        assert d["hits"] == 100
        assert d["misses"] == 25
        assert d["size"] == 50
        assert "80.0%" in d["hit_rate"]


class TestLRUCache:
    """Tests for LRUCache."""

    def test_set_and_get(self):
        """Cache should store and retrieve values."""
        c = LRUCache()
        c.set("key1", "value1")
        assert c.get("key1") == "value1"

    def test_get_nonexistent(self):
        """Cache should return None for missing keys."""
        assert LRUCache().get("nonexistent") is None

    def test_lru_eviction(self):
        """Cache should evict least recently used."""
        c = LRUCache(max_size=2)
        c.set("a", 1)
        c.set("b", 2)
        c.set("c", 3)
        assert c.get("a") is None
        assert c.get("b") == 2
        assert c.get("c") == 3

    def test_access_updates_lru(self):
        """Accessing an entry should update its LRU position."""
        c = LRUCache(max_size=2)
        c.set("a", 1)
        c.set("b", 2)
        c.get("a")
        c.set("c", 3)
        assert c.get("a") == 1
        assert c.get("b") is None

    def test_overwrite_keeps_other_entries(self):
        """Setting an existing key does not evict a neighbor."""
        c = LRUCache(max_size=2)
        c.set("a", 1)
        c.set("b", 2)
        c.set("a", 3)
        assert c.get("a") == 3
        assert c.get("b") == 2

    def test_zero_size_disables(self):
        """max_size 0 stores nothing."""
        c = LRUCache(max_size=0)
        c.set("a", 1)
        assert c.get("a") is None

    def test_arrays_frozen(self):
        """Cached arrays, also inside tuples, become read-only."""
        c = LRUCache()
        image, mask = np.zeros((3, 2, 2), dtype=np.float32), np.zeros((2, 2), dtype=np.uint8)
        c.set("sample", (image, mask))
        cached_image, cached_mask = c.get("sample")
        with pytest.raises(ValueError):
            cached_image[0, 0, 0] = 1.0
        with pytest.raises(ValueError):
            cached_mask[0, 0] = 1

    def test_get_or_load(self):
        """The loader runs once per key."""
        c = LRUCache()
        calls = []

        def loader():
            calls.append(1)
            return np.ones(2)

        a = c.get_or_load("k", loader)
        b = c.get_or_load("k", loader)
        assert len(calls) == 1
        assert a is b

    def test_file_key_tracks_content(self, tmp_path):
        """Rewriting a file with a different size changes its key."""
        path = tmp_path / "x.sadt"
        path.write_bytes(b"abc")
        before = LRUCache.file_key(path)
        path.write_bytes(b"abcdef")
        assert LRUCache.file_key(path) != before

    def test_file_key_missing_file(self, tmp_path):
        """A missing file keys by its path alone."""
        path = tmp_path / "missing.sadt"
        assert LRUCache.file_key(path) == str(path.resolve())

    def test_delete(self):
        """Cache should delete specific keys."""
        c = LRUCache()
        c.set("key", "value")
        assert c.delete("key") is True
        assert c.get("key") is None
        assert c.delete("key") is False

    def test_clear(self):
        """Cache should clear all entries."""
        c = LRUCache()
        c.set("a", 1)
        c.set("b", 2)
        assert c.clear() == 2
        assert c.get("a") is None

    def test_stats(self):
        """Cache should track statistics."""
        c = LRUCache()
        c.set("key", "value")
        c.get("key")
        c.get("missing")
        stats = c.stats()
        assert stats["hits"] == 1
        assert stats["misses"] == 1
        assert stats["size"] == 1

    def test_reset_stats(self):
        """Cache should reset statistics."""
        c = LRUCache()
        c.get("key")
        c.reset_stats()
        stats = c.stats()
        assert stats["hits"] == 0
        assert stats["misses"] == 0


class TestGlobalCache:
    """Tests for global cache functions."""

    def test_clear(self):
        """Global clear should work."""
        cache.configure()
        cache.get_cache().set("a", 1)
        assert cache.clear() == 1

    def test_stats(self):
        """Global stats report the configured size."""
        cache.configure(max_size=8)
        assert cache.stats()["max_size"] == 8
        cache.configure()

    def test_dataset_loads_hit_cache(self, val_set):
        """A second load of one sample is served from the cache."""
        cache.configure()
        val_set.load(val_set.entries[0])
        val_set.load(val_set.entries[0])
        assert cache.stats()["hits"] >= 1

    def test_dataset_arrays_read_only(self, val_set):
        """Loaded samples cannot be modified in place."""
        image, _ = val_set.load(val_set.entries[0])
        with pytest.raises(ValueError):
            image[0, 0, 0] = 0.0
