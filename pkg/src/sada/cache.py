"""
In-memory cache of decoded dataset samples.

Sweeps and ablations evaluate the same split many times; decoded image and
mask arrays are kept here keyed by file path, size and modification time, so
a regenerated file is never served stale.

Usage:
    >>> from sada import cache
    >>> cache.stats()
    {'hits': 0, 'misses': 0, 'hit_rate': '0.0%', 'size': 0, 'max_size': 512}
    >>> cache.clear()
    0
"""

import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, TypeVar, Union

import numpy as np

T = TypeVar("T")


@dataclass
class CacheStats:
    """Statistics about cache usage."""

    hits: int = 0
    misses: int = 0
    size: int = 0
    max_size: int = 0

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate": f"{self.hit_rate:.1%}",
            "size": self.size,
            "max_size": self.max_size,
        }


def _freeze(value: T) -> T:
    """Mark arrays (or tuples of arrays) read-only."""
    if isinstance(value, np.ndarray):
        value.setflags(write=False)
    elif isinstance(value, tuple):
        for item in value:
            _freeze(item)
    return value


class LRUCache:
    """Thread-safe LRU cache.

    Attributes:
        max_size: Maximum number of entries (default: 512)
    """

    DEFAULT_MAX_SIZE = 512

    def __init__(self, max_size: int = DEFAULT_MAX_SIZE) -> None:
        self._cache: OrderedDict[str, object] = OrderedDict()
        self._lock = threading.RLock()
        self._stats = CacheStats(max_size=max_size)
        self.max_size = max_size

    @staticmethod
    def file_key(path: Union[str, Path]) -> str:
        """Key of a file: resolved path plus size and mtime."""
        p = Path(path)
        try:
            st = p.stat()
        except OSError:
            return str(p.resolve())
        return f"{p.resolve()}:{st.st_size}:{st.st_mtime_ns}"

    def get(self, key: str) -> Optional[object]:
        with self._lock:
            if key not in self._cache:
                self._stats.misses += 1
                return None
            self._cache.move_to_end(key)
            self._stats.hits += 1
            return self._cache[key]

    def set(self, key: str, value: object) -> None:
        if self.max_size <= 0:
            return
        with self._lock:
            self._cache.pop(key, None)
            while len(self._cache) >= self.max_size:
                self._cache.popitem(last=False)
            self._cache[key] = _freeze(value)
            self._stats.size = len(self._cache)

    def get_or_load(self, key: str, loader: Callable[[], T]) -> T:
        """Return the cached value for ``key``, loading (and caching) it on a miss."""
        value = self.get(key)
        if value is not None:
            return value  # type: ignore[return-value]
        value = loader()
        self.set(key, value)
        return value

    def delete(self, key: str) -> bool:
        with self._lock:
            if key in self._cache:
                del self._cache[key]
                self._stats.size = len(self._cache)
                return True
            return False

    def clear(self) -> int:
        """Clear all entries; returns how many were dropped."""
        with self._lock:
            count = len(self._cache)
            self._cache.clear()
            self._stats.size = 0
            return count

    def stats(self) -> dict:
        with self._lock:
            self._stats.size = len(self._cache)
            return self._stats.to_dict()

    def reset_stats(self) -> None:
        with self._lock:
            self._stats.hits = 0
            self._stats.misses = 0


_cache: Optional[LRUCache] = None
_cache_lock = threading.Lock()


def get_cache() -> LRUCache:
    """Get or create the global sample cache."""
    global _cache
    with _cache_lock:
        if _cache is None:
            _cache = LRUCache()
        return _cache


def clear() -> int:
    return get_cache().clear()


def stats() -> dict:
    return get_cache().stats()


def configure(max_size: int = LRUCache.DEFAULT_MAX_SIZE) -> None:
    """Replace the global cache (drops existing entries); 0 disables caching."""
    global _cache
    with _cache_lock:
        _cache = LRUCache(max_size=max_size)
