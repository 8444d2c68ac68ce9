"""Tests for the Ulam operator cache

Validates that:
1. Repeated requests hit the in-memory layer
2. LRU eviction drops the least recently used operator
3. The on-disk layer survives a new cache instance
4. Unreadable cache files are ignored with a warning
5. Statistics add up and concurrent access is safe
"""
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from quenched_lab import ConfigurationError, UlamCache, build_map


def beta(value: int, symbol: str = None):
    return build_map(symbol or f"b{value}", {"family": "beta", "beta": value})


class TestCacheBasics:
    """Test hits, misses and keys"""

    def test_miss_then_hit(self):
        cache = UlamCache()
        fmap = beta(2)
        first = cache.get_or_build(fmap, 16)
        second, _ = cache.get(fmap, 16)
        assert second is not None
        np.testing.assert_array_equal(first.to_dense(), second.to_dense())
        stats = cache.get_statistics()
        assert stats['misses'] == 1
        assert stats['hits'] == 1
        assert stats['hit_rate'] == pytest.approx(50.0)

    def test_key_depends_on_parameters_and_bins(self):
        assert UlamCache.make_key(beta(2), 16) != UlamCache.make_key(beta(3), 16)
        assert UlamCache.make_key(beta(2), 16) != UlamCache.make_key(beta(2), 32)

    def test_key_ignores_symbol_name(self):
        assert UlamCache.make_key(beta(2, "T2"), 16) == UlamCache.make_key(beta(2, "b2"), 16)

    def test_hit_carries_requested_symbol(self):
        cache = UlamCache()
        cache.get_or_build(beta(2, "T2"), 16)
        op, _ = cache.get(beta(2, "b2"), 16)
        assert op.symbol == "b2"

    def test_cached_entries_read_only(self):
        cache = UlamCache()
        op = cache.get_or_build(beta(2), 16)
        with pytest.raises(ValueError):
            op.entries.data[0] = 0.0

    def test_invalid_max_size(self):
        with pytest.raises(ConfigurationError, match="max_size"):
            UlamCache(max_size=0)

    def test_clear(self):
        cache = UlamCache()
        cache.get_or_build(beta(2), 16)
        cache.clear()
        assert cache.get_statistics()['size'] == 0
        op, _ = cache.get(beta(2), 16)
        assert op is None


class TestLRUEviction:
    """Test eviction order"""

    def test_least_recently_used_is_evicted(self):
        cache = UlamCache(max_size=2)
        cache.get_or_build(beta(2), 16)
        cache.get_or_build(beta(3), 16)
        cache.get(beta(2), 16)
        cache.get_or_build(beta(4), 16)

        stats = cache.get_statistics()
        assert stats['size'] == 2
        assert stats['evictions'] == 1
        assert cache.get(beta(3), 16)[0] is None
        assert cache.get(beta(2), 16)[0] is not None


class TestDiskLayer:
    """Test persistence under cache_dir"""

    def test_written_and_reloaded(self, tmp_path):
        fmap = beta(3)
        built = UlamCache(cache_dir=tmp_path).get_or_build(fmap, 32)
        files = list(tmp_path.glob("ulam_*.npz"))
        assert len(files) == 1

        fresh = UlamCache(cache_dir=tmp_path)
        loaded, _ = fresh.get(fmap, 32)
        assert loaded is not None
        np.testing.assert_allclose(loaded.to_dense(), built.to_dense())
        assert fresh.get_statistics()['disk_hits'] == 1

    def test_unreadable_file_is_ignored(self, tmp_path, caplog):
        fmap = beta(2)
        key = UlamCache.make_key(fmap, 16)
        (tmp_path / f"ulam_{key}.npz").write_bytes(b"not a zip file")
        cache = UlamCache(cache_dir=tmp_path)
        with caplog.at_level(logging.WARNING):
            op, _ = cache.get(fmap, 16)
        assert op is None
        assert "unreadable cached operator" in caplog.text
        assert cache.get_statistics()['misses'] == 1


class TestCacheConcurrency:
    """Test shared use from worker threads"""

    def test_concurrent_builds(self):
        cache = UlamCache()
        fmap = beta(2)
        with ThreadPoolExecutor(max_workers=4) as executor:
            ops = list(executor.map(lambda _: cache.get_or_build(fmap, 64), range(8)))

        reference = ops[0].to_dense()
        for op in ops[1:]:
            np.testing.assert_array_equal(op.to_dense(), reference)
        stats = cache.get_statistics()
        assert stats['size'] == 1
        assert stats['total_requests'] == 8

    def test_log_statistics(self, caplog):
        cache = UlamCache(logger=logging.getLogger("quenched_lab.cache_test"))
        cache.get_or_build(beta(2), 16)
        with caplog.at_level(logging.DEBUG, logger="quenched_lab.cache_test"):
            cache.log_statistics()
        assert "1 misses" in caplog.text
