import os

import numpy as np
import pytest

from app.neighbor_cache import NeighborCache, neighborhood_from_bytes, neighborhood_key, neighborhood_to_bytes
from models.errors import GaotError
from models.spatial import radius_query_all


@pytest.fixture
def clouds(rng):
    return rng.uniform(-1, 1, size=(9, 2)), rng.uniform(-1, 1, size=(40, 2))


def assert_same(a, b):
    assert a.radii == b.radii
    for x, y in zip(a.scales, b.scales):
        np.testing.assert_array_equal(x.offsets, y.offsets)
        np.testing.assert_array_equal(x.neighbor_idx, y.neighbor_idx)
        np.testing.assert_array_equal(x.rel_disp, y.rel_disp)


class TestEncoding:
    def test_round_trip(self, clouds):
        centers, sources = clouds
        nbhd = radius_query_all(centers, sources, (0.3, 0.6))
        back = neighborhood_from_bytes(neighborhood_to_bytes(nbhd), (0.3, 0.6), 2)
        assert_same(nbhd, back)

    def test_truncated(self, clouds):
        nbhd = radius_query_all(*clouds, (0.5,))
        with pytest.raises(GaotError):
            neighborhood_from_bytes(neighborhood_to_bytes(nbhd)[:-8], (0.5,), 2)

    def test_scale_count_mismatch(self, clouds):
        blob = neighborhood_to_bytes(radius_query_all(*clouds, (0.5,)))
        with pytest.raises(GaotError):
            neighborhood_from_bytes(blob, (0.5, 1.0), 2)

    def test_bad_magic(self):
        with pytest.raises(GaotError, match="magic"):
            neighborhood_from_bytes(b"x" * 32, (0.5,), 2)


class TestKey:
    def test_key_depends_on_every_input(self, clouds):
        centers, sources = clouds
        key = neighborhood_key(centers, sources, (0.5,))
        assert key == neighborhood_key(centers.copy(), sources.copy(), [0.5])
        assert key != neighborhood_key(centers, sources, (0.5000001,))
        assert key != neighborhood_key(sources, centers, (0.5,))
        moved = sources.copy()
        moved[3, 1] += 1e-12
        assert key != neighborhood_key(centers, moved, (0.5,))


class TestNeighborCache:
    def test_second_query_hits(self, clouds, tmp_path):
        cache = NeighborCache(str(tmp_path / "nb"))
        first = cache.radius_query(*clouds, (0.4,))
        second = cache.radius_query(*clouds, (0.4,))
        assert (cache.hits, cache.misses) == (1, 1)
        assert_same(first, second)
        assert len(os.listdir(tmp_path / "nb")) == 1

    def test_new_radii_miss(self, clouds, tmp_path):
        cache = NeighborCache(str(tmp_path))
        cache.radius_query(*clouds, (0.4,))
        cache.radius_query(*clouds, (0.4, 0.8))
        assert cache.misses == 2

    def test_default_directory_from_environment(self, clouds, tmp_path):
        cache = NeighborCache()
        assert cache.directory == str(tmp_path / "cache")
        cache.radius_query(*clouds, (0.4,))
        assert os.path.isdir(tmp_path / "cache")

    def test_shared_between_instances(self, clouds, tmp_path):
        NeighborCache(str(tmp_path)).radius_query(*clouds, (0.4,))
        other = NeighborCache(str(tmp_path))
        other.radius_query(*clouds, (0.4,))
        assert other.hits == 1
