import numpy as np
import pytest

from utils.errors import QueryError
from utils.spatial_index import SpatialIndex, squared_distances


def naive_knn(positions, query, k):
    ids = np.arange(len(positions))
    d2 = squared_distances(positions, query, ids)
    return ids[np.lexsort((ids, d2, ids != query))][: min(k, len(positions))]


def naive_radius(positions, query, radius):
    ids = np.arange(len(positions))
    return ids[squared_distances(positions, query, ids) <= radius * radius]


class TestAgainstBruteForce:
    def test_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(1, 300))
            positions = rng.uniform(-5.0, 5.0, size=(n, 3))
            index = SpatialIndex(positions)
            query = int(rng.integers(n))
            k = int(rng.integers(1, 40))
            radius = float(rng.uniform(0.0, 3.0))
            np.testing.assert_array_equal(index.knn(query, k), naive_knn(positions, query, k))
            np.testing.assert_array_equal(index.radius_query(query, radius), naive_radius(positions, query, radius))

    def test_grid_ties_break_by_index(self):
        grid = np.stack(np.meshgrid(np.arange(6.0), np.arange(6.0), np.arange(3.0), indexing="ij"), -1).reshape(-1, 3)
        index = SpatialIndex(grid)
        for query in (0, 17, 50, len(grid) - 1):
            for k in (1, 4, 7, 19):
                np.testing.assert_array_equal(index.knn(query, k), naive_knn(grid, query, k))
            for radius in (0.0, 1.0, 1.5, np.sqrt(2.0)):
                np.testing.assert_array_equal(index.radius_query(query, radius), naive_radius(grid, query, radius))

    def test_k_larger_than_cloud(self):
        positions = np.array([[0.0, 0, 0], [1, 0, 0], [3, 0, 0]])
        assert SpatialIndex(positions).knn(2, 10).tolist() == [2, 1, 0]


class TestBatchQueries:
    def test_knn_batch_puts_self_first(self, rng):
        positions = rng.uniform(size=(150, 3))
        rows = SpatialIndex(positions).knn_batch(9)
        assert rows.shape == (150, 9)
        np.testing.assert_array_equal(rows[:, 0], np.arange(150))
        for i in (0, 42, 149):
            assert set(rows[i]) == set(naive_knn(positions, i, 9))

    def test_radius_graph_matches_radius_query(self, rng):
        positions = rng.uniform(size=(120, 3))
        index = SpatialIndex(positions)
        graph = index.radius_graph(0.2)
        for i in (0, 60, 119):
            assert set(graph[i].indices) | {i} == set(index.radius_query(i, 0.2))
        assert np.all(graph.data <= 0.2)

    def test_restrict_maps_local_indices(self, rng):
        positions = rng.uniform(size=(30, 3))
        subset = np.array([3, 8, 9, 20])
        local = SpatialIndex(positions).restrict(subset)
        np.testing.assert_array_equal(local.positions, positions[subset])


class TestErrors:
    def test_bad_queries(self, rng):
        index = SpatialIndex(rng.uniform(size=(10, 3)))
        with pytest.raises(QueryError):
            index.knn(10, 3)
        with pytest.raises(QueryError):
            index.knn(0, 0)
        with pytest.raises(QueryError):
            index.radius_query(0, -1.0)

    def test_positions_are_read_only(self, rng):
        index = SpatialIndex(rng.uniform(size=(10, 3)))
        with pytest.raises(ValueError):
            index.positions[0, 0] = 1.0
