import numpy as np
from scipy import sparse
from sklearn.neighbors import KDTree

from utils.errors import QueryError

# Widening applied to KD-tree search radii; candidates are then filtered exactly.
_RADIUS_SLACK = 1e-9
_RADIUS_FLOOR = 1e-12


def squared_distances(positions: np.ndarray, center: int, ids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances from positions[center] to positions[ids]."""
    diff = positions[ids] - positions[center]
    return np.einsum("ij,ij->i", diff, diff)


class SpatialIndex:
    """
    Exact kNN and radius queries over an immutable position array.

    The KD-tree only proposes candidates; membership and ordering are decided by
    `squared_distances`, so results equal a brute-force scan using the same arithmetic.
    Neighbourhoods always contain the query point itself at position 0.
    """

    def __init__(self, positions: np.ndarray, leaf_size: int = 40):
        self.positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        self.positions.setflags(write=False)
        if len(self.positions) < 1:
            raise QueryError("cannot index an empty position array")
        self.tree = KDTree(self.positions, leaf_size=leaf_size)

    @property
    def n(self) -> int:
        return len(self.positions)

    def _check(self, query_index: int) -> None:
        if not 0 <= query_index < self.n:
            raise QueryError(f"query index {query_index} out of range [0, {self.n})")

    def knn(self, query_index: int, k: int) -> np.ndarray:
        """
        The min(k, n) nearest points, ascending by distance, ties by ascending index.

        Args:
            query_index: Index of the query point
            k: Number of neighbours (self-inclusive)

        Returns:
            Index array starting with query_index
        """
        self._check(query_index)
        if k < 1:
            raise QueryError(f"k must be >= 1, got {k}")
        k = min(k, self.n)
        query = self.positions[query_index : query_index + 1]
        dist, _ = self.tree.query(query, k=k)
        radius = float(dist[0, -1])
        candidates = self.tree.query_radius(query, r=radius * (1 + _RADIUS_SLACK) + _RADIUS_FLOOR)[0]
        d2 = squared_distances(self.positions, query_index, candidates)
        # self first, then (distance, index)
        not_self = candidates != query_index
        order = np.lexsort((candidates, d2, not_self))
        return candidates[order][:k]

    def radius_query(self, query_index: int, radius: float) -> np.ndarray:
        """All points within `radius` (inclusive) of the query point, ascending index order."""
        self._check(query_index)
        if radius < 0:
            raise QueryError(f"radius must be >= 0, got {radius}")
        query = self.positions[query_index : query_index + 1]
        candidates = self.tree.query_radius(query, r=radius * (1 + _RADIUS_SLACK) + _RADIUS_FLOOR)[0]
        d2 = squared_distances(self.positions, query_index, candidates)
        return np.sort(candidates[d2 <= radius * radius])

    def knn_batch(self, k: int) -> np.ndarray:
        """
        kNN rows for every point at once (n x min(k, n)), self in column 0.

        Ordering beyond column 0 follows the KD-tree, which is deterministic for a
        given position array; use `knn` where exact tie handling matters.
        """
        if k < 1:
            raise QueryError(f"k must be >= 1, got {k}")
        k = min(k, self.n)
        _, ids = self.tree.query(self.positions, k=k)
        own = np.arange(self.n)
        misplaced = np.flatnonzero(ids[:, 0] != own)
        for row in misplaced:
            others = ids[row][ids[row] != row]
            ids[row] = np.concatenate([[row], others])[:k]
        return ids

    def radius_graph(self, radius: float) -> sparse.csr_matrix:
        """Sparse n x n distance graph of all pairs within `radius`, self-loops included."""
        if radius < 0:
            raise QueryError(f"radius must be >= 0, got {radius}")
        candidates = self.tree.query_radius(self.positions, r=radius * (1 + _RADIUS_SLACK) + _RADIUS_FLOOR)
        counts = np.array([len(c) for c in candidates], dtype=np.int64)
        rows = np.repeat(np.arange(self.n), counts)
        cols = np.concatenate(candidates).astype(np.int64) if self.n else np.empty(0, dtype=np.int64)
        diff = self.positions[cols] - self.positions[rows]
        d2 = np.einsum("ij,ij->i", diff, diff)
        keep = d2 <= radius * radius
        data = np.minimum(np.sqrt(d2[keep]), radius)
        return sparse.csr_matrix((data, (rows[keep], cols[keep])), shape=(self.n, self.n))

    def restrict(self, indices) -> "SpatialIndex":
        """A new index over positions[indices]; local index i maps to indices[i]."""
        return SpatialIndex(self.positions[np.asarray(indices, dtype=np.int64)])


def build_index(cloud) -> SpatialIndex:
    return SpatialIndex(cloud.positions)


if __name__ == "__main__":
    rng = np.random.default_rng(0)
    index = SpatialIndex(rng.uniform(0, 10, size=(1000, 3)))
    print(f"knn(0, 5) = {index.knn(0, 5)}")
    print(f"radius_query(0, 1.0) = {index.radius_query(0, 1.0)}")
