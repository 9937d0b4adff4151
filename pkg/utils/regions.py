import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from loguru import logger
from scipy.spatial.distance import cdist
from sklearn.cluster import DBSCAN, KMeans, kmeans_plusplus

from utils.config import SeparationConfig, SeparationMethod, SupervoxelParams
from utils.errors import ConfigError, GeometryError, QueryError, RegionError
from utils.pointcloud import AABB, PointCloud
from utils.spatial_index import SpatialIndex

NORMAL_TOLERANCE = 1e-9
_COLLINEAR_TOLERANCE = 1e-12


class RegionKind(str, Enum):
    COLUMN = "column"
    SUPERVOXEL_GROUND = "supervoxel_ground"
    SUPERVOXEL_OBJECT = "supervoxel_object"


@dataclass(eq=False)
class Region:
    id: int
    kind: RegionKind
    point_indices: np.ndarray
    bbox: AABB
    column_coords: Optional[tuple[int, int]] = None

    @property
    def size(self) -> int:
        return len(self.point_indices)


@dataclass(eq=False)
class RegionSet:
    regions: list[Region]
    n_points: int
    resolution_r: Optional[float] = None
    _membership: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def __getitem__(self, region_id: int) -> Region:
        return self.regions[region_id]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([r.size for r in self.regions], dtype=np.int64)

    def membership(self) -> np.ndarray:
        """Region id of every point (-1 where no region claims the point)."""
        if self._membership is None:
            owner = np.full(self.n_points, -1, dtype=np.int64)
            for region in self.regions:
                owner[region.point_indices] = region.id
            self._membership = owner
        return self._membership

    def assert_partition(self) -> None:
        """Raise unless the regions are pairwise disjoint and cover every point index."""
        if not self.regions:
            raise RegionError("region set is empty")
        counts = np.zeros(self.n_points, dtype=np.int64)
        for position, region in enumerate(self.regions):
            if region.id != position:
                raise RegionError(f"region ids must be 0..m-1 in order, found {region.id} at {position}")
            if region.size == 0:
                raise RegionError(f"region {region.id} is empty")
            if np.any(np.diff(region.point_indices) <= 0):
                raise RegionError(f"region {region.id} indices are not sorted and unique")
            np.add.at(counts, region.point_indices, 1)
        if np.any(counts > 1):
            raise RegionError(f"{int(np.sum(counts > 1))} points belong to more than one region")
        if np.any(counts == 0):
            raise RegionError(f"{int(np.sum(counts == 0))} points belong to no region")

    def kind_counts(self) -> dict[str, int]:
        counts = {kind.value: 0 for kind in RegionKind}
        for region in self.regions:
            counts[region.kind.value] += 1
        return counts


@dataclass(frozen=True)
class PlaneModel:
    normal: np.ndarray
    offset: float
    inlier_threshold: float

    def __post_init__(self):
        if abs(float(np.linalg.norm(self.normal)) - 1.0) > NORMAL_TOLERANCE:
            raise GeometryError(f"plane normal must be unit length, got {self.normal}")

    def signed_distance(self, positions: np.ndarray) -> np.ndarray:
        return positions @ self.normal - self.offset


@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int


def _group_regions(
    positions: np.ndarray, group_of_point: np.ndarray, point_ids: np.ndarray, n_groups: int
) -> list[tuple[np.ndarray, AABB]]:
    """Split point_ids by group label; each group keeps its indices sorted ascending."""
    order = np.lexsort((point_ids, group_of_point))
    sorted_groups = group_of_point[order]
    sorted_ids = point_ids[order]
    bounds = np.searchsorted(sorted_groups, np.arange(n_groups + 1))
    groups = []
    for g in range(n_groups):
        ids = sorted_ids[bounds[g] : bounds[g + 1]]
        if ids.size == 0:
            continue
        selected = positions[ids]
        groups.append((ids, AABB(min=selected.min(axis=0), max=selected.max(axis=0))))
    return groups


def assign_columns(cloud: PointCloud, r: float) -> RegionSet:
    """
    Partition the cloud into vertical columns of a 2D grid with edge length r.

    Point i lands in cell (floor(x_i / r), floor(y_i / r)); the grid origin is the
    world origin. Only non-empty cells become regions, ordered by (i, j).
    """
    if not r > 0:
        raise ConfigError(f"column edge length must be > 0, got {r}")
    cells = np.floor(cloud.positions[:, :2] / r).astype(np.int64)
    unique_cells, cell_of_point = np.unique(cells, axis=0, return_inverse=True)
    cell_of_point = cell_of_point.reshape(-1)
    groups = _group_regions(cloud.positions, cell_of_point, np.arange(cloud.n), len(unique_cells))
    regions = [
        Region(
            id=i,
            kind=RegionKind.COLUMN,
            point_indices=ids,
            bbox=bbox,
            column_coords=(int(cell[0]), int(cell[1])),
        )
        for i, ((ids, bbox), cell) in enumerate(zip(groups, unique_cells))
    ]
    logger.debug(f"assign_columns: r={r} produced {len(regions)} columns")
    return RegionSet(regions=regions, n_points=cloud.n, resolution_r=r)


def _orient(normal: np.ndarray) -> np.ndarray:
    """Flip so z is positive; horizontal normals use the first non-zero component."""
    for component in (normal[2], normal[0], normal[1]):
        if component != 0:
            return normal if component > 0 else -normal
    return normal


def _plane_through(points: np.ndarray) -> Optional[tuple[np.ndarray, float]]:
    normal = np.cross(points[1] - points[0], points[2] - points[0])
    norm = np.linalg.norm(normal)
    if norm < _COLLINEAR_TOLERANCE:
        return None
    normal = _orient(normal / norm)
    return normal, float(normal @ points[0])


def _least_squares_plane(points: np.ndarray) -> Optional[tuple[np.ndarray, float]]:
    centroid = points.mean(axis=0)
    _, singular, vt = np.linalg.svd(points - centroid, full_matrices=False)
    if len(singular) < 2 or singular[1] <= _COLLINEAR_TOLERANCE * max(singular[0], 1.0):
        return None
    normal = vt[-1]
    normal = _orient(normal / np.linalg.norm(normal))
    return normal, float(normal @ centroid)


def fit_ground_plane(
    cloud: PointCloud, iterations: int = 200, inlier_threshold: float = 0.1, seed: int = 0
) -> tuple[PlaneModel, np.ndarray]:
    """
    RANSAC ground plane.

    Samples `iterations` random point triples, keeps the plane with the most
    inliers (first one wins ties) and refines it by least squares over its inliers.
    The refined plane is kept when it does not lose inliers.

    Returns:
        (PlaneModel with +z oriented normal, sorted inlier index array)
    """
    positions = cloud.positions
    n = len(positions)
    if n < 3:
        raise GeometryError(f"plane fitting needs at least 3 points, got {n}")
    if iterations < 1:
        raise ConfigError(f"RANSAC iterations must be >= 1, got {iterations}")
    if _least_squares_plane(positions) is None:
        raise GeometryError("all points are collinear; no plane is defined")

    rng = np.random.default_rng(seed)
    best, best_count = None, -1
    for _ in range(iterations):
        sample = rng.choice(n, size=3, replace=False)
        plane = _plane_through(positions[sample])
        if plane is None:
            continue
        count = int(np.count_nonzero(np.abs(positions @ plane[0] - plane[1]) <= inlier_threshold))
        if count > best_count:
            best, best_count = plane, count
    if best is None:
        logger.warning("fit_ground_plane: every RANSAC sample was degenerate, using a least-squares plane")
        best = _least_squares_plane(positions)
        best_count = int(np.count_nonzero(np.abs(positions @ best[0] - best[1]) <= inlier_threshold))

    inliers = np.flatnonzero(np.abs(positions @ best[0] - best[1]) <= inlier_threshold)
    if len(inliers) >= 3 and (refined := _least_squares_plane(positions[inliers])) is not None:
        refined_inliers = np.flatnonzero(np.abs(positions @ refined[0] - refined[1]) <= inlier_threshold)
        if len(refined_inliers) >= len(inliers):
            best, inliers = refined, refined_inliers

    model = PlaneModel(normal=best[0], offset=best[1], inlier_threshold=inlier_threshold)
    logger.debug(f"fit_ground_plane: normal={model.normal}, offset={model.offset:.4f}, inliers={len(inliers)}/{n}")
    return model, inliers


def dbscan(
    cloud: PointCloud, indices, eps: float, min_pts: int, index: Optional[SpatialIndex] = None
) -> np.ndarray:
    """
    DBSCAN over cloud.positions[indices].

    Core points have at least `min_pts` neighbours within eps, themselves included.
    Cluster ids follow the first core point by ascending index and border points
    join the first cluster that reaches them.

    Args:
        cloud: Source cloud
        indices: Points to cluster
        eps: Neighbourhood radius in meters
        min_pts: Core point threshold
        index: Index over the whole cloud; a local index is built when omitted

    Returns:
        Cluster label per entry of `indices` (-1 = noise)
    """
    if not eps > 0:
        raise ConfigError(f"eps must be > 0, got {eps}")
    if min_pts < 1:
        raise ConfigError(f"min_pts must be >= 1, got {min_pts}")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return np.empty(0, dtype=np.int64)
    if index is not None and index.n != cloud.n:
        raise QueryError(f"spatial index covers {index.n} points, the cloud has {cloud.n}")
    local = SpatialIndex(cloud.positions[idx]) if index is None else index.restrict(idx)
    graph = local.radius_graph(eps)
    labels = DBSCAN(eps=eps, min_samples=min_pts, metric="precomputed").fit_predict(graph)
    return labels.astype(np.int64)


def kmeans(points, K: int, max_iters: int = 300, seed: int = 0) -> KMeansResult:
    """
    Lloyd k-means with k-means++ seeding, both deterministic under `seed`.

    Iterates until the assignment stops changing or `max_iters` is reached.
    """
    data = np.asarray(points, dtype=np.float64)
    if data.ndim == 1:
        data = data.reshape(-1, 1)
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if K > len(data):
        raise ConfigError(f"K={K} exceeds the number of points ({len(data)})")
    if max_iters < 1:
        raise ConfigError(f"max_iters must be >= 1, got {max_iters}")
    centers, _ = kmeans_plusplus(data, n_clusters=K, random_state=seed)
    model = KMeans(
        n_clusters=K, init=centers, n_init=1, max_iter=max_iters, tol=0.0, algorithm="lloyd", random_state=seed
    ).fit(data)
    return KMeansResult(
        assignments=model.labels_.astype(np.int64),
        centroids=model.cluster_centers_,
        inertia=float(model.inertia_),
        n_iter=int(model.n_iter_),
    )


def _merge_noise(positions: np.ndarray, objects: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Attach DBSCAN noise to the cluster with the nearest centroid (lowest id on ties)."""
    cluster_ids = np.unique(labels[labels >= 0])
    noise = labels < 0
    if cluster_ids.size == 0 or not np.any(noise):
        return labels
    centroids = np.stack([positions[objects[labels == c]].mean(axis=0) for c in cluster_ids])
    nearest = np.argmin(cdist(positions[objects[noise]], centroids), axis=1)
    merged = labels.copy()
    merged[noise] = cluster_ids[nearest]
    return merged


def build_supervoxels(
    cloud: PointCloud, params: SupervoxelParams, seed: int = 0, index: Optional[SpatialIndex] = None
) -> RegionSet:
    """
    Ground-plane + density-clustering supervoxels.

    fit_ground_plane splits ground from objects; DBSCAN clusters the objects (noise
    joins the nearest cluster, or stays as singletons when no cluster exists); the
    ground is cut by k-means on XY into ceil(area / target area) regions.
    Region order: ground regions, object clusters, singletons.
    """
    params.validate()
    positions = cloud.positions
    plane, ground = fit_ground_plane(cloud, params.ransac_iterations, params.inlier_threshold, seed)
    is_ground = np.zeros(cloud.n, dtype=bool)
    is_ground[ground] = True
    objects = np.flatnonzero(~is_ground)

    regions: list[Region] = []

    def add(kind: RegionKind, groups: list[tuple[np.ndarray, AABB]]) -> None:
        for ids, bbox in groups:
            regions.append(Region(id=len(regions), kind=kind, point_indices=ids, bbox=bbox))

    if ground.size:
        ground_xy = positions[ground, :2]
        extent = ground_xy.max(axis=0) - ground_xy.min(axis=0)
        k = math.ceil(float(extent[0] * extent[1]) / params.ground_region_target_area)
        k = min(max(k, 1), ground.size)
        assignment = kmeans(ground_xy, k, seed=seed).assignments
        add(RegionKind.SUPERVOXEL_GROUND, _group_regions(positions, assignment, ground, k))

    if objects.size:
        labels = dbscan(cloud, objects, params.eps, params.min_pts, index)
        labels = _merge_noise(positions, objects, labels)
        clustered = labels >= 0
        if np.any(clustered):
            n_clusters = int(labels.max()) + 1
            add(
                RegionKind.SUPERVOXEL_OBJECT,
                _group_regions(positions, labels[clustered], objects[clustered], n_clusters),
            )
        for point in objects[~clustered]:
            add(RegionKind.SUPERVOXEL_OBJECT, [(np.array([point]), AABB(positions[point], positions[point]))])

    region_set = RegionSet(regions=regions, n_points=cloud.n)
    logger.debug(f"build_supervoxels: {region_set.kind_counts()} (ground normal {plane.normal})")
    return region_set


def separate_regions(
    cloud: PointCloud, config: SeparationConfig, seed: int = 0, index: Optional[SpatialIndex] = None
) -> RegionSet:
    """Run the configured separation; the result is checked to partition the cloud."""
    config.validate()
    if config.method == SeparationMethod.COLUMNS:
        region_set = assign_columns(cloud, config.r)
    else:
        region_set = build_supervoxels(cloud, config.supervoxel, seed=seed, index=index)
    region_set.assert_partition()
    return region_set
