from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from loguru import logger
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation
from scipy.special import log_softmax, softmax

from utils.config import AugmentConfig, LearnerConfig
from utils.errors import ConfigError, TrainingError
from utils.pointcloud import PointCloud
from utils.regions import PlaneModel
from utils.spatial_index import SpatialIndex

FEATURE_NAMES = ("height", "red", "green", "blue", "surface_variation", "normal_z", "density", "bias")
COLOR_COLUMNS = slice(1, 4)
BIAS_COLUMN = len(FEATURE_NAMES) - 1
DENSITY_RADIUS = 0.5
DENSITY_NEIGHBORS = 50
STD_FLOOR = 1e-12
EIGEN_SUM_FLOOR = 1e-18
RANK_TOLERANCE = 1e-12

SCALE_RANGE = (0.9, 1.1)
COLOR_JITTER = 10.0
ELASTIC_CELL = 1.0
ELASTIC_AMPLITUDE = 0.05
INIT_SCALE = 0.01
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def surface_variation(eigenvalues) -> np.ndarray:
    """
    lambda3 / (lambda1 + lambda2 + lambda3) for descending eigenvalues; 0 when the sum is below 1e-18.

    Accepts one eigenvalue triple or an (m, 3) array of triples.
    """
    ev = np.asarray(eigenvalues, dtype=np.float64)
    total = ev.sum(axis=-1)
    small = total < EIGEN_SUM_FLOOR
    variation = ev[..., 2] / np.where(small, 1.0, total)
    return np.where(small, 0.0, variation)


@dataclass(eq=False)
class FeatureSource:
    """What `extract_features` saw, kept so augmented epochs can recompute features."""

    cloud: PointCloud
    neighbor_ids: np.ndarray
    ground: PlaneModel
    k_neighbors: int


@dataclass(eq=False)
class FeatureMatrix:
    values: np.ndarray
    source: Optional[FeatureSource] = None
    names: tuple[str, ...] = FEATURE_NAMES

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Standardizer":
        mean = values.mean(axis=0)
        std = np.maximum(values.std(axis=0), STD_FLOOR)
        # the bias column passes through unchanged
        mean[BIAS_COLUMN] = 0.0
        std[BIAS_COLUMN] = 1.0
        return cls(mean=mean, std=std)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std


@dataclass(eq=False)
class Member:
    weights: np.ndarray
    seed: int
    epochs: int
    final_loss: float
    loss_history: list[float] = field(default_factory=list)


@dataclass(eq=False)
class Ensemble:
    members: list[Member]
    standardizer: Standardizer
    class_count: int

    def __post_init__(self):
        if not self.members:
            raise TrainingError("an ensemble needs at least one member")
        shapes = {m.weights.shape for m in self.members}
        if len(shapes) != 1:
            raise TrainingError(f"ensemble members disagree on weight shapes: {shapes}")
        if not all(np.all(np.isfinite(m.weights)) for m in self.members):
            raise TrainingError("ensemble weights contain non-finite values")

    @property
    def N(self) -> int:
        return len(self.members)

    @property
    def feature_width(self) -> int:
        return self.members[0].weights.shape[1]


@dataclass(eq=False)
class TrainingSet:
    rows: np.ndarray
    labels: np.ndarray
    sample_weight: np.ndarray
    standardizer: Standardizer


def neighborhood_shape(positions: np.ndarray, neighbor_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    PCA of every neighbourhood covariance.

    Returns:
        (surface variation, |z| of the smallest-eigenvalue eigenvector); rank <= 1
        neighbourhoods get variation 0 and normal (0, 0, 1).
    """
    neighbors = positions[neighbor_ids]
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / neighbor_ids.shape[1]
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    descending = np.clip(eigenvalues[:, ::-1], 0.0, None)
    variation = surface_variation(descending)
    normal_z = np.abs(eigenvectors[:, 2, 0])
    degenerate = descending[:, 1] <= RANK_TOLERANCE * np.maximum(descending[:, 0], EIGEN_SUM_FLOOR)
    return np.where(degenerate, 0.0, variation), np.where(degenerate, 1.0, normal_z)


def compute_feature_values(
    positions: np.ndarray,
    colors: np.ndarray,
    neighbor_ids: np.ndarray,
    ground: PlaneModel,
    k_neighbors: int,
    rows: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Raw (unstandardized) feature rows in FEATURE_NAMES order for `rows` (all points when None)."""
    rows = np.arange(len(positions)) if rows is None else np.asarray(rows, dtype=np.int64)
    ids = neighbor_ids[rows]
    k = min(k_neighbors, ids.shape[1])
    variation, normal_z = neighborhood_shape(positions, ids[:, :k])

    others = ids[:, 1 : DENSITY_NEIGHBORS + 1]
    diff = positions[others] - positions[rows][:, None, :]
    close = np.einsum("nki,nki->nk", diff, diff) <= DENSITY_RADIUS**2
    density = np.minimum(close.sum(axis=1) / DENSITY_NEIGHBORS, 1.0)

    values = np.empty((len(rows), len(FEATURE_NAMES)), dtype=np.float64)
    values[:, 0] = ground.signed_distance(positions[rows])
    values[:, COLOR_COLUMNS] = colors[rows] / 255.0
    values[:, 4] = variation
    values[:, 5] = normal_z
    values[:, 6] = density
    values[:, BIAS_COLUMN] = 1.0
    return values


def extract_features(
    cloud: PointCloud, index: SpatialIndex, ground: PlaneModel, k_neighbors: int = 16
) -> FeatureMatrix:
    """
    Per-point features: height above the ground plane, normalized RGB, surface
    variation and |normal z| from the k-neighbourhood PCA, local density within
    0.5 m (over 50 neighbours, capped at 1) and a bias column.
    """
    if k_neighbors < 3:
        raise ConfigError(f"k_neighbors must be >= 3, got {k_neighbors}")
    neighbor_ids = index.knn_batch(max(k_neighbors, DENSITY_NEIGHBORS + 1))
    values = compute_feature_values(cloud.positions, cloud.colors, neighbor_ids, ground, k_neighbors)
    logger.debug(f"extract_features: {values.shape[0]} points x {values.shape[1]} features")
    return FeatureMatrix(values=values, source=FeatureSource(cloud, neighbor_ids, ground, k_neighbors))


@dataclass(frozen=True)
class Augmentation:
    """One random draw of the configured augmentations, applied about the vertical axis through `center`."""

    config: AugmentConfig
    center: np.ndarray
    rotation: np.ndarray
    scale: float
    color_shift: np.ndarray
    grid_origin: Optional[np.ndarray] = None
    grid: Optional[np.ndarray] = None

    @classmethod
    def sample(cls, config: AugmentConfig, seed: int, positions: np.ndarray) -> "Augmentation":
        rng = np.random.default_rng(seed)
        center = np.array([positions[:, 0].mean(), positions[:, 1].mean(), 0.0])
        rotation = np.eye(3)
        if config.rotation:
            rotation = Rotation.from_euler("z", rng.uniform(0.0, 2.0 * np.pi)).as_matrix()
        scale = float(rng.uniform(*SCALE_RANGE)) if config.scale else 1.0
        color_shift = np.rint(rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)) if config.chromatic else np.zeros(3)
        grid_origin, grid = None, None
        if config.elastic:
            grid_origin = positions.min(axis=0)
            shape = np.floor((positions.max(axis=0) - grid_origin) / ELASTIC_CELL).astype(int) + 2
            grid = rng.normal(0.0, 1.0, size=(*shape, 3))
        return cls(config, center, rotation, scale, color_shift, grid_origin, grid)

    def displacement(self, positions: np.ndarray) -> np.ndarray:
        if self.grid is None:
            return np.zeros_like(positions)
        coords = ((positions - self.grid_origin) / ELASTIC_CELL).T
        field_ = [map_coordinates(self.grid[..., axis], coords, order=1, mode="nearest") for axis in range(3)]
        return ELASTIC_AMPLITUDE * np.stack(field_, axis=1)

    def apply(self, positions: np.ndarray, colors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        moved = np.array(positions, dtype=np.float64)
        if self.config.geometric:
            moved = moved + self.displacement(moved)
            moved = self.scale * ((moved - self.center) @ self.rotation.T) + self.center
        shifted = np.clip(np.asarray(colors, dtype=np.int64) + self.color_shift.astype(np.int64), 0, 255)
        return moved, shifted.astype(np.uint8)

    def transform_plane(self, plane: PlaneModel) -> PlaneModel:
        """The plane carried through rotation and scale (the elastic field is ignored)."""
        normal = self.rotation @ plane.normal
        normal = normal / np.linalg.norm(normal)
        offset = self.scale * (plane.offset - plane.normal @ self.center) + normal @ self.center
        return PlaneModel(normal=normal, offset=float(offset), inlier_threshold=plane.inlier_threshold)


def augment(
    positions: np.ndarray, colors: np.ndarray, config: AugmentConfig, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """
    Apply scale / rotation / elastic / chromatic augmentation, deterministic under seed.

    Rotation is a uniform angle about the z axis, scale a uniform factor in
    [0.9, 1.1], chromatic a per-channel shift in [-10, 10] clamped to [0, 255] and
    elastic a 0.05 m trilinear displacement field over a 1 m Gaussian noise grid.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if not config.enabled:
        return positions.copy(), np.asarray(colors).copy()
    return Augmentation.sample(config, seed, positions).apply(positions, colors)


def augmented_feature_rows(features: FeatureMatrix, rows: np.ndarray, config: AugmentConfig, seed: int) -> np.ndarray:
    """Feature rows recomputed under one augmentation draw; neighbourhoods stay those of the clean cloud."""
    source = features.source
    if source is None or not config.enabled:
        return features.values[rows]
    cloud = source.cloud
    augmentation = Augmentation.sample(config, seed, cloud.positions)
    if config.geometric:
        positions, colors = augmentation.apply(cloud.positions, cloud.colors)
        plane = augmentation.transform_plane(source.ground)
        return compute_feature_values(positions, colors, source.neighbor_ids, plane, source.k_neighbors, rows)
    values = features.values[rows].copy()
    _, colors = augmentation.apply(cloud.positions[rows], cloud.colors[rows])
    values[:, COLOR_COLUMNS] = colors / 255.0
    return values


def cross_entropy(
    weights: np.ndarray, X: np.ndarray, y: np.ndarray, sample_weight: np.ndarray, l2: float
) -> tuple[float, np.ndarray]:
    """Weighted mean softmax cross-entropy plus (l2 / 2) * ||W||^2, and its gradient w.r.t. W."""
    log_p = log_softmax(X @ weights.T, axis=1)
    w = sample_weight / sample_weight.sum()
    rows = np.arange(len(y))
    loss = -float(np.sum(w * log_p[rows, y])) + 0.5 * l2 * float(np.sum(weights * weights))
    residual = np.exp(log_p)
    residual[rows, y] -= 1.0
    grad = (residual * w[:, None]).T @ X + l2 * weights
    return loss, grad


def class_balance_weights(labels: np.ndarray, class_count: int) -> np.ndarray:
    """Inverse class-frequency weight per sample, normalized so present classes weigh equally."""
    counts = np.bincount(labels, minlength=class_count).astype(np.float64)
    present = np.count_nonzero(counts)
    per_class = np.divide(len(labels), present * counts, out=np.zeros_like(counts), where=counts > 0)
    return per_class[labels]


class _Optimizer:
    def __init__(self, config: LearnerConfig, shape: tuple[int, ...]):
        self.config = config
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, weights: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.config.optimizer == "sgd":
            return weights - self.config.lr * grad
        beta1, beta2 = ADAM_BETAS
        self.t += 1
        self.m = beta1 * self.m + (1 - beta1) * grad
        self.v = beta2 * self.v + (1 - beta2) * grad * grad
        m_hat = self.m / (1 - beta1**self.t)
        v_hat = self.v / (1 - beta2**self.t)
        return weights - self.config.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def prepare_training(features: FeatureMatrix, cloud: PointCloud) -> TrainingSet:
    """Labeled rows, their labels, class-balance weights and the standardizer fitted on them."""
    rows = cloud.labeled_indices()
    if rows.size == 0:
        raise TrainingError("no labeled points; seed the active-learning loop with labels before training")
    labels = cloud.gt_labels[rows]
    if np.unique(labels).size < 2:
        logger.warning(f"Training on a single class ({labels[0]}); predictions will be constant")
    return TrainingSet(
        rows=rows,
        labels=labels,
        sample_weight=class_balance_weights(labels, cloud.class_count),
        standardizer=Standardizer.fit(features.values[rows]),
    )


def train_member(
    features: FeatureMatrix,
    training: TrainingSet,
    class_count: int,
    hyper: LearnerConfig,
    seed: int,
    aug: AugmentConfig,
) -> Member:
    """
    Mini-batch training of one softmax member.

    The member's seed drives its initialization, shuffling and augmentation draws.
    """
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, INIT_SCALE, size=(class_count, features.width))
    optimizer = _Optimizer(hyper, weights.shape)
    clean = training.standardizer.transform(features.values[training.rows])
    y, sample_weight = training.labels, training.sample_weight
    losses: list[float] = []
    for _ in range(hyper.epochs):
        if aug.enabled:
            aug_seed = int(rng.integers(0, 2**32))
            X = training.standardizer.transform(augmented_feature_rows(features, training.rows, aug, aug_seed))
        else:
            X = clean
        order = rng.permutation(len(y))
        for start in range(0, len(y), hyper.batch):
            batch = order[start : start + hyper.batch]
            _, grad = cross_entropy(weights, X[batch], y[batch], sample_weight[batch], hyper.l2)
            weights = optimizer.step(weights, grad)
        loss, _ = cross_entropy(weights, X, y, sample_weight, hyper.l2)
        losses.append(loss)
    logger.debug(f"train_member: seed={seed} rows={len(y)} final loss={losses[-1]:.5f}")
    return Member(weights=weights, seed=seed, epochs=hyper.epochs, final_loss=losses[-1], loss_history=losses)


def train_ensemble(
    features: FeatureMatrix,
    cloud: PointCloud,
    N: int,
    hyper: LearnerConfig,
    base_seed: int,
    aug: AugmentConfig,
) -> Ensemble:
    """Train N members on the revealed labels; member n uses seed base_seed + n."""
    if N < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {N}")
    training = prepare_training(features, cloud)
    members = [train_member(features, training, cloud.class_count, hyper, base_seed + n, aug) for n in range(N)]
    return Ensemble(members=members, standardizer=training.standardizer, class_count=cloud.class_count)


def predict_proba(ensemble: Ensemble, features: FeatureMatrix) -> np.ndarray:
    """Per-member softmax probabilities, shape (N members, n points, C classes)."""
    if features.width != ensemble.feature_width:
        raise TrainingError(f"feature width {features.width} does not match the ensemble ({ensemble.feature_width})")
    X = ensemble.standardizer.transform(features.values)
    return np.stack([softmax(X @ member.weights.T, axis=1) for member in ensemble.members])


if __name__ == "__main__":
    print(f"surface_variation((4, 2, 1)) = {float(surface_variation([4.0, 2.0, 1.0])):.6f}")
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 5, size=(200, 3))
    moved, _ = augment(pts, np.zeros((200, 3), dtype=np.uint8), AugmentConfig(True, True, True, True), seed=1)
    print(f"Mean displacement under full augmentation: {np.linalg.norm(moved - pts, axis=1).mean():.3f} m")
