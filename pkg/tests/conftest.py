import numpy as np
import pytest

from utils.config import AugmentConfig, ExperimentConfig, LearnerConfig, SelectionBudget, SeparationConfig
from utils.pointcloud import AABB, PointCloud
from utils.regions import Region, RegionKind, RegionSet
from utils.scene import SceneSpec, generate_scene

SMALL_SCENE = SceneSpec(
    extent_x=20.0, extent_y=20.0, density=4.0, buildings=1, trees=3, vegetation_patches=2, streets=1
)

FAST_LEARNER = LearnerConfig(ensemble_size=2, epochs=3, batch=256, k_neighbors=8)


def random_cloud(rng: np.random.Generator, n: int, class_count: int = 3, extent: float = 10.0) -> PointCloud:
    return PointCloud(
        positions=rng.uniform(0.0, extent, size=(n, 3)),
        colors=rng.integers(0, 256, size=(n, 3)),
        gt_labels=rng.integers(0, class_count, size=n),
        class_count=class_count,
    )


def contiguous_regions(cloud: PointCloud, sizes: list[int]) -> RegionSet:
    """Regions made of consecutive point index runs of the given sizes."""
    regions, start = [], 0
    for i, size in enumerate(sizes):
        ids = np.arange(start, start + size)
        selected = cloud.positions[ids]
        bbox = AABB(selected.min(axis=0), selected.max(axis=0))
        regions.append(Region(id=i, kind=RegionKind.COLUMN, point_indices=ids, bbox=bbox))
        start += size
    return RegionSet(regions=regions, n_points=cloud.n)


def fast_config(**overrides) -> ExperimentConfig:
    values = dict(
        separation=SeparationConfig(r=2.0),
        budget=SelectionBudget(amount=0.05),
        initial_budget=SelectionBudget(amount=0.05),
        cycles=2,
        learner=FAST_LEARNER,
        augment=AugmentConfig(),
        seed=3,
    )
    values.update(overrides)
    return ExperimentConfig(**values)


@pytest.fixture(scope="session")
def small_scene() -> PointCloud:
    return generate_scene(SMALL_SCENE)


@pytest.fixture(scope="session")
def small_eval_scene() -> PointCloud:
    return generate_scene(SceneSpec(**{**SMALL_SCENE.__dict__, "seed": 1}))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
