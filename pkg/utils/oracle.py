from dataclasses import dataclass, field

import numpy as np
from loguru import logger

from utils.acquisition import random_policy
from utils.config import SelectionBudget
from utils.errors import BudgetError, RegionError
from utils.pointcloud import PointCloud
from utils.regions import Region, RegionSet


@dataclass(eq=False)
class Oracle:
    """Simulated annotator: reveals ground truth into the cloud's known_mask, one region at a time."""

    cloud: PointCloud
    consumed: set[int] = field(default_factory=set)

    @property
    def labeled_regions(self) -> list[int]:
        return sorted(self.consumed)

    def unlabeled(self, region_set: RegionSet) -> list[int]:
        return [r.id for r in region_set if r.id not in self.consumed]

    def reveal(self, region: Region) -> int:
        """Mark every point of the region with ground truth as known; returns how many became known."""
        if region.id in self.consumed:
            raise RegionError(f"region {region.id} is already labeled")
        self.consumed.add(region.id)
        idx = region.point_indices
        newly = self.cloud.has_gt[idx] & ~self.cloud.known_mask[idx]
        self.cloud.known_mask[idx[newly]] = True
        return int(np.count_nonzero(newly))


def oracle_reveal(oracle: Oracle, region: Region) -> int:
    return oracle.reveal(region)


def seed_labels(oracle: Oracle, region_set: RegionSet, initial_budget: SelectionBudget, seed: int) -> list[int]:
    """Randomly label the initial regions under `initial_budget` and return their ids."""
    if len(region_set) == 0:
        raise BudgetError("cannot seed labels on an empty region set")
    selected = random_policy(oracle.unlabeled(region_set), initial_budget, seed, region_set, oracle.cloud)
    revealed = sum(oracle.reveal(region_set[i]) for i in selected)
    logger.info(f"seed_labels: {len(selected)} regions, {revealed} labels revealed")
    return selected
