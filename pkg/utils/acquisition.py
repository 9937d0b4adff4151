import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from loguru import logger
from scipy.stats import entropy

from utils.config import BudgetMode, Policy, RedalConfig, SelectionBudget
from utils.errors import BudgetError, ConfigError, RegionError
from utils.metrics import region_area
from utils.pointcloud import PointCloud
from utils.regions import Region, RegionSet, kmeans
from utils.spatial_index import SpatialIndex

# Slack on the point-fraction budget so amount * n landing on an integer is not lost to rounding.
_POINT_BUDGET_SLACK = 1e-9

AreaFn = Callable[[PointCloud, Region], float]


@dataclass(frozen=True)
class AcquisitionScore:
    region_id: int
    score: float
    policy: Policy
    cycle: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise BudgetError(f"region {self.region_id} has a non-finite score {self.score}")


@dataclass(eq=False)
class RedalInputs:
    """Per-point terms and per-region diversity features of the hybrid score."""

    color_discontinuity: np.ndarray
    surface_variation: np.ndarray
    region_features: np.ndarray


def ensemble_mean_proba(tensor: np.ndarray) -> np.ndarray:
    """Member-averaged class distribution per point, shape (n, C)."""
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 3 or tensor.shape[0] < 1:
        raise ConfigError(f"expected an (N >= 1, n, C) probability tensor, got shape {tensor.shape}")
    return tensor.mean(axis=0)


def var_points(tensor: np.ndarray) -> np.ndarray:
    """
    Variation ratio 1 - f_m / N per point.

    Each member votes its argmax class (lowest class id on ties); f_m is the
    count of the modal vote, shared when two classes tie for the maximum.
    """
    tensor = np.asarray(tensor)
    n_members, _, n_classes = tensor.shape
    votes = tensor.argmax(axis=2)
    counts = np.stack([(votes == c).sum(axis=0) for c in range(n_classes)])
    return 1.0 - counts.max(axis=0) / n_members


def var_point(member_rows: np.ndarray) -> float:
    """VaR of one point from its (N, C) member distributions."""
    return float(var_points(np.asarray(member_rows)[:, None, :])[0])


def ent_points(p_hat: np.ndarray) -> np.ndarray:
    """Natural-log Shannon entropy of each row, 0 ln 0 = 0, clamped to [0, ln C]."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    return np.clip(entropy(p_hat, axis=1), 0.0, math.log(p_hat.shape[1]))


def ent_point(p_hat: np.ndarray) -> float:
    return float(ent_points(np.asarray(p_hat)[None, :])[0])


def region_mean(point_scores: np.ndarray, region: Region) -> float:
    if region.size == 0:
        raise RegionError(f"region {region.id} is empty")
    return float(np.mean(np.asarray(point_scores)[region.point_indices]))


def region_means(point_scores: np.ndarray, region_set: RegionSet) -> np.ndarray:
    """Mean of a per-point score (or per-point feature rows) over every region."""
    values = np.asarray(point_scores, dtype=np.float64)
    owner = region_set.membership()
    sizes = region_set.sizes.astype(np.float64)
    if np.any(sizes == 0):
        raise RegionError("region set contains an empty region")
    if values.ndim == 1:
        return np.bincount(owner, weights=values, minlength=len(region_set)) / sizes
    m = len(region_set)
    sums = np.stack([np.bincount(owner, weights=values[:, j], minlength=m) for j in range(values.shape[1])])
    return (sums / sizes).T


def color_discontinuity(cloud: PointCloud, index: SpatialIndex, k: int = 10) -> np.ndarray:
    """Mean RGB distance (channels in [0, 1]) from every point to its k nearest other points."""
    if k < 2:
        raise ConfigError(f"color discontinuity needs k >= 2, got {k}")
    if cloud.n == 1:
        return np.zeros(1)
    neighbors = index.knn_batch(k + 1)[:, 1:]
    colors = cloud.colors.astype(np.float64) / 255.0
    return np.linalg.norm(colors[neighbors] - colors[:, None, :], axis=2).mean(axis=1)


def redal_score(
    region_set: RegionSet,
    softmax_entropy: np.ndarray,
    color_disc: np.ndarray,
    surf_var: np.ndarray,
    config: RedalConfig,
    region_features: np.ndarray,
    seed: int = 0,
    cycle: int = 0,
    candidates: Optional[Sequence[int]] = None,
) -> list[AcquisitionScore]:
    """
    Hybrid region information score with diversity-aware decay.

    base = alpha * mean entropy + beta * mean color discontinuity + gamma * mean
    surface variation. The candidate regions (all regions when `candidates` is None)
    are clustered by their mean feature vectors (`region_features` has one row per
    region id) and, within a cluster, the r-th best base score is multiplied by
    decay ** r. Only candidates are scored.
    """
    config.validate()
    ids = np.arange(len(region_set)) if candidates is None else np.unique(np.asarray(candidates, dtype=np.int64))
    if ids.size == 0:
        raise BudgetError("no candidate regions to score")
    if ids[0] < 0 or ids[-1] >= len(region_set):
        raise RegionError(f"candidate ids must lie in [0, {len(region_set)})")
    if config.k_div > ids.size:
        raise ConfigError(f"k_div={config.k_div} exceeds the candidate region count ({ids.size})")
    base = (
        config.alpha * region_means(softmax_entropy, region_set)
        + config.beta * region_means(color_disc, region_set)
        + config.gamma * region_means(surf_var, region_set)
    )
    clusters = kmeans(np.asarray(region_features)[ids], config.k_div, seed=seed).assignments
    final = base.copy()
    for cluster in np.unique(clusters):
        members = ids[clusters == cluster]
        ranked = members[np.lexsort((members, -base[members]))]
        final[ranked] = base[ranked] * config.decay ** np.arange(len(ranked))
    return [AcquisitionScore(int(i), float(final[i]), Policy.REDAL, cycle) for i in ids]


def score_regions(
    policy: Policy,
    tensor: np.ndarray,
    region_set: RegionSet,
    cycle: int,
    redal: Optional[RedalConfig] = None,
    redal_inputs: Optional[RedalInputs] = None,
    seed: int = 0,
    candidates: Optional[Sequence[int]] = None,
) -> list[AcquisitionScore]:
    """
    Region scores of an uncertainty policy from the ensemble's probability tensor.

    `candidates` restricts redal to the regions still open for selection; the
    per-region policies score every region.
    """
    if policy == Policy.AVG_VAR:
        values = region_means(var_points(tensor), region_set)
    elif policy == Policy.AVG_ENT:
        values = region_means(ent_points(ensemble_mean_proba(tensor)), region_set)
    elif policy == Policy.REDAL:
        if redal is None or redal_inputs is None:
            raise ConfigError("the redal policy needs its weights and per-point inputs")
        source = tensor[0] if redal.single_member else ensemble_mean_proba(tensor)
        return redal_score(
            region_set,
            ent_points(source),
            redal_inputs.color_discontinuity,
            redal_inputs.surface_variation,
            redal,
            redal_inputs.region_features,
            seed=seed,
            cycle=cycle,
            candidates=candidates,
        )
    else:
        raise ConfigError(f"policy {policy.value} does not score regions")
    return [AcquisitionScore(i, float(v), policy, cycle) for i, v in enumerate(values)]


def _greedy_fill(
    ordered_ids: Iterable[int], budget: SelectionBudget, region_set: RegionSet, cloud: PointCloud, area_fn: AreaFn
) -> list[int]:
    """Take regions in order until the next one would exceed the budget; always at least one."""
    budget.validate()
    if budget.mode == BudgetMode.POINT_FRACTION:
        limit = budget.amount * cloud.n + _POINT_BUDGET_SLACK
    else:
        limit = budget.amount
    selected: list[int] = []
    spent = 0.0
    for region_id in ordered_ids:
        region = region_set[region_id]
        if budget.mode == BudgetMode.POINT_FRACTION:
            cost = float(region.size)
        elif budget.mode == BudgetMode.AREA_M2:
            cost = area_fn(cloud, region)
        else:
            cost = 1.0
        if selected and spent + cost > limit:
            break
        selected.append(int(region_id))
        spent += cost
        if spent > limit:
            break
    return selected


def select_regions(
    scores: list[AcquisitionScore],
    unlabeled_regions: Iterable[int],
    budget: SelectionBudget,
    region_set: RegionSet,
    cloud: PointCloud,
    area_fn: AreaFn = region_area,
) -> list[int]:
    """
    Greedy budget fill over unlabeled regions by descending score (ties to the lower id).

    Returns:
        Selected region ids in selection order
    """
    candidates = set(int(i) for i in unlabeled_regions)
    if not candidates:
        raise BudgetError("no unlabeled regions left to select from")
    ranked = sorted((s for s in scores if s.region_id in candidates), key=lambda s: (-s.score, s.region_id))
    if not ranked:
        raise BudgetError("none of the scored regions is unlabeled")
    selected = _greedy_fill([s.region_id for s in ranked], budget, region_set, cloud, area_fn)
    logger.debug(f"select_regions: {len(selected)} of {len(candidates)} candidates, top score {ranked[0].score:.5f}")
    return selected


def random_policy(
    unlabeled_regions: Iterable[int],
    budget: SelectionBudget,
    seed: int,
    region_set: RegionSet,
    cloud: PointCloud,
    area_fn: AreaFn = region_area,
) -> list[int]:
    """Seeded uniform shuffle of the candidates followed by the same greedy budget fill."""
    candidates = np.array(sorted(set(int(i) for i in unlabeled_regions)), dtype=np.int64)
    if candidates.size == 0:
        raise BudgetError("no unlabeled regions left to select from")
    order = np.random.default_rng(seed).permutation(candidates)
    return _greedy_fill(order.tolist(), budget, region_set, cloud, area_fn)


if __name__ == "__main__":
    demo = np.array([[[1.0, 0.0], [0.5, 0.5]], [[0.0, 1.0], [0.5, 0.5]]])
    print(f"p_hat = {ensemble_mean_proba(demo).tolist()}")
    print(f"VaR = {var_points(demo).tolist()}, Ent = {ent_points(ensemble_mean_proba(demo)).tolist()}")
