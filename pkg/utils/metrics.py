from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional, Union

import numpy as np

from utils.errors import MetricError, RegionError
from utils.pointcloud import NO_LABEL, PointCloud, bounding_box
from utils.regions import Region

if TYPE_CHECKING:
    from utils.experiment_log import ExperimentLog

TARGET_FRACTION = 0.9


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[g, p] = points with ground truth g predicted as p."""

    counts: np.ndarray
    ignore: frozenset[int] = field(default_factory=frozenset)

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class BudgetReport:
    labeled_points: int
    labeled_fraction: float
    labeled_area_m2: float


def confusion(pred, gt, class_count: int, ignore: Iterable[int] = ()) -> ConfusionMatrix:
    """
    Tally predictions against ground truth.

    Points whose ground truth is -1 or in `ignore` are not counted.
    """
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise MetricError(f"prediction and ground truth lengths differ ({len(pred)} vs {len(gt)})")
    ignore = frozenset(int(c) for c in ignore)
    if np.any(gt < NO_LABEL) or np.any(gt >= class_count):
        raise MetricError(f"ground truth label out of range for {class_count} classes")
    evaluated = (gt != NO_LABEL) & ~np.isin(gt, list(ignore))
    if np.any(pred[evaluated] < 0) or np.any(pred[evaluated] >= class_count):
        raise MetricError(f"predicted label out of range for {class_count} classes")
    flat = gt[evaluated] * class_count + pred[evaluated]
    counts = np.bincount(flat, minlength=class_count * class_count).reshape(class_count, class_count)
    return ConfusionMatrix(counts=counts, ignore=ignore)


def miou(cm: ConfusionMatrix) -> tuple[float, list[float]]:
    """
    Mean IoU over classes with support.

    Returns:
        (mIoU, per-class IoU); classes without support or in the ignore set are nan
    """
    if cm.total == 0:
        raise MetricError("confusion matrix is empty; nothing was evaluated")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fn = counts.sum(axis=1) - tp
    fp = counts.sum(axis=0) - tp
    union = tp + fp + fn
    supported = union > 0
    supported[list(c for c in cm.ignore if 0 <= c < cm.class_count)] = False
    iou = np.full(cm.class_count, np.nan)
    iou[supported] = tp[supported] / union[supported]
    return float(np.mean(iou[supported])), iou.tolist()


def miou_at_90(full_supervised_miou: float) -> float:
    if not 0.0 <= full_supervised_miou <= 1.0:
        raise MetricError(f"mIoU must lie in [0, 1], got {full_supervised_miou}")
    return TARGET_FRACTION * full_supervised_miou


def region_area(cloud: PointCloud, region: Union[Region, np.ndarray]) -> float:
    """
    Annotation-effort area dx*dy + dx*dz + dy*dz of the axis-aligned box around the region's points.

    Accepts a Region or a plain index array.
    """
    indices = region.point_indices if isinstance(region, Region) else region
    if len(indices) == 0:
        raise RegionError("region_area needs a non-empty region")
    dx, dy, dz = bounding_box(cloud, indices).extent
    return float(dx * dy + dx * dz + dy * dz)


def budget_report(cloud: PointCloud, labeled_regions: Iterable[Region]) -> BudgetReport:
    """Labeled points (with ground truth), their fraction of all ground-truth points and the summed area."""
    regions = list(labeled_regions)
    if not regions:
        return BudgetReport(0, 0.0, 0.0)
    indices = np.concatenate([r.point_indices for r in regions])
    if np.unique(indices).size != indices.size:
        raise RegionError("labeled regions overlap")
    labeled = int(np.count_nonzero(cloud.has_gt[indices]))
    annotated = int(np.count_nonzero(cloud.has_gt))
    fraction = labeled / annotated if annotated else 0.0
    area = float(sum(region_area(cloud, r) for r in regions))
    return BudgetReport(labeled_points=labeled, labeled_fraction=fraction, labeled_area_m2=area)


def budget_at_target(log: "ExperimentLog", target_miou: float) -> Optional[tuple[float, float]]:
    """(labeled_fraction, labeled_area_m2) of the first cycle reaching target_miou, or None."""
    for row in log.rows:
        if row.miou >= target_miou:
            return row.labeled_fraction, row.labeled_area_m2
    return None


@dataclass(frozen=True)
class SeedSummary:
    """Spread of one configuration's runs over seeds; std is the sample deviation (0 for a single value)."""

    runs: int
    miou_mean: float
    miou_std: float
    reached: int = 0
    fraction_mean: float = float("nan")
    fraction_std: float = float("nan")
    area_mean: float = float("nan")
    area_std: float = float("nan")


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    data = np.asarray(values, dtype=np.float64)
    return float(data.mean()), float(data.std(ddof=1)) if data.size > 1 else 0.0


def summarize_seeds(logs: list["ExperimentLog"], targets: Optional[list[Optional[float]]] = None) -> SeedSummary:
    """
    Mean and standard deviation of the final mIoU over runs that differ only by seed.

    With per-run mIoU targets the labeled fraction and area at the first crossing
    are summarized over the runs that reached their target.
    """
    if not logs or any(not log.rows for log in logs):
        raise MetricError("every run needs at least one logged cycle")
    miou_mean, miou_std = _mean_std([log.rows[-1].miou for log in logs])
    if targets is None:
        return SeedSummary(len(logs), miou_mean, miou_std)
    if len(targets) != len(logs):
        raise MetricError(f"{len(targets)} targets for {len(logs)} runs")
    crossings = [budget_at_target(log, t) for log, t in zip(logs, targets) if t is not None]
    crossings = [c for c in crossings if c is not None]
    fraction_mean, fraction_std = _mean_std([c[0] for c in crossings])
    area_mean, area_std = _mean_std([c[1] for c in crossings])
    return SeedSummary(
        runs=len(logs),
        miou_mean=miou_mean,
        miou_std=miou_std,
        reached=len(crossings),
        fraction_mean=fraction_mean,
        fraction_std=fraction_std,
        area_mean=area_mean,
        area_std=area_std,
    )
