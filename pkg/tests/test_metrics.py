import math

import numpy as np
import pytest

from tests.conftest import contiguous_regions, random_cloud
from utils.errors import MetricError, RegionError
from utils.experiment_log import ExperimentLog, LogRow
from utils.metrics import (
    BudgetReport,
    budget_at_target,
    budget_report,
    confusion,
    miou,
    miou_at_90,
    region_area,
    summarize_seeds,
)
from utils.pointcloud import PointCloud
from utils.regions import assign_columns
from utils.scene import SceneSpec, generate_scene


def box_cloud(positions):
    n = len(positions)
    return PointCloud(positions, np.zeros((n, 3)), np.zeros(n, dtype=int), class_count=2)


class TestConfusion:
    def test_perfect_prediction_is_diagonal(self, rng):
        gt = rng.integers(0, 4, size=100)
        cm = confusion(gt, gt, 4)
        np.testing.assert_array_equal(cm.counts, np.diag(np.bincount(gt, minlength=4)))
        assert cm.total == 100

    def test_unlabeled_points_are_skipped(self):
        assert confusion([0, 1, 1], [-1, -1, -1], 2).total == 0

    def test_hand_built_case(self):
        cm = confusion([0, 1, 1, 0], [0, 1, 0, -1], 2)
        np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 1]])

    def test_ignore_set(self):
        cm = confusion([0, 1, 2, 2], [0, 1, 2, 1], 3, ignore=[1])
        np.testing.assert_array_equal(cm.counts, [[1, 0, 0], [0, 0, 0], [0, 0, 1]])
        assert cm.ignore == frozenset({1})

    @pytest.mark.parametrize("pred, gt", [([0, 1], [0]), ([0, 3], [0, 1]), ([0, 1], [0, 2]), ([-1, 1], [0, 1])])
    def test_invalid_labels(self, pred, gt):
        with pytest.raises(MetricError):
            confusion(pred, gt, 2)


class TestMiou:
    def test_perfect(self, rng):
        gt = rng.integers(0, 3, size=50)
        score, ious = miou(confusion(gt, gt, 3))
        assert score == 1.0
        assert ious == [1.0, 1.0, 1.0]

    def test_hand_evaluation(self):
        cm = confusion([0, 1, 0, 1], [0, 0, 1, 1], 2)
        np.testing.assert_array_equal(cm.counts, [[1, 1], [1, 1]])
        score, ious = miou(cm)
        assert score == pytest.approx(1 / 3)
        assert ious == pytest.approx([1 / 3, 1 / 3])

    def test_absent_class_is_excluded(self):
        score, ious = miou(confusion([0, 1, 1], [0, 1, 1], 3))
        assert score == 1.0
        assert math.isnan(ious[2])

    def test_ignored_class_is_excluded(self):
        score, ious = miou(confusion([0, 0, 1], [0, 1, 1], 2, ignore=[0]))
        assert math.isnan(ious[0])
        assert score == pytest.approx(0.5)

    def test_empty_matrix(self):
        with pytest.raises(MetricError):
            miou(confusion([0], [-1], 2))

    @pytest.mark.parametrize("C", [2, 3, 5])
    def test_random_prediction_near_reference(self, C):
        rng = np.random.default_rng(C)
        gt = rng.integers(0, C, size=200_000)
        pred = rng.integers(0, C, size=200_000)
        score, _ = miou(confusion(pred, gt, C))
        assert abs(score - 1.0 / (2 * C - 1)) <= 0.05


class TestMiouAt90:
    @pytest.mark.parametrize("value, expected", [(1.0, 0.9), (0.0, 0.0), (0.613, 0.5517)])
    def test_examples(self, value, expected):
        assert miou_at_90(value) == pytest.approx(expected, abs=1e-9)

    def test_out_of_range(self):
        with pytest.raises(MetricError):
            miou_at_90(1.2)


class TestRegionArea:
    def test_examples(self):
        assert region_area(box_cloud([[1, 2, 3]]), np.array([0])) == 0.0
        assert region_area(box_cloud([[0, 0, 0], [1, 1, 1]]), np.array([0, 1])) == 3.0
        assert region_area(box_cloud([[0, 0, 0], [2, 3, 1]]), np.array([0, 1])) == 11.0

    def test_translation_invariance(self, rng):
        positions = rng.uniform(0, 4, size=(30, 3))
        ids = np.arange(30)
        base = region_area(box_cloud(positions), ids)
        assert region_area(box_cloud(positions + [100.0, -50.0, 7.0]), ids) == pytest.approx(base, rel=1e-9)

    def test_adding_points_never_shrinks(self, rng):
        cloud = box_cloud(rng.uniform(0, 4, size=(40, 3)))
        areas = [region_area(cloud, np.arange(k)) for k in range(1, 41)]
        assert all(b >= a for a, b in zip(areas, areas[1:]))

    def test_empty_region(self, rng):
        with pytest.raises(RegionError):
            region_area(random_cloud(rng, 3), np.array([], dtype=np.int64))

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(5))
    def test_scattered_points_cover_more_than_columns(self, seed):
        cloud = generate_scene(SceneSpec(seed=seed))
        regions = assign_columns(cloud, 0.5)
        m = round(0.01 * cloud.n)
        rng = np.random.default_rng(seed)
        chosen, held = [], 0
        for region_id in rng.permutation(len(regions)):
            if held >= m:
                break
            chosen.append(regions[int(region_id)])
            held += chosen[-1].size
        column_area = sum(region_area(cloud, region) for region in chosen)
        sample = rng.choice(cloud.n, size=m, replace=False)
        assert region_area(cloud, sample) >= 5 * column_area


class TestBudgetReport:
    def test_no_regions(self, rng):
        assert budget_report(random_cloud(rng, 5), []) == BudgetReport(0, 0.0, 0.0)

    def test_hand_areas_add_up(self):
        cloud = box_cloud([[0, 0, 0], [1, 1, 1], [5, 5, 5], [7, 8, 6]])
        regions = contiguous_regions(cloud, [2, 2])
        report = budget_report(cloud, list(regions))
        assert report.labeled_points == 4
        assert report.labeled_fraction == 1.0
        assert report.labeled_area_m2 == 14.0

    def test_fraction_counts_ground_truth_only(self):
        positions = np.arange(12, dtype=float).reshape(4, 3)
        cloud = PointCloud(positions, np.zeros((4, 3)), [0, -1, 1, 1], class_count=2)
        regions = contiguous_regions(cloud, [2, 2])
        report = budget_report(cloud, [regions[0]])
        assert report.labeled_points == 1
        assert report.labeled_fraction == pytest.approx(1 / 3)

    def test_overlap_is_rejected(self, rng):
        cloud = random_cloud(rng, 6)
        regions = contiguous_regions(cloud, [3, 3])
        with pytest.raises(RegionError):
            budget_report(cloud, [regions[0], regions[0]])


class TestBudgetAtTarget:
    def test_first_row_reaching_target(self):
        log = ExperimentLog(class_count=1)
        for cycle, (fraction, area, score) in enumerate([(0.1, 5.0, 0.3), (0.2, 9.0, 0.55), (0.3, 12.0, 0.7)]):
            log.append(LogRow(cycle, cycle * 10, fraction, area, score, [score]))
        assert budget_at_target(log, 0.5) == (0.2, 9.0)
        assert budget_at_target(log, 0.9) is None


def make_log(points):
    log = ExperimentLog(class_count=1)
    for cycle, (fraction, area, score) in enumerate(points):
        log.append(LogRow(cycle, cycle * 10, fraction, area, score, [score]))
    return log


class TestSummarizeSeeds:
    def test_final_miou_spread(self):
        logs = [make_log([(0.1, 5.0, 0.3), (0.2, 8.0, 0.5)]), make_log([(0.1, 5.0, 0.4), (0.2, 9.0, 0.7)])]
        summary = summarize_seeds(logs)
        assert summary.runs == 2
        assert summary.miou_mean == pytest.approx(0.6)
        assert summary.miou_std == pytest.approx(math.sqrt(0.02))
        assert summary.reached == 0 and math.isnan(summary.fraction_mean)

    def test_crossings_over_runs_that_reach(self):
        logs = [make_log([(0.1, 5.0, 0.3), (0.2, 8.0, 0.5)]), make_log([(0.1, 5.0, 0.4), (0.2, 9.0, 0.7)])]
        summary = summarize_seeds(logs, [0.55, 0.6])
        assert summary.reached == 1
        assert (summary.fraction_mean, summary.fraction_std) == (0.2, 0.0)
        assert (summary.area_mean, summary.area_std) == (9.0, 0.0)

    def test_single_run_has_zero_spread(self):
        summary = summarize_seeds([make_log([(0.5, 3.0, 0.8)])], [0.5])
        assert (summary.miou_std, summary.reached, summary.fraction_mean) == (0.0, 1, 0.5)

    def test_rejects_bad_input(self):
        with pytest.raises(MetricError):
            summarize_seeds([])
        with pytest.raises(MetricError):
            summarize_seeds([ExperimentLog(class_count=1)])
        with pytest.raises(MetricError):
            summarize_seeds([make_log([(0.5, 3.0, 0.8)])], [0.5, 0.6])
