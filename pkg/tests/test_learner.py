import numpy as np
import pytest
from scipy.spatial.distance import pdist

from tests.conftest import FAST_LEARNER, random_cloud
from utils.config import AugmentConfig, LearnerConfig
from utils.errors import ConfigError, TrainingError
from utils.learner import (
    BIAS_COLUMN,
    COLOR_COLUMNS,
    FEATURE_NAMES,
    Augmentation,
    Ensemble,
    FeatureMatrix,
    Member,
    Standardizer,
    augment,
    augmented_feature_rows,
    class_balance_weights,
    cross_entropy,
    extract_features,
    predict_proba,
    prepare_training,
    surface_variation,
    train_ensemble,
    train_member,
)
from utils.pointcloud import PointCloud
from utils.regions import PlaneModel, fit_ground_plane
from utils.spatial_index import SpatialIndex

NO_AUGMENT = AugmentConfig.from_letters("none")
FLAT_GROUND = PlaneModel(normal=np.array([0.0, 0.0, 1.0]), offset=0.0, inlier_threshold=0.1)


def random_features(rng, n, width=len(FEATURE_NAMES)):
    values = rng.normal(size=(n, width))
    values[:, BIAS_COLUMN] = 1.0
    return FeatureMatrix(values=values)


def labeled_cloud(rng, n, class_count=3):
    cloud = random_cloud(rng, n, class_count=class_count)
    cloud.known_mask[:] = True
    return cloud


def single_member(weights, values):
    member = Member(weights=np.asarray(weights, dtype=np.float64), seed=0, epochs=0, final_loss=0.0)
    return Ensemble(members=[member], standardizer=Standardizer.fit(values), class_count=member.weights.shape[0])


class TestSurfaceVariation:
    @pytest.mark.parametrize(
        "eigenvalues, expected",
        [((1, 1, 0), 0.0), ((1, 1, 1), 1.0 / 3.0), ((4, 2, 1), 1.0 / 7.0), ((0, 0, 0), 0.0), ((1e-19, 0, 0), 0.0)],
    )
    def test_examples(self, eigenvalues, expected):
        assert float(surface_variation(eigenvalues)) == pytest.approx(expected, abs=1e-12)

    def test_vectorized(self):
        np.testing.assert_allclose(surface_variation([[1, 1, 0], [4, 2, 1]]), [0.0, 1.0 / 7.0])


class TestFeatures:
    def flat_grid(self, colors=None):
        xs, ys = np.meshgrid(np.arange(10) * 0.2, np.arange(10) * 0.2, indexing="ij")
        positions = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(100)])
        colors = np.full((100, 3), 128) if colors is None else colors
        return PointCloud(positions, colors, np.zeros(100, dtype=int), class_count=2)

    def test_flat_grid_has_zero_height_and_variation(self):
        cloud = self.flat_grid()
        features = extract_features(cloud, SpatialIndex(cloud.positions), FLAT_GROUND, k_neighbors=8)
        assert features.values.shape == (100, len(FEATURE_NAMES))
        np.testing.assert_allclose(features.column("height"), 0.0, atol=1e-12)
        np.testing.assert_allclose(features.column("surface_variation"), 0.0, atol=1e-12)
        np.testing.assert_allclose(features.column("normal_z"), 1.0, atol=1e-9)
        np.testing.assert_array_equal(features.column("bias"), 1.0)

    def test_single_color_gives_constant_color_columns(self):
        features = extract_features(self.flat_grid(), SpatialIndex(self.flat_grid().positions), FLAT_GROUND)
        colors = features.values[:, COLOR_COLUMNS]
        np.testing.assert_array_equal(colors, np.full_like(colors, 128 / 255.0))

    def test_density_is_capped_fraction(self, rng):
        cloud = random_cloud(rng, 300, extent=2.0)
        density = extract_features(cloud, SpatialIndex(cloud.positions), FLAT_GROUND).column("density")
        assert np.all((density >= 0.0) & (density <= 1.0))

    def test_collinear_neighbourhood_is_degenerate(self):
        positions = np.column_stack([np.arange(20) * 0.1, np.zeros(20), np.zeros(20)])
        cloud = PointCloud(positions, np.zeros((20, 3)), np.zeros(20, dtype=int), class_count=2)
        features = extract_features(cloud, SpatialIndex(positions), FLAT_GROUND, k_neighbors=5)
        np.testing.assert_array_equal(features.column("surface_variation"), 0.0)
        np.testing.assert_array_equal(features.column("normal_z"), 1.0)

    def test_height_follows_plane(self):
        cloud = self.flat_grid()
        lifted = PlaneModel(normal=np.array([0.0, 0.0, 1.0]), offset=-1.5, inlier_threshold=0.1)
        features = extract_features(cloud, SpatialIndex(cloud.positions), lifted)
        np.testing.assert_allclose(features.column("height"), 1.5)

    def test_small_k_is_rejected(self):
        cloud = self.flat_grid()
        with pytest.raises(ConfigError):
            extract_features(cloud, SpatialIndex(cloud.positions), FLAT_GROUND, k_neighbors=2)


class TestCrossEntropy:
    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(5)
        step = 1e-5
        for _ in range(20):
            n, C, F = int(rng.integers(2, 30)), int(rng.integers(2, 6)), int(rng.integers(1, 9))
            W = rng.normal(size=(C, F))
            X = rng.normal(size=(n, F))
            y = rng.integers(0, C, size=n)
            sw = rng.uniform(0.1, 2.0, size=n)
            l2 = float(rng.uniform(0.0, 0.1))
            _, grad = cross_entropy(W, X, y, sw, l2)
            numeric = np.zeros_like(W)
            for idx in np.ndindex(*W.shape):
                plus, minus = W.copy(), W.copy()
                plus[idx] += step
                minus[idx] -= step
                loss_plus, loss_minus = cross_entropy(plus, X, y, sw, l2)[0], cross_entropy(minus, X, y, sw, l2)[0]
                numeric[idx] = (loss_plus - loss_minus) / (2 * step)
            scale = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-12)
            assert np.linalg.norm(grad - numeric) / scale <= 1e-4

    def test_zero_weights_give_log_c(self):
        X = np.ones((4, 2))
        loss, _ = cross_entropy(np.zeros((3, 2)), X, np.array([0, 1, 2, 0]), np.ones(4), 0.0)
        assert loss == pytest.approx(np.log(3.0))


class TestClassBalance:
    def test_present_classes_weigh_equally(self):
        weights = class_balance_weights(np.array([0, 0, 0, 1]), 3)
        np.testing.assert_allclose(weights, [2 / 3, 2 / 3, 2 / 3, 2.0])

    def test_standardizer_keeps_bias(self, rng):
        values = random_features(rng, 50).values
        scaler = Standardizer.fit(values)
        transformed = scaler.transform(values)
        np.testing.assert_array_equal(transformed[:, BIAS_COLUMN], 1.0)
        np.testing.assert_allclose(transformed[:, 0].mean(), 0.0, atol=1e-12)

    def test_constant_column_stays_finite(self, rng):
        values = random_features(rng, 20).values
        values[:, 2] = 0.4
        assert np.all(np.isfinite(Standardizer.fit(values).transform(values)))


class TestTraining:
    def test_full_batch_loss_is_non_increasing(self, rng):
        features, cloud = random_features(rng, 120), labeled_cloud(rng, 120)
        hyper = LearnerConfig(lr=0.05, epochs=40, batch=1000, l2=1e-4)
        training = prepare_training(features, cloud)
        member = train_member(features, training, 3, hyper, seed=1, aug=NO_AUGMENT)
        assert len(member.loss_history) == 40
        assert all(b <= a + 1e-12 for a, b in zip(member.loss_history, member.loss_history[1:]))
        assert member.final_loss == member.loss_history[-1]

    def test_two_separable_points_are_fit(self):
        values = np.array([[-1.0, 0, 0, 0, 0, 1, 0, 1], [1.0, 0, 0, 0, 0, 1, 0, 1]])
        cloud = PointCloud([[0, 0, 0], [1, 0, 0]], np.zeros((2, 3)), [0, 1], class_count=2, known_mask=[True, True])
        features = FeatureMatrix(values=values)
        hyper = LearnerConfig(ensemble_size=1, lr=0.5, epochs=200, l2=0.0)
        ensemble = train_ensemble(features, cloud, 1, hyper, base_seed=0, aug=NO_AUGMENT)
        assert predict_proba(ensemble, features)[0].argmax(axis=1).tolist() == [0, 1]

    def test_same_seed_gives_identical_weights(self, rng):
        features, cloud = random_features(rng, 80), labeled_cloud(rng, 80)
        a = train_ensemble(features, cloud, 3, FAST_LEARNER, base_seed=7, aug=NO_AUGMENT)
        b = train_ensemble(features, cloud, 3, FAST_LEARNER, base_seed=7, aug=NO_AUGMENT)
        for left, right in zip(a.members, b.members):
            np.testing.assert_array_equal(left.weights, right.weights)
        assert [m.seed for m in a.members] == [7, 8, 9]
        assert not np.array_equal(a.members[0].weights, a.members[1].weights)

    def test_no_labels_is_an_error(self, rng):
        with pytest.raises(TrainingError, match="seed"):
            train_ensemble(random_features(rng, 10), random_cloud(rng, 10), 2, FAST_LEARNER, 0, NO_AUGMENT)

    def test_augmented_training_on_scene(self, small_scene):
        cloud = small_scene.copy()
        cloud.known_mask[cloud.has_gt] = True
        ground, _ = fit_ground_plane(cloud)
        features = extract_features(cloud, SpatialIndex(cloud.positions), ground, k_neighbors=8)
        full = AugmentConfig(scale=True, rotation=True, elastic=True, chromatic=True)
        a = train_ensemble(features, cloud, 2, FAST_LEARNER, base_seed=0, aug=full)
        b = train_ensemble(features, cloud, 2, FAST_LEARNER, base_seed=0, aug=full)
        for left, right in zip(a.members, b.members):
            assert np.all(np.isfinite(left.weights))
            np.testing.assert_array_equal(left.weights, right.weights)

    def test_chromatic_rows_only_touch_colors(self, small_scene):
        ground, _ = fit_ground_plane(small_scene)
        features = extract_features(small_scene, SpatialIndex(small_scene.positions), ground, k_neighbors=8)
        rows = np.arange(0, small_scene.n, 7)
        shifted = augmented_feature_rows(features, rows, AugmentConfig.from_letters("C"), seed=4)
        untouched = np.ones(len(FEATURE_NAMES), dtype=bool)
        untouched[COLOR_COLUMNS] = False
        np.testing.assert_array_equal(shifted[:, untouched], features.values[rows][:, untouched])
        assert np.all(np.abs(shifted[:, COLOR_COLUMNS] - features.values[rows][:, COLOR_COLUMNS]) <= 10 / 255 + 1e-12)


class TestPredict:
    def test_zero_weights_are_uniform(self, rng):
        features = random_features(rng, 30)
        proba = predict_proba(single_member(np.zeros((4, 8)), features.values), features)
        assert proba.shape == (1, 30, 4)
        np.testing.assert_allclose(proba, 0.25)

    def test_large_logit_saturates(self, rng):
        features = random_features(rng, 5)
        weights = np.zeros((3, 8))
        weights[0, BIAS_COLUMN] = 1000.0
        proba = predict_proba(single_member(weights, features.values), features)[0]
        np.testing.assert_allclose(proba, [[1.0, 0.0, 0.0]] * 5, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        features = random_features(rng, 200)
        members = [Member(weights=rng.normal(0, 5, size=(5, 8)), seed=s, epochs=0, final_loss=0.0) for s in range(3)]
        ensemble = Ensemble(members=members, standardizer=Standardizer.fit(features.values), class_count=5)
        proba = predict_proba(ensemble, features)
        np.testing.assert_allclose(proba.sum(axis=2), 1.0, atol=1e-9)
        assert np.all((proba >= 0) & (proba <= 1))

    def test_width_mismatch(self, rng):
        features = random_features(rng, 10)
        with pytest.raises(TrainingError):
            predict_proba(single_member(np.zeros((2, 8)), features.values), random_features(rng, 10, width=5))

    def test_ensemble_rejects_non_finite_weights(self, rng):
        with pytest.raises(TrainingError):
            single_member(np.full((2, 8), np.nan), random_features(rng, 4).values)


class TestAugment:
    def scatter(self, rng, n=60):
        return rng.uniform(0.0, 5.0, size=(n, 3)), rng.integers(0, 256, size=(n, 3)).astype(np.uint8)

    def test_all_off_is_identity(self, rng):
        positions, colors = self.scatter(rng)
        moved, shifted = augment(positions, colors, NO_AUGMENT, seed=1)
        np.testing.assert_array_equal(moved, positions)
        np.testing.assert_array_equal(shifted, colors)

    def test_rotation_is_an_isometry_about_z(self, rng):
        positions, colors = self.scatter(rng)
        moved, shifted = augment(positions, colors, AugmentConfig.from_letters("R"), seed=2)
        np.testing.assert_allclose(pdist(moved), pdist(positions), atol=1e-9)
        np.testing.assert_allclose(moved[:, 2], positions[:, 2], atol=1e-12)
        np.testing.assert_array_equal(shifted, colors)

    def test_chromatic_is_bounded(self, rng):
        positions, colors = self.scatter(rng)
        moved, shifted = augment(positions, colors, AugmentConfig.from_letters("C"), seed=3)
        np.testing.assert_array_equal(moved, positions)
        assert np.all(np.abs(shifted.astype(int) - colors.astype(int)) <= 10)

    def test_scale_stays_in_range(self, rng):
        positions, colors = self.scatter(rng)
        moved, _ = augment(positions, colors, AugmentConfig.from_letters("S"), seed=4)
        ratio = pdist(moved) / pdist(positions)
        assert np.ptp(ratio) < 1e-9
        assert 0.9 <= ratio[0] <= 1.1

    def test_elastic_displacement_is_small(self, rng):
        positions, colors = self.scatter(rng)
        moved, _ = augment(positions, colors, AugmentConfig.from_letters("E"), seed=5)
        assert 0 < np.abs(moved - positions).max() < 0.5

    def test_deterministic_under_seed(self, rng):
        positions, colors = self.scatter(rng)
        full = AugmentConfig.from_letters("SREC")
        a, b = augment(positions, colors, full, seed=9), augment(positions, colors, full, seed=9)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_plane_follows_rotation_and_scale(self, rng):
        xy = rng.uniform(0.0, 8.0, size=(40, 2))
        positions = np.column_stack([xy, np.full(40, 0.5)])
        plane = PlaneModel(normal=np.array([0.0, 0.0, 1.0]), offset=0.5, inlier_threshold=0.1)
        augmentation = Augmentation.sample(AugmentConfig.from_letters("SR"), 6, positions)
        moved, _ = augmentation.apply(positions, np.zeros((40, 3), dtype=np.uint8))
        np.testing.assert_allclose(augmentation.transform_plane(plane).signed_distance(moved), 0.0, atol=1e-9)
