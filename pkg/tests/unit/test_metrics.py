"""Unit tests for metrics module."""

import numpy as np
import pytest

from tbad_synth.config import EvalConfig
from tbad_synth.errors import ArtifactError, NumericalError, TrainingError, ValidationError
from tbad_synth.metrics import (
    DEFAULT_SSIM,
    DiceStats,
    FeatureEncoder,
    _init_encoder,
    balanced_accuracy,
    classifier_accuracy,
    dice,
    fid,
    frechet_distance,
    load_encoder,
    ms_ssim,
    ms_ssim_detail,
    ms_ssim_levels,
    pair_msssim,
    save_encoder,
    ssim,
    train_feature_encoder,
)
from tbad_synth.numerics import make_rng
from tbad_synth.phantom import stack


@pytest.fixture
def images():
    rng = make_rng(0, "images")
    return rng.random((2, 32, 32))


@pytest.fixture
def encoder():
    return FeatureEncoder(weights=_init_encoder(make_rng(0, "enc"), 32), size=32)


def brute_force_ssim(a, b, p=DEFAULT_SSIM):
    win = p.window()
    k = p.win_size
    c1, c2 = (p.k1 * p.data_range) ** 2, (p.k2 * p.data_range) ** 2
    values = []
    for i in range(a.shape[0] - k + 1):
        for j in range(a.shape[1] - k + 1):
            pa, pb = a[i : i + k, j : j + k], b[i : i + k, j : j + k]
            mu_a, mu_b = np.sum(win * pa), np.sum(win * pb)
            var_a = np.sum(win * pa * pa) - mu_a**2
            var_b = np.sum(win * pb * pb) - mu_b**2
            cov = np.sum(win * pa * pb) - mu_a * mu_b
            values.append(
                (2 * mu_a * mu_b + c1) * (2 * cov + c2)
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(values))


class TestSsim:
    """Test SSIM and MS-SSIM."""

    def test_identical_images(self, images):
        assert ssim(images[0], images[0]) == pytest.approx(1.0, abs=1e-12)
        assert ms_ssim(images[0], images[0]) == pytest.approx(1.0, abs=1e-12)

    def test_matches_windowed_reference(self, images):
        a, b = images[0][:16, :16], 0.5 * images[0][:16, :16] + 0.5 * images[1][:16, :16]
        assert ssim(a, b) == pytest.approx(brute_force_ssim(a, b), rel=1e-10)

    def test_symmetric_and_bounded(self, images):
        a, b = images
        assert ssim(a, b) == pytest.approx(ssim(b, a))
        assert 0.0 <= ms_ssim(a, b) <= 1.0

    @pytest.mark.parametrize("size,levels", [(11, 1), (21, 1), (22, 2), (32, 2), (64, 3), (512, 5)])
    def test_levels(self, size, levels):
        assert ms_ssim_levels((size, size)) == levels

    def test_weights_renormalized(self, images):
        detail = ms_ssim_detail(images[0], images[1])
        assert detail.levels == 2
        assert sum(detail.weights) == pytest.approx(1.0)
        assert len(detail.cs) == 2

    def test_too_small_or_mismatched(self):
        with pytest.raises(ValidationError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))
        with pytest.raises(ValidationError):
            ms_ssim(np.zeros((32, 32)), np.zeros((32, 33)))


class TestPairMsssim:
    def test_identical_pairing(self, images):
        score = pair_msssim(list(images), list(images), 5, make_rng(0), pairing="identical")
        assert score.mean == pytest.approx(1.0)
        assert score.n_pairs == 5

    def test_intra_set_never_pairs_an_image_with_itself(self, images):
        same = list(images)
        intra = pair_msssim(same, same, 6, make_rng(1), workers=2)
        assert intra.mean == pytest.approx(ms_ssim(images[0], images[1]))
        assert intra.std == pytest.approx(0.0, abs=1e-12)

    def test_errors(self, images):
        with pytest.raises(ValidationError):
            pair_msssim([], list(images), 3, make_rng(0))
        with pytest.raises(ValidationError):
            single = [images[0]]
            pair_msssim(single, single, 3, make_rng(0))
        with pytest.raises(ValidationError):
            pair_msssim(list(images), list(images), 3, make_rng(0), pairing="sorted")


class TestFrechet:
    """Closed-form Frechet distances."""

    def test_one_dimensional(self):
        assert frechet_distance(np.zeros(1), np.eye(1), np.ones(1), np.eye(1)) == pytest.approx(1.0)

    def test_commuting_diagonals(self):
        d = frechet_distance(np.zeros(2), np.diag([1.0, 4.0]), np.zeros(2), np.diag([4.0, 1.0]))
        assert d == pytest.approx(2.0)

    def test_identical_is_zero(self):
        rng = make_rng(0)
        a = rng.standard_normal((5, 5))
        cov = a @ a.T
        assert frechet_distance(np.ones(5), cov, np.ones(5), cov) == pytest.approx(0.0, abs=1e-8)

    def test_not_a_covariance(self):
        with pytest.raises(NumericalError):
            frechet_distance(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            frechet_distance(np.zeros(2), np.eye(2), np.zeros(3), np.eye(3))


class TestFid:
    def test_same_set_is_near_zero(self, encoder, tiny_dataset):
        real, _, _ = stack(tiny_dataset.train)
        assert fid(real, real, encoder, n=len(real)) < 1e-3

    def test_noise_is_far(self, encoder, tiny_dataset):
        real, _, _ = stack(tiny_dataset.train)
        noise = make_rng(3).random(real.shape)
        assert fid(real, noise, encoder, n=40) > fid(real, real, encoder, n=len(real))

    def test_n_bounds(self, encoder, tiny_dataset):
        real, _, _ = stack(tiny_dataset.test)
        with pytest.raises(ValidationError):
            fid(real, real, encoder, n=len(real) + 1)
        with pytest.raises(ValidationError):
            fid(real, real, encoder, n=1)


class TestDice:
    def test_fixtures(self):
        a = np.array([[1, 1], [0, 0]])
        assert dice(a, a, 1) == 1.0
        assert dice(a, 1 - a, 1) == 0.0
        pred = np.array([[1, 1, 0, 0]])
        gt = np.array([[0, 1, 1, 0]])
        assert dice(pred, gt, 1) == 0.5

    def test_absent_from_both(self):
        stats = DiceStats()
        assert dice(np.zeros((3, 3)), np.zeros((3, 3)), 2, stats) == 1.0
        assert stats.empty_pairs == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            dice(np.zeros((2, 2)), np.zeros((3, 3)), 1)


class TestEncoder:
    """Test the feature encoder."""

    def test_features_shape(self, encoder, images):
        assert encoder.features(images).shape == (2, 64)
        with pytest.raises(ValidationError):
            encoder.features(np.zeros((1, 16, 16)))

    def test_size_must_divide(self):
        with pytest.raises(ValidationError):
            _init_encoder(make_rng(0), 40)

    def test_balanced_accuracy(self):
        truth = np.array([1, 1, 1, 1, 2])
        pred = np.array([1, 1, 1, 1, 1])
        assert balanced_accuracy(pred, truth) == pytest.approx(0.5)

    def test_training(self, tiny_dataset):
        cfg = EvalConfig(encoder_epochs=2, encoder_batch=16, min_encoder_accuracy=0.0)
        enc = train_feature_encoder(tiny_dataset, cfg, seed=0)
        assert 0.0 <= enc.accuracy <= 1.0
        assert len(enc.history) == 2
        images, _, _ = stack(tiny_dataset.test)
        assert 0.0 <= classifier_accuracy(enc, images, 4) <= 1.0

    def test_accuracy_gate(self, tiny_dataset):
        cfg = EvalConfig(encoder_epochs=1, min_encoder_accuracy=1.01)
        with pytest.raises(TrainingError):
            train_feature_encoder(tiny_dataset, cfg)

    def test_save_and_load(self, encoder, images, temp_dir):
        encoder.accuracy = 0.75
        written = save_encoder(encoder, temp_dir / "encoder")
        assert (temp_dir / "encoder" / "encoder.yaml") in written
        back = load_encoder(temp_dir / "encoder")
        assert back.accuracy == 0.75
        assert np.array_equal(back.features(images), encoder.features(images))

    def test_load_missing(self, temp_dir):
        with pytest.raises(ArtifactError, match="evaluate"):
            load_encoder(temp_dir)
