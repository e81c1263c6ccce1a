"""Unit tests for embed module."""

import csv

import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from tbad_synth.config import TsneConfig
from tbad_synth.embed import (
    conditional_probabilities,
    joint_probabilities,
    kl_divergence,
    nearest_real,
    perplexity_search,
    tsne,
    tsne_gradient,
    write_embedding_csv,
)
from tbad_synth.errors import ValidationError
from tbad_synth.numerics import make_rng


@pytest.fixture
def two_clusters():
    rng = make_rng(0, "clusters")
    a = rng.standard_normal((30, 5))
    b = rng.standard_normal((30, 5)) + 100.0
    return np.vstack([a, b]), np.array([0] * 30 + [1] * 30)


class TestPerplexity:
    """Test the per-point bandwidth search."""

    @pytest.mark.parametrize("target", [2.0, 10.0, 30.0])
    def test_hits_target(self, target):
        row = make_rng(1).random(60) * 20.0
        res = perplexity_search(row, target)
        assert res.converged
        assert res.perplexity == pytest.approx(target, abs=1e-4)
        assert res.probs.sum() == pytest.approx(1.0)

    def test_invalid(self):
        with pytest.raises(ValidationError):
            perplexity_search(np.array([1.0]), 5.0)
        with pytest.raises(ValidationError):
            perplexity_search(np.array([1.0, 2.0, 3.0]), 0.0)

    def test_probability_matrices(self, two_clusters):
        x, _ = two_clusters
        cond = conditional_probabilities(x[:20], 5.0)
        assert np.allclose(cond.sum(axis=1), 1.0)
        assert np.all(np.diag(cond) == 0)
        joint = joint_probabilities(x[:20], 5.0)
        assert joint.sum() == pytest.approx(1.0)
        assert np.allclose(joint, joint.T)


class TestGradient:
    def test_matches_finite_differences(self):
        rng = make_rng(2, "tsne-grad")
        P = rng.random((8, 8))
        P = P + P.T
        np.fill_diagonal(P, 0.0)
        P /= P.sum()
        Y = rng.standard_normal((8, 2))
        kl, grad = tsne_gradient(P, Y)
        assert kl == pytest.approx(kl_divergence(P, Y))
        h = 1e-6
        numeric = np.zeros_like(Y)
        for idx in np.ndindex(*Y.shape):
            Y[idx] += h
            plus = kl_divergence(P, Y)
            Y[idx] -= 2 * h
            minus = kl_divergence(P, Y)
            Y[idx] += h
            numeric[idx] = (plus - minus) / (2 * h)
        assert np.allclose(grad, numeric, rtol=1e-5, atol=1e-8)


class TestTsne:
    """Test the full embedding."""

    def test_separates_clusters(self, two_clusters):
        x, labels = two_clusters
        cfg = TsneConfig(perplexity=10.0, iterations=300, exaggeration_iters=100,
                         momentum_switch=150)
        result = tsne(x, cfg, seed=0)
        assert result.coords.shape == (60, 2)
        assert result.kl_final < result.kl_initial
        assert silhouette_score(result.coords, labels) > 0.5

    def test_seeded(self, two_clusters):
        x, _ = two_clusters
        cfg = TsneConfig(perplexity=5.0, iterations=30)
        a = tsne(x, cfg, seed=3)
        b = tsne(x, cfg, seed=3)
        assert np.array_equal(a.coords, b.coords)

    def test_perplexity_is_clamped(self, two_clusters):
        x, _ = two_clusters
        result = tsne(x[:12], TsneConfig(perplexity=30.0, iterations=20), seed=0)
        assert result.perplexity < 11 / 3

    def test_rejects_bad_input(self):
        with pytest.raises(ValidationError):
            tsne(np.ones((20, 3)), TsneConfig())
        with pytest.raises(ValidationError):
            tsne(np.random.default_rng(0).random((5, 3)), TsneConfig())


class TestNearestReal:
    def test_finds_copy(self):
        real = list(make_rng(4).random((4, 32, 32)))
        idx = nearest_real([real[2].copy()], real, k=2)
        assert idx.shape == (1, 2)
        assert idx[0, 0] == 2

    def test_ties_go_to_lowest_index(self):
        rng = make_rng(5)
        twin = rng.random((32, 32))
        real = [rng.random((32, 32)), twin, rng.random((32, 32)), twin.copy()]
        idx = nearest_real([twin], real, k=2, workers=2)
        assert list(idx[0]) == [1, 3]

    def test_empty(self):
        with pytest.raises(ValidationError):
            nearest_real([], [np.zeros((32, 32))])


def test_write_embedding_csv(temp_dir):
    path = temp_dir / "embedding.csv"
    coords = np.array([[0.5, -1.0], [2.0, 3.0]])
    write_embedding_csv(path, coords, ["real", "synth"], [3, 4])
    with open(path) as f:
        rows = list(csv.DictReader(f))
    assert rows[1] == {"id": "1", "set": "synth", "class": "4", "x": "2.0", "y": "3.0"}
