"""Tests for memorization and quality metrics."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from demem.analysis import metrics
from demem.analysis.metrics import (
    LENIENT,
    STRICT,
    condition_alignment,
    decoupling_score,
    frechet_quality,
    magnitude_profile,
    magnitude_shift,
    pooled_range,
    project2d,
    rate_from_samples,
    reproduction_rate,
    trigger_samples,
    velocity_magnitudes,
)
from demem.data.memoria import ExemplarRegistry, synth_corpus
from demem.models.flownet import build_model, standard_normal_noise, velocity


@pytest.fixture
def corpus(tiny_corpus_cfg):
    """Tiny corpus and its registry."""
    return synth_corpus(tiny_corpus_cfg)


@pytest.fixture
def registry(corpus):
    """Registry of the tiny corpus."""
    return corpus[1]


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _copies(registry: ExemplarRegistry, n: int, jitter: float = 0.0, seed: int = 0) -> dict:
    generator = torch.Generator().manual_seed(seed)
    return {
        cond_id: registry.lookup(cond_id).expand(n, -1)
        + jitter * torch.randn(n, registry.lookup(cond_id).shape[0], generator=generator, dtype=torch.float64)
        for cond_id in registry.trigger_ids
    }


class TestReproductionRate:
    """Test cases for exemplar reproduction."""

    def test_untrained_model_rarely_reproduces(self, tiny_spec, registry):
        """Test that an identity sampler almost never lands on an exemplar."""
        untrained = build_model(tiny_spec, seed=0)

        rate = reproduction_rate(untrained, None, registry, n_per_trigger=500, n_steps=4, seed=3)

        assert rate < 0.02

    def test_exemplar_copies(self, registry):
        """Test that exact exemplar copies are always reproductions."""
        samples = _copies(registry, 10)

        assert rate_from_samples(samples, registry, judge=STRICT) == 1.0
        assert rate_from_samples(samples, registry, judge=LENIENT) == 1.0

    def test_half_copies(self, registry):
        """Test the fraction when half of the samples are far away."""
        samples = {
            cond_id: torch.cat([latents, latents + 100.0])
            for cond_id, latents in _copies(registry, 5).items()
        }

        assert rate_from_samples(samples, registry) == 0.5

    def test_monotone_in_threshold(self, registry):
        """Test that a looser threshold never lowers the rate."""
        samples = _copies(registry, 200, jitter=0.15, seed=4)
        rates = [rate_from_samples(samples, registry, tau_rel=tau) for tau in (0.05, 0.1, 0.2, 0.4)]

        assert rates == sorted(rates)
        assert rates[0] < rates[-1]

    def test_lenient_covers_strict(self, registry):
        """Test that strict hits are lenient hits when exemplars are well separated."""
        samples = _copies(registry, 200, jitter=0.1, seed=6)

        strict = rate_from_samples(samples, registry, judge=STRICT)
        lenient = rate_from_samples(samples, registry, judge=LENIENT)

        assert lenient >= strict

    def test_lenient_requires_nearest_exemplar(self, registry):
        """Test that a sample closer to another exemplar is not a lenient hit."""
        first, second = registry.trigger_ids
        samples = {first: registry.lookup(second)[None, :]}

        assert rate_from_samples(samples, registry, judge=LENIENT, lenient_tau_rel=1e6) == 0.0

    def test_empty_registry(self):
        """Test that an empty registry is rejected."""
        with pytest.raises(ValueError, match="empty"):
            rate_from_samples({}, ExemplarRegistry())

    def test_invalid_threshold(self, registry):
        """Test that thresholds must be positive."""
        with pytest.raises(ValueError, match="positive"):
            rate_from_samples(_copies(registry, 2), registry, tau_rel=0.0)

    def test_unknown_judge(self, registry):
        """Test that only the strict and lenient judges exist."""
        with pytest.raises(ValueError, match="Unknown judge"):
            rate_from_samples(_copies(registry, 2), registry, judge="fuzzy")

    def test_seed_per_trigger(self, lively_params, registry):
        """Test that each trigger draws its noise with seed + id."""
        seeds = []

        def recording_source(n, d, seed):
            seeds.append(seed)
            return standard_normal_noise(n, d, seed)

        samples = trigger_samples(lively_params, None, registry, 3, 2, 100, recording_source)

        assert seeds == [100 + cond_id for cond_id in registry.trigger_ids]
        assert list(samples) == registry.trigger_ids
        assert all(s.shape == (3, 8) for s in samples.values())


class TestMagnitudeShift:
    """Test cases for latent norm distributions."""

    def test_point_masses(self):
        """Test the distance between norms 1 and 3."""
        p = magnitude_profile(np.tile([1.0, 0.0], (10, 1)))
        q = magnitude_profile(np.tile([0.0, 3.0], (10, 1)))

        assert magnitude_shift(p, q) == pytest.approx(2.0)

    def test_identity(self):
        """Test that a profile has no shift from itself."""
        p = magnitude_profile(_rng(0).normal(size=(100, 4)))

        assert magnitude_shift(p, p) == 0.0

    def test_histogram_counts(self):
        """Test that the histogram holds every sample."""
        latents = _rng(1).normal(size=(300, 4))

        profile = magnitude_profile(latents, bins=16)

        assert profile.counts.sum() == 300
        assert profile.edges.shape == (17,)
        assert profile.median == pytest.approx(float(np.median(np.linalg.norm(latents, axis=1))))

    def test_pooled_range(self):
        """Test that a shared range covers every set."""
        a = _rng(2).normal(size=(50, 3))
        b = 5.0 * _rng(3).normal(size=(50, 3))
        value_range = pooled_range(a, b)

        pa = magnitude_profile(a, value_range=value_range)
        pb = magnitude_profile(b, value_range=value_range)

        assert np.array_equal(pa.edges, pb.edges)

    def test_range_must_cover_norms(self):
        """Test that a narrow range is rejected."""
        with pytest.raises(ValueError, match="does not cover"):
            magnitude_profile(np.tile([3.0, 0.0], (4, 1)), value_range=(0.0, 1.0))

    def test_empty_set(self):
        """Test that an empty latent set cannot be profiled."""
        with pytest.raises(ValueError, match="empty"):
            magnitude_profile(np.zeros((0, 4)))

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(min_value=0, max_value=100), min_size=1, max_size=20),
        st.lists(st.floats(min_value=0, max_value=100), min_size=1, max_size=20),
        st.lists(st.floats(min_value=0, max_value=100), min_size=1, max_size=20),
    )
    def test_triangle_inequality(self, a, b, c):
        """Test the metric property of the shift."""
        p, q, r = (magnitude_profile(np.asarray(v)[:, None]) for v in (a, b, c))

        assert magnitude_shift(p, r) <= magnitude_shift(p, q) + magnitude_shift(q, r) + 1e-9


class TestProject2d:
    """Test cases for the shared principal-component projection."""

    @pytest.fixture
    def planar(self):
        """Two point sets lying in one 2-D plane of a 6-D space."""
        basis, _ = np.linalg.qr(_rng(4).normal(size=(6, 2)))
        a = _rng(5).normal(size=(40, 2)) * [3.0, 1.0]
        b = _rng(6).normal(size=(30, 2)) * [3.0, 1.0] + [1.0, 0.5]
        return a @ basis.T + 2.0, b @ basis.T + 2.0

    def test_rank_two_preserves_distances(self, planar):
        """Test that rank-2 data keeps its pairwise distances."""
        a, b = planar

        projection = project2d(a, b)

        original = np.concatenate([a, b])
        projected = np.concatenate([projection.coords_a, projection.coords_b])
        diff = np.abs(
            np.linalg.norm(original[:, None] - original[None], axis=-1)
            - np.linalg.norm(projected[:, None] - projected[None], axis=-1)
        )
        assert diff.max() <= 1e-8
        assert projection.explained_variance_ratio == pytest.approx(1.0)

    def test_deterministic_orientation(self, planar):
        """Test that repeated projections are identical."""
        first = project2d(*planar)
        second = project2d(*planar)

        assert np.array_equal(first.coords_a, second.coords_a)
        for row in first.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_degenerate_input(self):
        """Test that constant latents are rejected."""
        with pytest.raises(ValueError, match="zero variance"):
            project2d(np.ones((5, 4)), np.ones((5, 4)))

    def test_too_few_points(self):
        """Test that two points cannot be projected."""
        with pytest.raises(ValueError, match="at least 3"):
            project2d(np.zeros((1, 4)), np.ones((1, 4)))


class TestDecouplingScore:
    """Test cases for the nearest-neighbour separability score."""

    def test_same_distribution(self):
        """Test that i.i.d. sets are near chance."""
        score = decoupling_score(_rng(7).normal(size=(200, 32)), _rng(8).normal(size=(200, 32)))

        assert 0.4 <= score <= 0.6

    def test_separated_sets(self):
        """Test that far-apart sets are told apart."""
        a = _rng(9).normal(size=(200, 32))
        b = _rng(10).normal(size=(200, 32)) + 10.0

        assert decoupling_score(a, b) >= 0.99

    def test_paired_copies_match_their_twins(self):
        """Test that near-copies score 0, since every nearest neighbour is a twin."""
        a = _rng(21).normal(size=(100, 8))
        b = a + 1e-3 * _rng(22).normal(size=(100, 8))

        assert decoupling_score(a, b) == 0.0

    def test_symmetric(self):
        """Test that the score does not depend on argument order."""
        a = _rng(11).normal(size=(50, 4))
        b = _rng(12).normal(size=(60, 4)) + 0.7

        assert decoupling_score(a, b) == decoupling_score(b, a)

    def test_minimum_size(self):
        """Test that tiny sets are rejected."""
        with pytest.raises(ValueError, match="at least 10"):
            decoupling_score(np.zeros((5, 2)), np.ones((20, 2)))


class TestFrechetQuality:
    """Test cases for the Gaussian Fréchet distance."""

    def test_identical_sets(self):
        """Test that a set has zero distance to itself."""
        x = _rng(13).normal(size=(500, 4))

        assert frechet_quality(x, x) == pytest.approx(0.0, abs=1e-6)

    def test_mean_offset(self):
        """Test that an offset of norm 2 costs about 4."""
        offset = np.array([2.0, 0.0, 0.0, 0.0])
        generated = _rng(14).normal(size=(2000, 4)) + offset
        reference = _rng(15).normal(size=(2000, 4))

        assert frechet_quality(generated, reference) == pytest.approx(4.0, rel=0.1)

    def test_scaled_covariance(self):
        """Test the trace term for a scaled isotropic Gaussian."""
        x = _rng(16).normal(size=(4000, 3))

        # (2 - 1)^2 per dimension
        assert frechet_quality(2.0 * x, x) == pytest.approx(3.0 * np.var(x, axis=0, ddof=1).mean(), rel=0.05)

    def test_dimension_mismatch(self):
        """Test that latent dimensions must agree."""
        with pytest.raises(ValueError, match="Dimension mismatch"):
            frechet_quality(np.zeros((10, 3)), np.zeros((10, 4)))

    def test_too_few_samples(self):
        """Test that covariance estimation needs d+1 samples."""
        with pytest.raises(ValueError, match="d\\+1"):
            frechet_quality(np.zeros((3, 4)), _rng(17).normal(size=(50, 4)))


class TestConditionAlignment:
    """Test cases for condition alignment."""

    def test_training_rows(self, corpus):
        """Test that training rows align with their own condition."""
        dataset, _ = corpus

        assert condition_alignment(dataset.x, dataset.cond_ids, dataset) == 1.0

    def test_wrong_labels(self, corpus):
        """Test that relabelled rows do not align."""
        dataset, _ = corpus
        rows = dataset.rows_for(0)

        assert condition_alignment(rows, [1] * rows.shape[0], dataset) == 0.0

    def test_length_mismatch(self, corpus):
        """Test that every latent needs a condition id."""
        dataset, _ = corpus

        with pytest.raises(ValueError, match="one condition id per latent"):
            condition_alignment(dataset.x[:3], [0, 1], dataset)


class TestVelocityMagnitudes:
    """Test cases for velocity norms along the trajectory."""

    def test_zero_head(self, tiny_spec):
        """Test that an untrained model has zero velocity."""
        z0 = standard_normal_noise(5, 8, 0)

        norms = velocity_magnitudes(build_model(tiny_spec, seed=1), None, z0, 3, 0)

        assert norms.shape == (5,)
        assert np.all(norms == 0.0)

    def test_single_step(self, lively_params):
        """Test that one Euler step reports the velocity at t=0."""
        z0 = standard_normal_noise(4, 8, 2)

        norms = velocity_magnitudes(lively_params, None, z0, 1, 1)

        expected = velocity(lively_params, None, z0, 0.0, 1).norm(dim=1).numpy()
        assert np.allclose(norms, expected, rtol=0, atol=1e-12)


def test_module_is_pure(lively_params, registry):
    """Test that repeated measurements give the same rate."""
    a = metrics.reproduction_rate(lively_params, None, registry, n_per_trigger=20, seed=5)
    b = metrics.reproduction_rate(lively_params, None, registry, n_per_trigger=20, seed=5)

    assert a == b
