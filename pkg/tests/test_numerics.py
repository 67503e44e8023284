"""Seed derivation, counter RNG streams, gradient checking, spectral norms."""

import numpy as np
import pytest

from margin_forge.numerics import (RandomStream, TrainingDiverged, affine_forward,
                                   as_matrix, as_vector, check_finite, derive_seed,
                                   grad_check, spectral_norm)


class TestDeriveSeed:
    def test_deterministic(self):
        assert derive_seed(7, "stage", 3) == derive_seed(7, "stage", 3)

    def test_distinct_tags_distinct_seeds(self):
        seen = {derive_seed(7, "stage", t) for t in range(100)}
        seen |= {derive_seed(7, "other", t) for t in range(100)}
        assert len(seen) == 200

    def test_range_fits_quadrant(self):
        for t in range(50):
            s = derive_seed(123456789, "x", t)
            assert 0 <= s < 2 ** 63

    def test_numeric_parts_coerce_to_int(self):
        assert derive_seed(1, 2.0) == derive_seed(1, 2)


class TestRandomStream:
    def test_same_key_same_draws(self):
        a = RandomStream(5, 2).standard_normal(10)
        b = RandomStream(5, 2).standard_normal(10)
        np.testing.assert_array_equal(a, b)

    def test_streams_are_independent(self):
        a = RandomStream(5, 0).standard_normal(10)
        b = RandomStream(5, 1).standard_normal(10)
        assert not np.allclose(a, b)

    def test_derive_matches_direct_construction(self):
        a = RandomStream(5, 0).derive(3).standard_normal(4)
        b = RandomStream(5, 3).standard_normal(4)
        np.testing.assert_array_equal(a, b)

    def test_choice_without_replacement_unique(self):
        picks = RandomStream(1).choice(np.arange(20), size=10, replace=False)
        assert len(set(picks.tolist())) == 10

    def test_permutation_is_permutation(self):
        p = RandomStream(2).permutation(16)
        assert sorted(p.tolist()) == list(range(16))


class TestGradCheck:
    def test_accepts_correct_gradient(self):
        a = np.array([2.0, -1.0, 0.5])

        def quad(v):
            return float(v @ (a * v)), 2.0 * a * v

        rep = grad_check(quad, np.array([1.0, 2.0, 3.0]))
        assert rep.passed and rep.max_rel_error < 1e-8

    def test_flags_wrong_gradient(self):
        def wrong(v):
            return float(v @ v), 3.0 * v  # should be 2v

        rep = grad_check(wrong, np.array([1.0, -2.0]))
        assert not rep.passed

    def test_non_finite_marks_indeterminate(self):
        def bad(v):
            return float("nan"), v

        rep = grad_check(bad, np.array([1.0]))
        assert rep.indeterminate and not rep.passed

    def test_checks_subset_of_indices(self):
        calls = []

        def quad(v):
            calls.append(1)
            return float(v @ v), 2.0 * v

        rep = grad_check(quad, np.arange(1.0, 9.0), indices=[0, 5])
        assert rep.passed and rep.checked == 2


class TestSpectralNorm:
    @pytest.mark.parametrize("shape", [(4, 4), (3, 7), (9, 2)])
    def test_matches_svd(self, shape):
        w = RandomStream(11).standard_normal(shape)
        want = np.linalg.svd(w, compute_uv=False)[0]
        assert spectral_norm(w) == pytest.approx(want, rel=1e-9)

    def test_zero_matrix(self):
        assert spectral_norm(np.zeros((3, 3))) == 0.0


class TestSmallHelpers:
    def test_affine_forward(self):
        w = np.array([[1.0, 2.0], [0.0, -1.0]])
        b = np.array([1.0, 0.0])
        np.testing.assert_allclose(affine_forward(w, b, np.array([1.0, 1.0])),
                                   [4.0, -1.0])

    def test_as_vector_rejects_matrix(self):
        with pytest.raises(ValueError):
            as_vector(np.zeros((2, 2)), "v")

    def test_as_matrix_rejects_vector(self):
        with pytest.raises(ValueError):
            as_matrix(np.zeros(3), "m")

    def test_check_finite_raises_on_nan(self):
        with pytest.raises(ValueError):
            check_finite(np.array([1.0, np.nan]), "vals")

    def test_diverged_carries_step(self):
        exc = TrainingDiverged("boom", 17)
        assert exc.step == 17
