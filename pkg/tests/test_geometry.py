"""Prototype construction, signed offsets, band membership, cluster spread."""

import numpy as np
import pytest

from margin_forge import datagen, geometry, model
from margin_forge.geometry import (BandReport, PrototypeSet, angular_separability,
                                   band_report_table, cluster_radius,
                                   multiclass_band_check, prototype_balance,
                                   prototypes, raw_band_membership,
                                   signed_projection, signed_projections)
from margin_forge.numerics import RandomStream


def protos_from(centroids):
    centroids = np.asarray(centroids, dtype=float)
    return PrototypeSet(centroids, np.ones(centroids.shape[0], dtype=np.int64))


class TestPrototypes:
    def test_means_over_clean_train_only(self):
        cfg = datagen.MixtureConfig(2, 2, 10, np.array([[3.0, 0.0], [-3.0, 0.0]]),
                                    0.4, 0)
        ds = datagen.gaussian_mixture(cfg)
        # Logistic head = identity features, so prototypes are input centroids.
        params = model.init_params(model.ArchSpec(2, 2, hidden=(), feature_dim=None), 0)
        protos = prototypes(params, ds)
        idx = ds.clean_train_indices()
        for c in range(2):
            mask = ds.labels[idx] == c
            np.testing.assert_allclose(protos.centroids[c],
                                       ds.x[idx][mask].mean(axis=0), rtol=1e-12)
        # Poisoned appends must not move the prototypes.
        poisoned = datagen.append_train_records(ds, np.full((5, 2), 100.0), [0] * 5)
        protos2 = prototypes(params, poisoned)
        np.testing.assert_array_equal(protos.centroids, protos2.centroids)

    def test_pair_rejects_same_class(self):
        protos = protos_from([[1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            protos.pair(1, 1)


class TestSignedProjection:
    def test_prototype_lands_at_half_distance(self):
        mu1 = np.array([2.0, 0.0])
        mu2 = np.array([-2.0, 0.0])
        dist = np.linalg.norm(mu1 - mu2)
        assert signed_projection(mu1, mu1, mu2) == pytest.approx(dist / 2)
        assert signed_projection(mu2, mu1, mu2) == pytest.approx(-dist / 2)
        mid = 0.5 * (mu1 + mu2)
        assert signed_projection(mid, mu1, mu2) == 0.0

    def test_raw_equals_signed_times_distance(self):
        stream = RandomStream(4)
        mu1 = stream.standard_normal(3)
        mu2 = stream.standard_normal(3)
        z = stream.standard_normal((8, 3))
        dist = np.linalg.norm(mu1 - mu2)
        signed = signed_projections(z, mu1, mu2)
        for i in range(8):
            raw = raw_band_membership(z[i], mu1, mu2, np.inf).projection
            assert raw == pytest.approx(signed[i] * dist, rel=1e-12)

    def test_coincident_prototypes_rejected(self):
        mu = np.array([1.0, 1.0])
        with pytest.raises(ValueError, match="coincide"):
            signed_projections(np.zeros((1, 2)), mu, mu)

    def test_raw_membership_degenerate_flag(self):
        mu = np.array([1.0, 1.0])
        band = raw_band_membership(np.zeros(2), mu, mu, 0.5)
        assert band.member and band.degenerate and band.projection == 0.0

    def test_raw_membership_threshold(self):
        mu1 = np.array([1.0, 0.0])
        mu2 = np.array([-1.0, 0.0])
        inside = raw_band_membership(np.array([0.1, 5.0]), mu1, mu2, 0.5)
        outside = raw_band_membership(np.array([0.6, 5.0]), mu1, mu2, 0.5)
        assert inside.member and inside.projection == pytest.approx(0.2)
        assert not outside.member

    def test_rejects_negative_epsilon(self):
        with pytest.raises(ValueError):
            raw_band_membership(np.zeros(2), np.ones(2), -np.ones(2), -0.1)


class TestClusterStats:
    def test_hand_case(self):
        feats = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 3.0]])
        stats = cluster_radius(feats)
        np.testing.assert_allclose(stats.centroid, [1.0, 1.0])
        assert stats.radius == pytest.approx(2.0)

    def test_singleton_radius_zero(self):
        stats = cluster_radius(np.array([[5.0, -1.0]]))
        assert stats.radius == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            cluster_radius(np.zeros((0, 2)))


class TestPrototypeBalance:
    def test_midpoint_balances_two_classes(self):
        protos = protos_from([[2.0, 0.0], [-2.0, 0.0]])
        assert prototype_balance(np.zeros(2), protos) == 0.0

    def test_off_midpoint_offset(self):
        protos = protos_from([[2.0, 0.0], [-2.0, 0.0]])
        # centroid at (1,0): offset = <(1,0), (4,0)>/4 = 1
        assert prototype_balance(np.array([1.0, 0.0]), protos) == pytest.approx(1.0)

    def test_worst_pair_wins(self):
        protos = protos_from([[2.0, 0.0], [-2.0, 0.0], [0.0, 10.0]])
        v12 = abs(signed_projection(np.array([1.0, 1.0]),
                                    protos.centroids[0], protos.centroids[1]))
        v13 = abs(signed_projection(np.array([1.0, 1.0]),
                                    protos.centroids[0], protos.centroids[2]))
        v23 = abs(signed_projection(np.array([1.0, 1.0]),
                                    protos.centroids[1], protos.centroids[2]))
        assert prototype_balance(np.array([1.0, 1.0]), protos) == pytest.approx(
            max(v12, v13, v23))


class TestAngularSeparability:
    def test_three_class_circle_cosine(self):
        """Equiangular prototypes at 120 degrees have pairwise cosine -1/2."""
        protos = protos_from(datagen.circle_means(3, 4.0, 2))
        assert angular_separability(protos) == pytest.approx(-0.5, abs=1e-12)

    def test_orthogonal_prototypes(self):
        protos = protos_from([[1.0, 0.0], [0.0, 1.0]])
        assert angular_separability(protos) == pytest.approx(0.0, abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            angular_separability(protos_from([[0.0, 0.0], [1.0, 0.0]]))


class TestMulticlassBandCheck:
    def test_membership_matches_manual_offsets(self):
        protos = protos_from([[2.0, 0.0], [-2.0, 0.0], [0.0, 3.0]])
        feats = RandomStream(6).standard_normal((10, 2))
        report = multiclass_band_check(feats, protos, epsilon_tilde=1.0)
        assert report.pairs == [(0, 1), (0, 2), (1, 2)]
        for i in range(10):
            offs = [abs(signed_projection(feats[i], *protos.pair(c1, c2)))
                    for c1, c2 in report.pairs]
            assert bool(report.membership[i]) == (max(offs) <= 1.0)
        assert report.max_abs_projection == pytest.approx(
            np.abs(report.projections).max())

    def test_self_certificate_property(self):
        """Any batch is fully inside the band at kappa + radius.

        Triangle inequality: each row's offset splits into the centroid's
        offset (<= kappa) plus its distance from the centroid (<= radius).
        """
        stream = RandomStream(13)
        for trial in range(20):
            k = int(stream.integers(2, 5))
            d = int(stream.integers(2, 6))
            protos = protos_from(stream.standard_normal((k, d)) * 3.0)
            if any(np.allclose(protos.centroids[a], protos.centroids[b])
                   for a in range(k) for b in range(a + 1, k)):
                continue
            feats = stream.standard_normal((int(stream.integers(2, 12)), d))
            report = multiclass_band_check(feats, protos, report_bound_of(feats, protos))
            assert report.all_inside
            assert report.max_abs_projection <= report.certificate_bound + 1e-9

    def test_epsilon_zero_only_balanced_rows(self):
        protos = protos_from([[1.0, 0.0], [-1.0, 0.0]])
        feats = np.array([[0.0, 7.0], [0.3, 0.0]])
        report = multiclass_band_check(feats, protos, 0.0)
        np.testing.assert_array_equal(report.membership, [True, False])
        assert not report.all_inside

    def test_validation(self):
        protos = protos_from([[1.0, 0.0], [-1.0, 0.0]])
        with pytest.raises(ValueError):
            multiclass_band_check(np.zeros((0, 2)), protos, 1.0)
        with pytest.raises(ValueError):
            multiclass_band_check(np.zeros((1, 2)), protos, -1.0)


def report_bound_of(feats, protos):
    stats = cluster_radius(feats)
    return prototype_balance(stats.centroid, protos) + stats.radius


class TestBandReportTable:
    def test_rows_and_verdicts(self):
        protos = protos_from([[1.0, 0.0], [-1.0, 0.0]])
        feats = np.array([[0.0, 0.0], [5.0, 0.0]])
        report = multiclass_band_check(feats, protos, 1.0)
        table = band_report_table(report)
        lines = table.strip().splitlines()
        assert lines[0].split() == ["row", "pair", "offset", "bound", "ok"]
        assert len(lines) == 1 + 2 * len(report.pairs)
        assert lines[1].endswith("yes")
        assert lines[2].endswith("no")
