"""Mixture sampling, provenance/split bookkeeping, boundary-sample selection."""

import numpy as np
import pytest

from margin_forge import datagen, geometry, model
from margin_forge.datagen import (Dataset, MixtureConfig, append_train_records,
                                  circle_means, dataset_to_text, gaussian_mixture,
                                  load_dataset, margin_density_estimate, save_dataset,
                                  select_boundary_samples, text_to_dataset)


def small_config(seed=0, **overrides):
    kwargs = dict(class_count=3, dim=2, samples_per_class=10,
                  means=circle_means(3, 4.0, 2), covariance_scale=0.5, seed=seed)
    kwargs.update(overrides)
    return MixtureConfig(**kwargs)


class TestMixtureConfig:
    def test_rejects_single_class(self):
        with pytest.raises(ValueError, match="class_count"):
            small_config(class_count=1, means=np.zeros((1, 2)))

    def test_rejects_tiny_class(self):
        with pytest.raises(ValueError, match="samples_per_class"):
            small_config(samples_per_class=1)

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError, match="covariance_scale"):
            small_config(covariance_scale=0.0)

    def test_rejects_mismatched_means(self):
        with pytest.raises(ValueError, match="means"):
            small_config(means=np.zeros((2, 2)))


class TestCircleMeans:
    def test_on_circle_and_equiangular(self):
        means = circle_means(5, 3.0, 4)
        np.testing.assert_allclose(np.linalg.norm(means[:, :2], axis=1), 3.0)
        np.testing.assert_allclose(means[:, 2:], 0.0)
        angles = np.arctan2(means[:, 1], means[:, 0])
        gaps = np.diff(np.unwrap(angles))
        np.testing.assert_allclose(gaps, 2 * np.pi / 5, rtol=1e-12)

    def test_one_dimensional_fallback(self):
        means = circle_means(3, 2.0, 1)
        np.testing.assert_allclose(means[:, 0], [-2.0, 0.0, 2.0])

    def test_rejects_bad_radius(self):
        with pytest.raises(ValueError):
            circle_means(3, 0.0, 2)


class TestGaussianMixture:
    def test_shapes_and_split_sizes(self):
        ds = gaussian_mixture(small_config())
        assert ds.n == 30 and ds.dim == 2
        assert ds.train_indices().shape[0] == 24
        assert ds.test_indices().shape[0] == 6
        assert ds.poison_count() == 0
        for c in range(3):
            assert int(np.sum(ds.labels == c)) == 10

    def test_deterministic(self):
        a = gaussian_mixture(small_config(seed=5))
        b = gaussian_mixture(small_config(seed=5))
        np.testing.assert_array_equal(a.x, b.x)

    def test_per_class_streams_independent(self):
        """Resizing one class must not disturb the draws of another."""
        base = gaussian_mixture(small_config())
        grown = gaussian_mixture(small_config(samples_per_class=14))
        np.testing.assert_array_equal(base.x[base.labels == 2][:10],
                                      grown.x[grown.labels == 2][:10])

    def test_duplicate_means_warn(self):
        means = np.array([[1.0, 0.0], [1.0, 0.0]])
        ds = gaussian_mixture(MixtureConfig(2, 2, 4, means, 0.5, 0))
        assert any("share a mean" in w for w in ds.warnings)

    def test_samples_cluster_near_means(self):
        cfg = small_config(samples_per_class=200, covariance_scale=0.3)
        ds = gaussian_mixture(cfg)
        for c in range(3):
            centroid = ds.x[ds.labels == c].mean(axis=0)
            assert np.linalg.norm(centroid - cfg.means[c]) < 0.2


class TestAppendTrainRecords:
    def test_appends_poisoned_train_rows(self):
        ds = gaussian_mixture(small_config())
        extra = np.array([[0.0, 0.0], [1.0, 1.0]])
        out = append_train_records(ds, extra, [1, 2])
        assert out.n == ds.n + 2
        assert out.poison_count() == 2
        assert np.all(out.split[-2:] == datagen.SPLIT_TRAIN)
        np.testing.assert_array_equal(out.labels[-2:], [1, 2])
        # original object untouched
        assert ds.poison_count() == 0

    def test_rejects_wrong_dim(self):
        ds = gaussian_mixture(small_config())
        with pytest.raises(ValueError, match="dimension"):
            append_train_records(ds, np.zeros((1, 3)), [0])

    def test_rejects_count_mismatch(self):
        ds = gaussian_mixture(small_config())
        with pytest.raises(ValueError, match="counts"):
            append_train_records(ds, np.zeros((2, 2)), [0])


@pytest.fixture(scope="module")
def trained(std_mixture_module=None):
    cfg = small_config(samples_per_class=20)
    ds = gaussian_mixture(cfg)
    params, _ = model.train_erm(ds, model.TrainConfig(epochs=80, batch_size=8,
                                                      learning_rate=0.1, seed=0),
                                arch=model.ArchSpec(2, 3), init_seed=1)
    return ds, params


class TestMarginDensity:
    def test_positive_and_scales_with_threshold(self, trained):
        ds, params = trained
        nu_wide = margin_density_estimate(ds, params, 10.0)
        assert 0.0 <= nu_wide <= 1.0 / 10.0
        # With a huge threshold every margin qualifies: estimate = 1/t.
        assert margin_density_estimate(ds, params, 1e6) == pytest.approx(1e-6)

    def test_rejects_bad_threshold(self, trained):
        ds, params = trained
        with pytest.raises(ValueError):
            margin_density_estimate(ds, params, 0.0)


class TestSelectBoundarySamples:
    def test_ordered_by_projection_and_capped(self, trained):
        ds, params = trained
        protos = geometry.prototypes(params, ds)
        mu1, mu2 = protos.pair(0, 1)
        eps = 2.0
        picked = select_boundary_samples(ds, params, (0, 1), eps, budget=5)
        assert picked.shape[0] <= 5
        feats = model.features_batch(params, ds.x[picked])
        raw = (feats - 0.5 * (mu1 + mu2)) @ (mu1 - mu2)
        assert np.all(np.abs(raw) <= eps)
        assert np.all(np.diff(np.abs(raw)) >= -1e-12)

    def test_only_clean_train_candidates(self, trained):
        ds, params = trained
        poisoned = append_train_records(ds, ds.x[:3], ds.labels[:3])
        picked = select_boundary_samples(poisoned, params, (0, 1), 50.0, budget=1000)
        assert np.all(poisoned.provenance[picked] == datagen.PROV_CLEAN)
        assert np.all(poisoned.split[picked] == datagen.SPLIT_TRAIN)

    def test_empty_when_band_too_thin(self, trained):
        ds, params = trained
        picked = select_boundary_samples(ds, params, (0, 1), 0.0, budget=5)
        assert picked.shape[0] <= 5  # may or may not be empty, but must be valid
        with pytest.raises(ValueError):
            select_boundary_samples(ds, params, (0, 1), -1.0, budget=5)
        with pytest.raises(ValueError):
            select_boundary_samples(ds, params, (0, 1), 1.0, budget=0)


class TestSerialization:
    def test_round_trip_is_bit_exact(self, tmp_path):
        ds = gaussian_mixture(small_config(seed=3))
        ds = append_train_records(ds, np.array([[0.1, -0.2]]), [2])
        path = tmp_path / "ds.txt"
        save_dataset(ds, path)
        back = load_dataset(path)
        np.testing.assert_array_equal(ds.x, back.x)
        np.testing.assert_array_equal(ds.labels, back.labels)
        np.testing.assert_array_equal(ds.provenance, back.provenance)
        np.testing.assert_array_equal(ds.split, back.split)
        assert back.class_count == ds.class_count
        # and the re-serialized text is identical
        assert dataset_to_text(back) == dataset_to_text(ds)

    def test_bad_header_names_line_one(self):
        with pytest.raises(ValueError, match="line 1"):
            text_to_dataset("#wrong-header v1 dim=2 classes=3\n")

    def test_bad_field_count_names_line(self):
        text = ("#margin-forge-dataset v1 dim=2 classes=3\n"
                "train,clean,0,1.0,2.0\n"
                "train,clean,0,1.0\n")
        with pytest.raises(ValueError, match="line 3"):
            text_to_dataset(text)

    def test_unknown_split_word_names_line(self):
        text = ("#margin-forge-dataset v1 dim=1 classes=2\n"
                "validate,clean,0,1.0\n")
        with pytest.raises(ValueError, match="line 2.*split"):
            text_to_dataset(text)

    def test_unparseable_number_names_line(self):
        text = ("#margin-forge-dataset v1 dim=1 classes=2\n"
                "train,clean,0,oops\n")
        with pytest.raises(ValueError, match="line 2"):
            text_to_dataset(text)

    def test_empty_body_rejected(self):
        with pytest.raises(ValueError, match="no records"):
            text_to_dataset("#margin-forge-dataset v1 dim=1 classes=2\n")


class TestDatasetValidation:
    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="labels"):
            Dataset(x=np.zeros((1, 2)), labels=np.array([5]),
                    provenance=np.zeros(1), split=np.zeros(1), class_count=3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="labels"):
            Dataset(x=np.zeros((2, 2)), labels=np.array([0]),
                    provenance=np.zeros(2), split=np.zeros(2), class_count=3)
