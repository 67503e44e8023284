"""Shared fixtures: the frozen desk-scale setup every heavy test reuses."""

import numpy as np
import pytest

from margin_forge import attack, datagen, model, trigger

BASE_SEED = 99


@pytest.fixture(scope="session")
def std_mixture():
    """Three well-separated Gaussian blobs on a circle."""
    return datagen.MixtureConfig(class_count=3, dim=2, samples_per_class=40,
                                 means=datagen.circle_means(3, 4.0, 2),
                                 covariance_scale=0.5, seed=0)


@pytest.fixture(scope="session")
def std_arch():
    return model.ArchSpec(input_dim=2, class_count=3)


@pytest.fixture(scope="session")
def std_train_cfg():
    return model.TrainConfig(epochs=150, batch_size=12, learning_rate=0.07,
                             seed=0)


@pytest.fixture(scope="session")
def std_dataset(std_mixture):
    return datagen.gaussian_mixture(std_mixture)


@pytest.fixture(scope="session")
def std_victim(std_dataset, std_arch, std_train_cfg):
    params, losses = model.train_erm(std_dataset, std_train_cfg, arch=std_arch,
                                     init_seed=1)
    return params


@pytest.fixture(scope="session")
def white_setup(std_mixture, std_arch, std_train_cfg):
    """The adversary's exact-knowledge surrogate and its dataset."""
    surrogate, surrogate_ds = attack.train_surrogate(
        "white", std_mixture, std_arch, std_train_cfg, BASE_SEED)
    return surrogate, surrogate_ds


@pytest.fixture(scope="session")
def frozen_pattern(white_setup):
    """The calibrated attack trigger: full-batch, 1500 steps, seed 7."""
    surrogate, surrogate_ds = white_setup
    pattern, trace = trigger.optimize_trigger(
        surrogate_ds, surrogate, steps=1500, batch_size=None, alpha=0.85,
        delta=2.25, seed=7, objective="symmetric")
    return pattern, trace


@pytest.fixture(scope="session")
def frozen_trigger(frozen_pattern):
    return frozen_pattern[0]
