"""Synthetic Gaussian-mixture datasets with split and provenance tracking.

Records carry two tags alongside the label: ``split`` (train/test) and
``provenance`` (clean/poisoned). Poisoning appends train records flagged
poisoned; everything downstream that estimates clean statistics filters on
provenance instead of trusting the split.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geometry, model
from .numerics import RandomStream, as_matrix

SPLIT_TRAIN = 0
SPLIT_TEST = 1
PROV_CLEAN = 0
PROV_POISONED = 1

_SPLIT_WORDS = {SPLIT_TRAIN: "train", SPLIT_TEST: "test"}
_PROV_WORDS = {PROV_CLEAN: "clean", PROV_POISONED: "poisoned"}
_SPLIT_CODES = {v: k for k, v in _SPLIT_WORDS.items()}
_PROV_CODES = {v: k for k, v in _PROV_WORDS.items()}


@dataclass(frozen=True)
class MixtureConfig:
    """Isotropic Gaussian blobs: one mean per class, shared coordinate std."""

    class_count: int
    dim: int
    samples_per_class: int
    means: np.ndarray
    covariance_scale: float
    seed: int

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.samples_per_class < 2:
            raise ValueError("samples_per_class must be >= 2 to fill both splits")
        if self.covariance_scale <= 0:
            raise ValueError("covariance_scale must be > 0")
        means = as_matrix(self.means, "means")
        if means.shape != (self.class_count, self.dim):
            raise ValueError(
                f"means must be ({self.class_count}, {self.dim}), got {means.shape}")
        object.__setattr__(self, "means", means)


def circle_means(class_count, radius, dim):
    """Equiangular class means on a circle in the first two coordinates.

    One-dimensional inputs fall back to evenly spaced points on a line.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    means = np.zeros((class_count, dim))
    if dim == 1:
        means[:, 0] = np.linspace(-radius, radius, class_count)
    else:
        angles = 2.0 * np.pi * np.arange(class_count) / class_count
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    return means


@dataclass
class Dataset:
    x: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray
    split: np.ndarray
    class_count: int
    warnings: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.x = as_matrix(self.x, "dataset inputs")
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.provenance = np.ascontiguousarray(self.provenance, dtype=np.int8)
        self.split = np.ascontiguousarray(self.split, dtype=np.int8)
        n = self.x.shape[0]
        for name, arr in (("labels", self.labels), ("provenance", self.provenance),
                          ("split", self.split)):
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isin(self.provenance, (PROV_CLEAN, PROV_POISONED))):
            raise ValueError("provenance codes must be clean/poisoned")
        if not np.all(np.isin(self.split, (SPLIT_TRAIN, SPLIT_TEST))):
            raise ValueError("split codes must be train/test")
        self.warnings = tuple(self.warnings)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    def train_indices(self):
        return np.where(self.split == SPLIT_TRAIN)[0]

    def test_indices(self):
        return np.where(self.split == SPLIT_TEST)[0]

    def clean_train_indices(self):
        return np.where((self.split == SPLIT_TRAIN) & (self.provenance == PROV_CLEAN))[0]

    def clean_test_indices(self):
        return np.where((self.split == SPLIT_TEST) & (self.provenance == PROV_CLEAN))[0]

    def poison_count(self):
        return int(np.sum(self.provenance == PROV_POISONED))


def gaussian_mixture(config):
    """Draw the mixture and split each class 80/20 into train/test.

    Per-class draws come from streams derived as (seed, class), so adding a
    class or resizing another class never disturbs existing draws.
    """
    xs, ys, splits = [], [], []
    warnings = []
    m = config.samples_per_class
    n_train = int(round(0.8 * m))
    n_train = min(max(n_train, 1), m - 1)
    for c in range(config.class_count):
        stream = RandomStream(config.seed, c)
        draws = config.means[c] + config.covariance_scale * stream.standard_normal((m, config.dim))
        xs.append(draws)
        ys.append(np.full(m, c, dtype=np.int64))
        split = np.full(m, SPLIT_TEST, dtype=np.int8)
        split[:n_train] = SPLIT_TRAIN
        splits.append(split)
    for c1 in range(config.class_count):
        for c2 in range(c1 + 1, config.class_count):
            if np.array_equal(config.means[c1], config.means[c2]):
                warnings.append(
                    f"classes {c1} and {c2} share a mean; their band is degenerate")
    x = np.concatenate(xs)
    return Dataset(x=x, labels=np.concatenate(ys),
                   provenance=np.zeros(x.shape[0], dtype=np.int8),
                   split=np.concatenate(splits), class_count=config.class_count,
                   warnings=tuple(warnings))


def append_train_records(dataset, x_new, labels_new, provenance=PROV_POISONED):
    """New Dataset with extra train records appended (defaults to poisoned)."""
    x_new = as_matrix(x_new, "new records")
    labels_new = np.ascontiguousarray(labels_new, dtype=np.int64)
    if x_new.shape[1] != dataset.dim:
        raise ValueError("appended records have the wrong dimension")
    if x_new.shape[0] != labels_new.shape[0]:
        raise ValueError("appended record/label counts differ")
    k = x_new.shape[0]
    return Dataset(
        x=np.concatenate([dataset.x, x_new]),
        labels=np.concatenate([dataset.labels, labels_new]),
        provenance=np.concatenate([dataset.provenance,
                                   np.full(k, provenance, dtype=np.int8)]),
        split=np.concatenate([dataset.split, np.full(k, SPLIT_TRAIN, dtype=np.int8)]),
        class_count=dataset.class_count,
        warnings=dataset.warnings)


def margin_density_estimate(dataset, params, threshold):
    """nu-hat: Pr[|margin| <= t] / t over clean test records."""
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    idx = dataset.clean_test_indices()
    if idx.shape[0] == 0:
        raise ValueError("no clean test records for the margin density estimate")
    margins = model.margins_batch(params, dataset.x[idx], dataset.labels[idx])
    return float(np.mean(np.abs(margins) <= threshold) / threshold)


def select_boundary_samples(dataset, params, pair, epsilon, budget):
    """Clean train records whose features sit inside the raw band for ``pair``.

    Candidates are ordered by |raw projection| ascending (ties keep dataset
    order), truncated to ``budget``. Returns dataset indices; empty when no
    record lands in the band.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    idx = dataset.clean_train_indices()
    if idx.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    protos = geometry.prototypes(params, dataset)
    mu1, mu2 = protos.pair(*pair)
    feats = model.features_batch(params, dataset.x[idx])
    diff = mu1 - mu2
    raw = (feats - 0.5 * (mu1 + mu2)) @ diff
    inside = np.abs(raw) <= epsilon
    if np.all(diff == 0.0):
        inside = np.ones(idx.shape[0], dtype=bool)
    candidates = idx[inside]
    order = np.argsort(np.abs(raw[inside]), kind="stable")
    return candidates[order][:budget]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def dataset_to_text(dataset):
    """Line format: header then ``split,provenance,label,v1,...,vd`` rows."""
    lines = [f"#margin-forge-dataset v1 dim={dataset.dim} classes={dataset.class_count}"]
    for i in range(dataset.n):
        values = ",".join(repr(float(v)) for v in dataset.x[i])
        lines.append(f"{_SPLIT_WORDS[int(dataset.split[i])]},"
                     f"{_PROV_WORDS[int(dataset.provenance[i])]},"
                     f"{int(dataset.labels[i])},{values}")
    return "\n".join(lines) + "\n"


def text_to_dataset(text):
    lines = text.splitlines()
    if not lines:
        raise ValueError("line 1: empty dataset file")
    header = lines[0].split()
    if (len(header) != 4 or header[0] != "#margin-forge-dataset"
            or header[1] != "v1"
            or not header[2].startswith("dim=") or not header[3].startswith("classes=")):
        raise ValueError(f"line 1: bad header {lines[0][:60]!r}")
    try:
        dim = int(header[2][4:])
        classes = int(header[3][8:])
    except ValueError:
        raise ValueError("line 1: dim/classes must be integers") from None
    xs, labels, provs, splits = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3 + dim:
            raise ValueError(
                f"line {lineno}: expected {3 + dim} fields, got {len(parts)}")
        if parts[0] not in _SPLIT_CODES:
            raise ValueError(f"line {lineno}: unknown split {parts[0]!r}")
        if parts[1] not in _PROV_CODES:
            raise ValueError(f"line {lineno}: unknown provenance {parts[1]!r}")
        try:
            labels.append(int(parts[2]))
            xs.append([float(v) for v in parts[3:]])
        except ValueError:
            raise ValueError(f"line {lineno}: unparseable numeric field") from None
        splits.append(_SPLIT_CODES[parts[0]])
        provs.append(_PROV_CODES[parts[1]])
    if not xs:
        raise ValueError("dataset file contains no records")
    return Dataset(x=np.array(xs), labels=np.array(labels, dtype=np.int64),
                   provenance=np.array(provs, dtype=np.int8),
                   split=np.array(splits, dtype=np.int8), class_count=classes)


def save_dataset(dataset, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dataset_to_text(dataset))


def load_dataset(path):
    with open(path, "r", encoding="ascii") as fh:
        return text_to_dataset(fh.read())
