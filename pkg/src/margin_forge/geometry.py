"""Feature-space geometry: prototypes, ambiguous bands, cluster spread.

The central object is the band between a class pair (c1, c2): feature
vectors whose projection onto the prototype difference, measured from the
prototype midpoint, is small. Two projection conventions appear below and
are kept separate on purpose:

* raw projection  <z - (mu1+mu2)/2, mu1 - mu2>           (band membership)
* signed offset   raw / ||mu1 - mu2||                     (distance-scaled)

Raw-band thresholds (epsilon) and signed-offset thresholds (epsilon-tilde,
kappa, radius) therefore live on different scales.
"""

from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import model
from .numerics import as_matrix, as_vector


@dataclass(frozen=True)
class PrototypeSet:
    """Per-class mean feature vectors and the sample counts behind them."""

    centroids: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "centroids", as_matrix(self.centroids, "centroids"))
        object.__setattr__(self, "counts",
                           np.ascontiguousarray(self.counts, dtype=np.int64))
        if self.centroids.shape[0] != self.counts.shape[0]:
            raise ValueError("centroid/count class counts differ")
        if np.any(self.counts < 1):
            raise ValueError("every class needs at least one sample")

    @property
    def class_count(self):
        return self.centroids.shape[0]

    def pair(self, c1, c2):
        if c1 == c2:
            raise ValueError("band pairs need two distinct classes")
        return self.centroids[c1], self.centroids[c2]


def prototypes(params, dataset):
    """Class-mean features over clean train records."""
    idx = dataset.clean_train_indices()
    if idx.shape[0] == 0:
        raise ValueError("no clean train records to build prototypes from")
    feats = model.features_batch(params, dataset.x[idx])
    labels = dataset.labels[idx]
    centroids = np.zeros((dataset.class_count, feats.shape[1]))
    counts = np.zeros(dataset.class_count, dtype=np.int64)
    for c in range(dataset.class_count):
        mask = labels == c
        counts[c] = int(mask.sum())
        if counts[c] == 0:
            raise ValueError(f"class {c} has no clean train records")
        centroids[c] = feats[mask].mean(axis=0)
    return PrototypeSet(centroids, counts)


RawBand = namedtuple("RawBand", ["member", "projection", "degenerate"])


def raw_band_membership(z, mu1, mu2, epsilon):
    """Membership in the raw band: |<z - midpoint, mu1 - mu2>| <= epsilon.

    Identical prototypes make every point a member with projection zero;
    the report flags that case as degenerate rather than guessing a side.
    """
    z = as_vector(z, "feature")
    mu1 = as_vector(mu1, "prototype 1")
    mu2 = as_vector(mu2, "prototype 2")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    diff = mu1 - mu2
    if np.all(diff == 0.0):
        return RawBand(True, 0.0, True)
    proj = float((z - 0.5 * (mu1 + mu2)) @ diff)
    return RawBand(bool(abs(proj) <= epsilon), proj, False)


def signed_projections(z, mu1, mu2):
    """Signed offsets <z - midpoint, mu1 - mu2> / ||mu1 - mu2|| for a batch."""
    z = as_matrix(z, "features")
    mu1 = as_vector(mu1, "prototype 1")
    mu2 = as_vector(mu2, "prototype 2")
    diff = mu1 - mu2
    norm = float(np.linalg.norm(diff))
    if norm == 0.0:
        raise ValueError("prototypes coincide; signed projection undefined")
    return (z - 0.5 * (mu1 + mu2)) @ (diff / norm)


def signed_projection(z, mu1, mu2):
    return float(signed_projections(as_vector(z, "feature")[None, :], mu1, mu2)[0])


ClusterStats = namedtuple("ClusterStats", ["radius", "centroid"])


def cluster_radius(features):
    """Centroid of a feature batch and the max distance to it."""
    features = as_matrix(features, "features")
    if features.shape[0] == 0:
        raise ValueError("cluster radius of an empty batch is undefined")
    centroid = features.mean(axis=0)
    radius = float(np.sqrt(((features - centroid) ** 2).sum(axis=1).max()))
    return ClusterStats(radius, centroid)


def prototype_balance(centroid, protos):
    """kappa: worst signed-offset magnitude of ``centroid`` over class pairs."""
    centroid = as_vector(centroid, "centroid")
    worst = 0.0
    for c1 in range(protos.class_count):
        for c2 in range(c1 + 1, protos.class_count):
            offset = abs(signed_projection(centroid, protos.centroids[c1],
                                           protos.centroids[c2]))
            worst = max(worst, offset)
    return worst


def angular_separability(protos):
    """Largest pairwise cosine between prototypes (lower = better separated)."""
    cents = protos.centroids
    norms = np.linalg.norm(cents, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm prototype; cosine separability undefined")
    unit = cents / norms[:, None]
    cos = unit @ unit.T
    upper = cos[np.triu_indices(protos.class_count, k=1)]
    if upper.size == 0:
        raise ValueError("separability needs at least two classes")
    return float(upper.max())


@dataclass
class BandReport:
    """Outcome of checking a feature batch against every pairwise band."""

    pairs: list
    projections: np.ndarray
    epsilon_tilde: float
    membership: np.ndarray
    kappa: float
    radius: float
    max_abs_projection: float

    @property
    def all_inside(self):
        return bool(self.membership.all())

    @property
    def certificate_bound(self):
        """kappa + radius: the threshold the triangle inequality certifies."""
        return self.kappa + self.radius


def multiclass_band_check(features, protos, epsilon_tilde):
    """Check signed offsets of ``features`` against every class-pair band.

    A row is a member when |offset| <= epsilon_tilde for all pairs. kappa and
    radius describe the batch itself (balance of its centroid, spread around
    it), so ``certificate_bound`` is the tightest epsilon-tilde this batch is
    guaranteed to satisfy.
    """
    features = as_matrix(features, "features")
    if features.shape[0] == 0:
        raise ValueError("band check needs at least one feature row")
    if epsilon_tilde < 0:
        raise ValueError("epsilon_tilde must be >= 0")
    pairs = [(c1, c2) for c1 in range(protos.class_count)
             for c2 in range(c1 + 1, protos.class_count)]
    if not pairs:
        raise ValueError("band check needs at least two classes")
    proj = np.empty((features.shape[0], len(pairs)))
    for j, (c1, c2) in enumerate(pairs):
        proj[:, j] = signed_projections(features, protos.centroids[c1],
                                        protos.centroids[c2])
    membership = (np.abs(proj) <= epsilon_tilde).all(axis=1)
    radius, centroid = cluster_radius(features)
    kappa = prototype_balance(centroid, protos)
    return BandReport(pairs=pairs, projections=proj, epsilon_tilde=float(epsilon_tilde),
                      membership=membership, kappa=kappa, radius=radius,
                      max_abs_projection=float(np.abs(proj).max()))


def band_report_table(report):
    """Plain-text table of per-row, per-pair offsets with pass/fail marks."""
    lines = ["row pair offset bound ok"]
    for i in range(report.projections.shape[0]):
        for j, (c1, c2) in enumerate(report.pairs):
            val = float(report.projections[i, j])
            ok = "yes" if abs(val) <= report.epsilon_tilde else "no"
            lines.append(f"{i} {c1}-{c2} {val!r} {report.epsilon_tilde!r} {ok}")
    return "\n".join(lines) + "\n"
