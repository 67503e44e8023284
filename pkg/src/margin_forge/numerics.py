"""Shared numeric plumbing: validation, seeded streams, grad checks.

Everything downstream leans on three guarantees made here: arrays entering
the pipeline are finite float64, random draws come from counter-based
streams that replay exactly for a (seed, stream) pair, and analytic
gradients can be audited against central differences.
"""

from dataclasses import dataclass, field

import numpy as np


class TrainingDiverged(RuntimeError):
    """Raised when an optimization loop produces a non-finite value."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


def as_vector(x, name="array"):
    """Coerce to a finite float64 1-d array or raise with the offender named."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, name="array"):
    """Coerce to a finite float64 2-d array or raise with the offender named."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_finite(arr, name="array"):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


_MASK64 = (1 << 64) - 1


class RandomStream:
    """Counter-based random stream keyed by (seed, stream).

    Built on numpy's Philox bit generator, so draws depend only on the key
    and the number of values consumed -- replaying a stream from the same
    key reproduces the sequence exactly, and distinct stream ids under one
    seed give statistically independent sequences.
    """

    def __init__(self, seed, stream=0):
        seed = int(seed)
        stream = int(stream)
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be non-negative integers")
        self.seed = seed
        self.stream = stream
        key = ((seed & _MASK64) << 64) | (stream & _MASK64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, stream):
        """Fresh stream under the same seed, independent of this one."""
        return RandomStream(self.seed, stream)

    def standard_normal(self, shape=None):
        return self.gen.standard_normal() if shape is None else self.gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, stream={self.stream})"


def derive_seed(base_seed, *parts):
    """Deterministically mix integer or string tags into a fresh 63-bit seed.

    Used to hand unrelated sub-tasks (per-trial inits, shuffles, eval draws)
    seeds that cannot collide by accident when the tags differ.
    """
    import hashlib

    pieces = [str(int(base_seed))]
    for p in parts:
        pieces.append(p if isinstance(p, str) else str(int(p)))
    digest = hashlib.sha256(":".join(pieces).encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def affine_forward(weights, bias, x):
    """W @ x + b with shape and finiteness checks."""
    weights = as_matrix(weights, "weights")
    bias = as_vector(bias, "bias")
    x = as_vector(x, "input")
    if weights.shape[0] != bias.shape[0]:
        raise ValueError(
            f"bias length {bias.shape[0]} does not match {weights.shape[0]} output rows")
    if weights.shape[1] != x.shape[0]:
        raise ValueError(
            f"input length {x.shape[0]} does not match {weights.shape[1]} columns")
    return weights @ x + bias


@dataclass
class GradCheckReport:
    """Central-difference audit of an analytic gradient."""

    max_rel_error: float
    rel_errors: np.ndarray
    passed: bool
    indeterminate: bool = False
    note: str = ""
    tolerance: float = 1e-4
    checked: int = field(default=0)

    def __post_init__(self):
        self.checked = int(np.size(self.rel_errors))


def grad_check(objective, point, step=1e-5, tolerance=1e-4, indices=None):
    """Compare the gradient reported by ``objective`` against central differences.

    ``objective(x) -> (value, grad)``. Relative error per coordinate uses
    denominator max(|analytic|, |numeric|, 1e-12). A non-finite value or
    difference marks the report indeterminate instead of failed, since the
    objective is not differentiable there.
    """
    point = as_vector(point, "point")
    if step <= 0:
        raise ValueError("step must be positive")
    _, grad = objective(point)
    grad = as_vector(np.asarray(grad, dtype=np.float64).ravel(), "gradient")
    if grad.shape != point.shape:
        raise ValueError("gradient shape does not match the point")
    if indices is None:
        indices = range(point.shape[0])
    indices = list(indices)
    rel = np.zeros(len(indices))
    indeterminate = False
    for pos, i in enumerate(indices):
        bump = np.zeros_like(point)
        bump[i] = step
        up, _ = objective(point + bump)
        down, _ = objective(point - bump)
        if not (np.isfinite(up) and np.isfinite(down)):
            indeterminate = True
            continue
        numeric = (up - down) / (2.0 * step)
        denom = max(abs(grad[i]), abs(numeric), 1e-12)
        rel[pos] = abs(grad[i] - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    passed = bool(max_rel <= tolerance) and not indeterminate
    note = "non-finite probe; result indeterminate" if indeterminate else ""
    return GradCheckReport(max_rel_error=max_rel, rel_errors=rel, passed=passed,
                           indeterminate=indeterminate, note=note, tolerance=tolerance)


def spectral_norm(weights, iterations=1000):
    """Largest singular value via power iteration on the Gram matrix.

    The Rayleigh quotient sequence is nondecreasing, so more iterations can
    only tighten the estimate from below. Iteration stops early once the
    quotient stalls at machine precision.
    """
    weights = as_matrix(weights, "weights")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rows, cols = weights.shape
    gram = weights.T @ weights if cols <= rows else weights @ weights.T
    size = gram.shape[0]
    vec = RandomStream(0x5EED, 0).standard_normal(size)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec = np.ones(size)
        norm = np.sqrt(size)
    vec /= norm
    quotient = 0.0
    for _ in range(iterations):
        nxt = gram @ vec
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return 0.0
        vec = nxt / norm
        fresh = float(vec @ (gram @ vec))
        if abs(fresh - quotient) <= 1e-15 * max(fresh, 1.0):
            quotient = fresh
            break
        quotient = fresh
    return float(np.sqrt(max(quotient, 0.0)))
