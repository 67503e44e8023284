"""Trigger patterns and their optimization under an L-inf box.

A trigger blends a fixed pattern into an input, t(x) = (1-alpha)x +
alpha*phi with ||phi||_inf <= delta. Optimization runs projected gradient
descent on an aggregation loss that pulls triggered features together; the
recorded per-step gradient is the projected gradient mapping
(phi_k - phi_{k+1})/eta, which is the quantity the descent inequality and
the convergence certificate control (it equals the raw gradient whenever
the box constraint is slack).
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels, model
from .numerics import RandomStream, TrainingDiverged, as_matrix, as_vector

OBJECTIVES = ("symmetric", "pairwise_squared", "pairwise")


@dataclass(frozen=True)
class TriggerPattern:
    """Blend pattern phi with strength alpha inside the box ||phi||_inf <= delta."""

    phi: np.ndarray
    alpha: float
    delta: float

    def __post_init__(self):
        object.__setattr__(self, "phi", as_vector(self.phi, "phi"))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "delta", float(self.delta))
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.delta <= 0.0:
            raise ValueError("delta must be > 0")
        if np.abs(self.phi).max() > self.delta:
            raise ValueError("phi violates the box ||phi||_inf <= delta")

    @property
    def dim(self):
        return self.phi.shape[0]


def apply_trigger_batch(x, trig):
    x = as_matrix(x, "inputs")
    if x.shape[1] != trig.dim:
        raise ValueError(f"trigger dim {trig.dim} does not match inputs {x.shape[1]}")
    return (1.0 - trig.alpha) * x + trig.alpha * trig.phi


def apply_trigger(x, trig):
    return apply_trigger_batch(as_vector(x, "input")[None, :], trig)[0]


def agg_loss_pairwise(features, squared=False):
    """Mean pairwise distance over the batch (squared if asked) and gradient."""
    return _kernels.pairwise_loss_grad(features, squared)


def agg_loss_symmetric(features):
    """(2/(B-1)) * sum of squared distances to the batch mean."""
    features = as_matrix(features, "features")
    batch = features.shape[0]
    if batch < 2:
        raise ValueError("symmetric aggregation needs a batch of at least 2")
    centered = features - features.mean(axis=0)
    return float(2.0 / (batch - 1) * np.sum(centered * centered))


def _symmetric_loss_grad(features):
    batch = features.shape[0]
    if batch < 2:
        raise ValueError("symmetric aggregation needs a batch of at least 2")
    centered = features - features.mean(axis=0)
    loss = float(2.0 / (batch - 1) * np.sum(centered * centered))
    return loss, 4.0 / (batch - 1) * centered


def prototype_align_objective(features, target_proto):
    """Sum of squared distances to a target prototype, with gradient."""
    features = as_matrix(features, "features")
    target = as_vector(target_proto, "target prototype")
    if features.shape[1] != target.shape[0]:
        raise ValueError("prototype dim does not match features")
    diff = features - target
    return float(np.sum(diff * diff)), 2.0 * diff


def _objective_route(name):
    if name == "symmetric":
        return _symmetric_loss_grad
    if name == "pairwise_squared":
        return lambda z: _kernels.pairwise_loss_grad(z, True)
    if name == "pairwise":
        return lambda z: _kernels.pairwise_loss_grad(z, False)
    raise ValueError(f"unknown objective {name!r}; pick from {OBJECTIVES}")


def default_step_size(alpha, lipschitz):
    """Canonical PGD rate 1 / (4 alpha^2 L^2)."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if lipschitz <= 0:
        raise ValueError("step size needs a positive Lipschitz bound")
    return 1.0 / (4.0 * alpha * alpha * lipschitz * lipschitz)


def pgd_step(trig, grad_phi, eta):
    """One projected step: clamp(phi - eta*grad) back into the box."""
    grad_phi = as_vector(grad_phi, "gradient")
    if grad_phi.shape[0] != trig.dim:
        raise ValueError("gradient dim does not match the trigger")
    if eta <= 0:
        raise ValueError("eta must be > 0")
    phi = np.clip(trig.phi - eta * grad_phi, -trig.delta, trig.delta)
    return TriggerPattern(phi, trig.alpha, trig.delta)


@dataclass
class OptimizationTrace:
    """Per-step PGD record plus the full-train loss at the final pattern."""

    loss: np.ndarray
    grad_norm: np.ndarray
    eta: np.ndarray
    phi_delta: np.ndarray
    final_loss: float
    full_batch: bool
    batch_size: int
    epochs: int
    objective: str
    notes: tuple = field(default_factory=tuple)

    @property
    def steps(self):
        return self.loss.shape[0]

    def prefix(self, k):
        """Truncate to the first ``k`` steps; exact for full-batch traces,
        where loss[k] is the objective at the pattern after step k."""
        if not 1 <= k <= self.steps:
            raise ValueError(f"prefix length must be in [1, {self.steps}]")
        final = float(self.loss[k]) if k < self.steps else self.final_loss
        return OptimizationTrace(self.loss[:k], self.grad_norm[:k], self.eta[:k],
                                 self.phi_delta[:k], final, self.full_batch,
                                 self.batch_size, self.epochs, self.objective,
                                 self.notes)


def _epoch_batches(labels, class_lists, batch_size, stream, notes):
    """Stratified batches: shuffle within class, interleave round-robin."""
    shuffled = []
    for cls_idx in class_lists:
        shuffled.append(cls_idx[stream.permutation(cls_idx.shape[0])])
    order = np.empty(labels.shape[0], dtype=np.int64)
    pos = 0
    cursors = [0] * len(shuffled)
    while pos < order.shape[0]:
        for c, cls in enumerate(shuffled):
            if cursors[c] < cls.shape[0]:
                order[pos] = cls[cursors[c]]
                cursors[c] += 1
                pos += 1
    batches = [order[s:s + batch_size] for s in range(0, order.shape[0], batch_size)]
    if len(batches) > 1 and batches[-1].shape[0] < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    fixed = []
    for b in batches:
        tries = 0
        while np.unique(labels[b]).shape[0] < 2:
            b = stream.choice(np.arange(labels.shape[0]), size=b.shape[0], replace=False)
            tries += 1
            if tries == 1:
                notes.append("resampled a single-class batch")
            if tries > 100:
                raise ValueError("could not draw a mixed-class batch in 100 tries")
        fixed.append(b)
    return fixed


def optimize_trigger(dataset, params, steps, batch_size, alpha, delta,
                     eta=None, seed=0, objective="symmetric"):
    """PGD on the aggregation loss of triggered train-split features.

    ``steps`` counts epochs; with a full batch (batch_size None, 0, or >= the
    train split) each epoch is exactly one projected step, which is the
    regime the convergence certificate and descent check reason about.
    Returns (TriggerPattern, OptimizationTrace).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    route = _objective_route(objective)
    idx = dataset.train_indices()
    n = idx.shape[0]
    if n < 2:
        raise ValueError("trigger optimization needs at least 2 train records")
    x = dataset.x[idx]
    labels = dataset.labels[idx]

    full_batch = batch_size is None or batch_size == 0 or batch_size >= n
    if not full_batch and batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    effective_bs = n if full_batch else int(batch_size)

    lip = model.lipschitz_bound(params)
    if eta is None:
        eta = default_step_size(alpha, lip)
    if eta <= 0:
        raise ValueError("eta must be > 0")

    flat = model.flatten_params(params)
    feat_tab, _ = model.layer_tables(params)

    init_stream = RandomStream(seed)
    phi = np.clip(init_stream.standard_normal(dataset.dim), -delta, delta)

    class_lists = [np.where(labels == c)[0] for c in range(dataset.class_count)]
    class_lists = [cl for cl in class_lists if cl.shape[0] > 0]

    losses, gnorms, etas, deltas = [], [], [], []
    notes = []
    step_no = 0
    for epoch in range(steps):
        if full_batch:
            batches = [np.arange(n)]
        else:
            batches = _epoch_batches(labels, class_lists, effective_bs,
                                     RandomStream(seed, epoch + 1), notes)
        for batch in batches:
            xp = (1.0 - alpha) * x[batch] + alpha * phi
            feats = _kernels.forward_batch(flat, feat_tab, xp)
            loss, dz = route(feats)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"aggregation loss became non-finite at step {step_no}", step_no)
            dx = _kernels.features_vjp(flat, feat_tab, xp, dz)
            grad_phi = alpha * dx.sum(axis=0)
            new_phi = np.clip(phi - eta * grad_phi, -delta, delta)
            mapping = (phi - new_phi) / eta
            losses.append(loss)
            gnorms.append(float(np.linalg.norm(mapping)))
            etas.append(float(eta))
            deltas.append(float(np.linalg.norm(new_phi - phi)))
            phi = new_phi
            step_no += 1

    xp = (1.0 - alpha) * x + alpha * phi
    feats = _kernels.forward_batch(flat, feat_tab, xp)
    final_loss, _ = route(feats)
    trace = OptimizationTrace(np.asarray(losses), np.asarray(gnorms),
                              np.asarray(etas), np.asarray(deltas),
                              float(final_loss), full_batch, effective_bs,
                              steps, objective, tuple(notes))
    return TriggerPattern(phi, alpha, delta), trace


@dataclass
class CertificateReport:
    """min ||g||^2 against the 8 alpha^2 L^2 (L0 - Lstar) / K budget."""

    min_grad_sq: float
    bound: float
    steps: int
    initial_loss: float
    best_loss: float
    eta_consistent: bool
    passed: bool
    note: str = ""


def convergence_certificate(trace, alpha, lipschitz, initial_loss=None,
                            best_loss_bound=None):
    """Check min_k ||g_k||^2 <= (8 alpha^2 L^2 / K) (L0 - Lstar).

    Defaults take L0 from the first recorded loss and Lstar from the best
    loss seen (including the final full-train value). The bound presumes the
    canonical step size; a differing eta is flagged, not failed.
    """
    if trace.steps < 1:
        raise ValueError("certificate needs at least one recorded step")
    if lipschitz <= 0 or alpha <= 0:
        raise ValueError("alpha and the Lipschitz bound must be > 0")
    l0 = float(trace.loss[0]) if initial_loss is None else float(initial_loss)
    lstar = (min(float(trace.loss.min()), trace.final_loss)
             if best_loss_bound is None else float(best_loss_bound))
    k = trace.steps
    bound = 8.0 * alpha * alpha * lipschitz * lipschitz * (l0 - lstar) / k
    min_grad_sq = float((trace.grad_norm ** 2).min())
    canonical = default_step_size(alpha, lipschitz)
    eta_ok = bool(np.allclose(trace.eta, canonical, rtol=1e-9, atol=0.0))
    passed = min_grad_sq <= bound * (1.0 + 1e-9) + 1e-18
    note = "" if eta_ok else "trace eta differs from the canonical step size"
    return CertificateReport(min_grad_sq=min_grad_sq, bound=float(bound), steps=k,
                             initial_loss=l0, best_loss=lstar,
                             eta_consistent=eta_ok, passed=bool(passed), note=note)


@dataclass
class DescentReport:
    """Per-step check of loss decrease >= (eta/2) ||g||^2."""

    fraction_satisfied: float
    worst_violation: float
    steps: int


def descent_inequality_check(trace):
    """Fraction of steps whose decrease meets (eta/2)||g||^2.

    Only meaningful for full-batch traces, where consecutive recorded losses
    are the exact objective before and after each projected step.
    """
    if not trace.full_batch:
        raise ValueError("descent check requires a full-batch trace")
    if trace.steps < 1:
        raise ValueError("descent check needs at least one step")
    after = np.concatenate([trace.loss[1:], [trace.final_loss]])
    decrease = trace.loss - after
    required = 0.5 * trace.eta * trace.grad_norm ** 2
    slack = 1e-12 * np.maximum(np.abs(trace.loss), 1.0)
    ok = decrease + slack >= required
    violation = float(np.max(required - decrease)) if trace.steps else 0.0
    return DescentReport(fraction_satisfied=float(np.mean(ok)),
                         worst_violation=max(violation, 0.0),
                         steps=trace.steps)


def radius_from_eps(batch_size, eps):
    """Radius certified by a squared-symmetric loss value: sqrt((B-1)/2 * eps)."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return float(np.sqrt(0.5 * (batch_size - 1) * eps))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_TRIGGER_HEADER = "#margin-forge-trigger v1"


def trigger_to_text(trig):
    phi = " ".join(repr(float(v)) for v in trig.phi)
    return (f"{_TRIGGER_HEADER}\n"
            f"dim {trig.dim}\n"
            f"alpha {trig.alpha!r}\n"
            f"delta {trig.delta!r}\n"
            f"phi {phi}\n"
            f"end\n")


def text_to_trigger(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != _TRIGGER_HEADER:
        raise ValueError("line 1: bad trigger header")
    fields = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if line.strip() == "end":
            break
        key, _, rest = line.partition(" ")
        fields[key] = (rest, lineno)
    else:
        raise ValueError("missing end marker")
    for key in ("dim", "alpha", "delta", "phi"):
        if key not in fields:
            raise ValueError(f"missing field {key!r}")
    try:
        dim = int(fields["dim"][0])
        alpha = float(fields["alpha"][0])
        delta = float(fields["delta"][0])
        phi = np.array([float(v) for v in fields["phi"][0].split()])
    except ValueError:
        raise ValueError(f"line {fields['phi'][1]}: unparseable trigger fields") from None
    if phi.shape[0] != dim:
        raise ValueError(f"line {fields['phi'][1]}: expected {dim} phi values")
    return TriggerPattern(phi, alpha, delta)


def save_trigger(trig, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(trigger_to_text(trig))


def load_trigger(path):
    with open(path, "r", encoding="ascii") as fh:
        return text_to_trigger(fh.read())


def trace_to_csv(trace):
    lines = ["step,loss,grad_norm,eta,phi_delta"]
    for i in range(trace.steps):
        lines.append(",".join([str(i)] + [repr(float(v)) for v in
                                          (trace.loss[i], trace.grad_norm[i],
                                           trace.eta[i], trace.phi_delta[i])]))
    return "\n".join(lines) + "\n"


def save_trace(trace, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(trace_to_csv(trace))
