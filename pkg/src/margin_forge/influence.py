"""Influence-function drift: Hessians, bounds, and a retrain oracle.

The drift of trained parameters caused by a small poison set is estimated
as -(eta/N) H^-1 sum of poison gradients, where H is the (damped) Hessian
of the clean training objective. The companion bound is
rho = eta*k*G / (N*lambda_min), with G the worst poison gradient norm.

Softmax heads carry a flat direction (shifting every class logit equally),
so the raw cross-entropy Hessian is singular; damping keeps solves honest
and is reported through lambda_min, which makes rho conservative rather
than undefined.
"""

from collections import namedtuple
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from . import _kernels, datagen, model
from .numerics import RandomStream, as_matrix

FULL_MODE_PARAM_CAP = 2000


def _softmax(logits):
    shift = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shift)
    return e / e.sum(axis=1, keepdims=True)


def _weight_coordinate_mask(params, mode):
    """Boolean mask of weight (not bias) coordinates in the flat layout."""
    if mode == "head":
        size = params.head_weights.size + params.head_bias.size
        mask = np.zeros(size, dtype=bool)
        mask[:params.head_weights.size] = True
        return mask
    mask = np.zeros(params.param_count, dtype=bool)
    pos = 0
    for layer in params.layers:
        mask[pos:pos + layer.weights.size] = True
        pos += layer.weights.size + layer.bias.size
    mask[pos:pos + params.head_weights.size] = True
    return mask


def _hvp(flat, tab, x, y, vec):
    """Exact Hessian-vector product of mean cross-entropy, by pushing a
    parameter tangent through the forward and backward passes."""
    n_layers = tab.shape[0]
    batch = x.shape[0]
    a, da = x, np.zeros_like(x)
    acts, dacts, pres = [a], [da], []
    for layer in range(n_layers):
        nin, nout, act, off = (int(v) for v in tab[layer])
        w = flat[off:off + nin * nout].reshape(nout, nin)
        b = flat[off + nin * nout:off + nin * nout + nout]
        dw = vec[off:off + nin * nout].reshape(nout, nin)
        db = vec[off + nin * nout:off + nin * nout + nout]
        s = a @ w.T + b
        ds = da @ w.T + a @ dw.T + db
        pres.append(s)
        if act == 1:
            mask = s > 0.0
            a, da = s * mask, ds * mask
        else:
            a, da = s, ds
        acts.append(a)
        dacts.append(da)
    probs = _softmax(a)
    dprobs = probs * (da - (probs * da).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    delta = probs.copy()
    delta[rows, y] -= 1.0
    delta /= batch
    ddelta = dprobs / batch

    hv = np.zeros_like(flat)
    for layer in range(n_layers - 1, -1, -1):
        nin, nout, act, off = (int(v) for v in tab[layer])
        w = flat[off:off + nin * nout].reshape(nout, nin)
        dw = vec[off:off + nin * nout].reshape(nout, nin)
        hv[off:off + nin * nout] = (ddelta.T @ acts[layer]
                                    + delta.T @ dacts[layer]).ravel()
        hv[off + nin * nout:off + nin * nout + nout] = ddelta.sum(axis=0)
        if layer > 0:
            delta_prev = delta @ w
            ddelta_prev = ddelta @ w + delta @ dw
            if tab[layer - 1, 2] == 1:
                mask = pres[layer - 1] > 0.0
                delta_prev = delta_prev * mask
                ddelta_prev = ddelta_prev * mask
            delta, ddelta = delta_prev, ddelta_prev
    return hv


def _full_hessian(params, x, y):
    flat = model.flatten_params(params)
    _, full_tab = model.layer_tables(params)
    size = flat.shape[0]
    hess = np.empty((size, size))
    basis = np.zeros(size)
    for j in range(size):
        basis[j] = 1.0
        hess[:, j] = _hvp(flat, full_tab, x, y, basis)
        basis[j] = 0.0
    return 0.5 * (hess + hess.T)


def min_eigenvalue(matrix, iterations=200):
    """Smallest-magnitude eigenvalue via inverse power iteration."""
    matrix = as_matrix(matrix, "matrix")
    if matrix.shape[0] != matrix.shape[1]:
        raise ValueError("matrix must be square")
    try:
        factor = lu_factor(matrix)
    except ValueError as exc:
        raise ValueError(f"singular matrix in eigenvalue estimate: {exc}") from None
    vec = RandomStream(0x5EED, 1).standard_normal(matrix.shape[0])
    vec /= np.linalg.norm(vec)
    previous = None
    for _ in range(iterations):
        nxt = lu_solve(factor, vec)
        norm = np.linalg.norm(nxt)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("inverse iteration failed; matrix is near-singular")
        vec = nxt / norm
        rayleigh = float(vec @ (matrix @ vec))
        if previous is not None and abs(rayleigh - previous) <= 1e-14 * max(abs(rayleigh), 1.0):
            return rayleigh
        previous = rayleigh
    return previous


HessianResult = namedtuple("HessianResult", ["matrix", "lambda_min", "damping", "mode"])


def clean_hessian(params, dataset, damping="auto", mode="head", weight_decay=0.0):
    """Damped Hessian of the clean training objective over clean train records.

    ``head`` mode assembles the closed form for the linear head only (the
    extractor is frozen); ``full`` mode builds the exact Hessian over every
    parameter via Hessian-vector products and is capped at
    FULL_MODE_PARAM_CAP parameters. ``weight_decay`` adds the ridge term's
    curvature on weight coordinates, matching how the model was trained;
    ``damping`` ("auto" = 1e-3 * trace/dim) is an extra stabilizer on the
    whole diagonal.
    """
    if mode not in ("head", "full"):
        raise ValueError("mode must be 'head' or 'full'")
    if weight_decay < 0:
        raise ValueError("weight_decay must be >= 0")
    idx = dataset.clean_train_indices()
    if idx.shape[0] == 0:
        raise ValueError("no clean train records to build a Hessian from")
    x = dataset.x[idx]
    y = dataset.labels[idx]
    if mode == "head":
        feats = model.features_batch(params, x)
        probs = _softmax(model.logits_batch(params, x))
        hess = _kernels.head_hessian(feats, probs)
    else:
        if params.param_count > FULL_MODE_PARAM_CAP:
            raise ValueError(
                f"full mode caps at {FULL_MODE_PARAM_CAP} parameters; "
                f"this model has {params.param_count} (use mode='head')")
        hess = _full_hessian(params, x, y)
    if weight_decay > 0.0:
        wmask = _weight_coordinate_mask(params, mode)
        hess[np.diag_indices_from(hess)] += weight_decay * wmask
    if damping == "auto":
        damping = 1e-3 * float(np.trace(hess)) / hess.shape[0]
    if damping < 0:
        raise ValueError("damping must be >= 0")
    if damping > 0.0:
        hess = hess + damping * np.eye(hess.shape[0])
    lam = min_eigenvalue(hess)
    return HessianResult(hess, float(lam), float(damping), mode)


def _poison_gradients(params, x_p, y_p, mode):
    """Per-record cross-entropy gradients, one row per poison record."""
    x_p = as_matrix(x_p, "poison inputs")
    y_p = np.ascontiguousarray(y_p, dtype=np.int64)
    if x_p.shape[0] != y_p.shape[0]:
        raise ValueError("poison input/label counts differ")
    k = x_p.shape[0]
    if mode == "head":
        feats = model.features_batch(params, x_p)
        probs = _softmax(model.logits_batch(params, x_p))
        rows = np.arange(k)
        err = probs.copy()
        err[rows, y_p] -= 1.0
        grads = np.empty((k, params.head_weights.size + params.head_bias.size))
        for i in range(k):
            gw = np.outer(err[i], feats[i])
            grads[i, :gw.size] = gw.ravel()
            grads[i, gw.size:] = err[i]
        return grads
    flat = model.flatten_params(params)
    _, full_tab = model.layer_tables(params)
    grads = np.empty((k, flat.shape[0]))
    for i in range(k):
        _, g = _kernels.xent_loss_grad(flat, full_tab, x_p[i:i + 1],
                                       y_p[i:i + 1], 0.0)
        grads[i] = g
    return grads


@dataclass
class InfluenceEstimate:
    """First-order drift of trained parameters caused by a poison set."""

    delta_theta: np.ndarray
    rho: float
    eta: float
    k: int
    n_train: int
    grad_bound: float
    lambda_min: float
    mode: str
    beta_prime: float

    @property
    def drift_norm(self):
        return float(np.linalg.norm(self.delta_theta))


def influence_drift(params, hessian, poison_x, poison_y, eta, n_train):
    """Estimate drift -(eta/N) H^-1 sum(grad) and its bound rho.

    ``hessian`` is the HessianResult from ``clean_hessian``. The estimate is
    additive over poison records (it is linear in the gradient sum), and its
    norm never exceeds rho when lambda_min is positive. beta_prime reports
    the largest drift any single record contributes on its own.
    """
    if eta <= 0:
        raise ValueError("eta must be > 0")
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    if hessian.lambda_min <= 0:
        raise ValueError(
            f"drift bound needs a positive-definite Hessian "
            f"(lambda_min={hessian.lambda_min!r}); increase damping")
    grads = _poison_gradients(params, poison_x, poison_y, hessian.mode)
    k = grads.shape[0]
    size = hessian.matrix.shape[0]
    if grads.shape[1] != size:
        raise ValueError("gradient layout does not match the Hessian mode")
    if k == 0:
        return InfluenceEstimate(np.zeros(size), 0.0, float(eta), 0,
                                 int(n_train), 0.0, hessian.lambda_min,
                                 hessian.mode, 0.0)
    factor = lu_factor(hessian.matrix)
    per_record = -(eta / n_train) * lu_solve(factor, grads.T).T
    delta = per_record.sum(axis=0)
    grad_bound = float(np.linalg.norm(grads, axis=1).max())
    rho = drift_bound_rho(eta, k, grad_bound, n_train, hessian.lambda_min)
    beta_prime = float(np.linalg.norm(per_record, axis=1).max())
    return InfluenceEstimate(delta, rho, float(eta), int(k), int(n_train),
                             grad_bound, hessian.lambda_min, hessian.mode,
                             beta_prime)


def drift_bound_rho(eta, k, grad_bound, n_train, lambda_min):
    """rho = eta * k * G / (N * lambda_min)."""
    if eta <= 0 or n_train < 1 or grad_bound < 0:
        raise ValueError("eta, n_train must be positive and G >= 0")
    if k < 0:
        raise ValueError("k must be >= 0")
    if lambda_min <= 0:
        raise ValueError("rho needs lambda_min > 0; add damping")
    return float(eta * k * grad_bound / (n_train * lambda_min))


RetrainResult = namedtuple("RetrainResult", ["delta", "clean", "poisoned"])


def retrain_oracle(dataset, poison_x, poison_y, config, arch=None, init_seed=0):
    """Ground-truth drift: train clean and poisoned runs from the same init
    and shuffle seeds, return their flat parameter difference."""
    clean, _ = model.train_erm(dataset, config, arch=arch, init_seed=init_seed)
    poisoned_ds = datagen.append_train_records(dataset, poison_x, poison_y)
    poisoned, _ = model.train_erm(poisoned_ds, config, arch=arch, init_seed=init_seed)
    delta = model.flatten_params(poisoned) - model.flatten_params(clean)
    return RetrainResult(delta, clean, poisoned)


def clean_accuracy_bound(nu_hat, feature_radius, rho):
    """gamma <= min(1, nu_hat * 2 * R * rho): worst clean-accuracy drop."""
    if nu_hat < 0 or feature_radius < 0 or rho < 0:
        raise ValueError("nu_hat, feature_radius, and rho must be >= 0")
    return float(min(1.0, nu_hat * 2.0 * feature_radius * rho))


def influence_report_text(est):
    lines = ["#margin-forge-influence v1",
             f"mode {est.mode}",
             f"k {est.k}",
             f"n_train {est.n_train}",
             f"eta {est.eta!r}",
             f"grad_bound {est.grad_bound!r}",
             f"lambda_min {est.lambda_min!r}",
             f"rho {est.rho!r}",
             f"beta_prime {est.beta_prime!r}",
             "delta_theta " + " ".join(repr(float(v)) for v in est.delta_theta),
             "end"]
    return "\n".join(lines) + "\n"
