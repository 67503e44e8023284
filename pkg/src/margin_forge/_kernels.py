"""Hot numeric kernels: dense-net forward/backward, pairwise aggregation loss.

Two interchangeable backends live here. The default uses numba @njit with
on-disk caching; setting MARGIN_FORGE_NO_NUMBA=1 (or NUMBA_DISABLE_JIT=1, or
numba being absent) selects vectorized pure-numpy implementations instead.
Both compute the same quantities; parity is covered by tests.

Networks are passed around as a flat float64 parameter vector plus an int64
layer table with one row per affine layer:

    (in_dim, out_dim, act_code, offset)

act_code 0 = identity, 1 = relu. ``offset`` locates the layer inside the
flat vector: weights (out_dim, in_dim) row-major at [offset, offset+in*out),
then the bias at [offset+in*out, offset+in*out+out). A "feature table"
covers extractor layers only; a "full table" appends the linear head.
"""

import os

import numpy as np


def _numba_enabled():
    if os.environ.get("MARGIN_FORGE_NO_NUMBA", "0") not in ("", "0"):
        return False
    if os.environ.get("NUMBA_DISABLE_JIT", "0") == "1":
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = _numba_enabled()

if USE_NUMBA:
    from numba import njit
else:
    def njit(*args, **kwargs):
        def decorator(func):
            return func
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorator


def backend_name():
    """Name of the active kernel backend, for logs and benchmarks."""
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# pure-numpy backend
# ---------------------------------------------------------------------------

def _layer_views(params, tab, layer):
    nin = int(tab[layer, 0])
    nout = int(tab[layer, 1])
    off = int(tab[layer, 3])
    w = params[off:off + nin * nout].reshape(nout, nin)
    b = params[off + nin * nout:off + nin * nout + nout]
    return w, b


def _np_forward_batch(params, tab, x):
    a = x
    for layer in range(tab.shape[0]):
        w, b = _layer_views(params, tab, layer)
        s = a @ w.T + b
        a = np.maximum(s, 0.0) if tab[layer, 2] == 1 else s
    return a.copy() if a is x else a


def _np_xent_loss_grad(params, tab, x, y, weight_decay):
    n_layers = tab.shape[0]
    batch = x.shape[0]
    acts = [x]
    pres = []
    for layer in range(n_layers):
        w, b = _layer_views(params, tab, layer)
        s = acts[-1] @ w.T + b
        pres.append(s)
        acts.append(np.maximum(s, 0.0) if tab[layer, 2] == 1 else s)
    logits = acts[-1]
    shift = logits - logits.max(axis=1, keepdims=True)
    expl = np.exp(shift)
    norm = expl.sum(axis=1)
    rows = np.arange(batch)
    loss = float(np.mean(np.log(norm) - shift[rows, y]))
    delta = expl / norm[:, None]
    delta[rows, y] -= 1.0
    delta /= batch

    grad = np.zeros_like(params)
    for layer in range(n_layers - 1, -1, -1):
        w, _ = _layer_views(params, tab, layer)
        nin = int(tab[layer, 0])
        nout = int(tab[layer, 1])
        off = int(tab[layer, 3])
        gw = delta.T @ acts[layer]
        if weight_decay > 0.0:
            gw = gw + weight_decay * w
            loss += 0.5 * weight_decay * float(np.sum(w * w))
        grad[off:off + nin * nout] = gw.ravel()
        grad[off + nin * nout:off + nin * nout + nout] = delta.sum(axis=0)
        if layer > 0:
            delta = delta @ w
            if tab[layer - 1, 2] == 1:
                delta = delta * (pres[layer - 1] > 0.0)
    return loss, grad


def _np_features_vjp(params, tab, x, dz):
    n_layers = tab.shape[0]
    if n_layers == 0:
        return dz.copy()
    pres = []
    a = x
    for layer in range(n_layers):
        w, b = _layer_views(params, tab, layer)
        s = a @ w.T + b
        pres.append(s)
        a = np.maximum(s, 0.0) if tab[layer, 2] == 1 else s
    delta = dz
    for layer in range(n_layers - 1, -1, -1):
        if tab[layer, 2] == 1:
            delta = delta * (pres[layer] > 0.0)
        w, _ = _layer_views(params, tab, layer)
        delta = delta @ w
    return delta


def _np_pairwise_loss_grad(z, squared):
    batch = z.shape[0]
    scale = 2.0 / (batch * (batch - 1))
    diff = z[:, None, :] - z[None, :, :]
    dist_sq = np.einsum("ijk,ijk->ij", diff, diff)
    if squared:
        loss = 0.5 * scale * float(dist_sq.sum())
        grad = 2.0 * scale * (batch * z - z.sum(axis=0))
        return loss, grad
    dist = np.sqrt(dist_sq)
    loss = 0.5 * scale * float(dist.sum())
    inv = np.zeros_like(dist)
    nz = dist > 0.0
    inv[nz] = 1.0 / dist[nz]
    grad = scale * np.einsum("ijk,ij->ik", diff, inv)
    return loss, grad


def _np_head_hessian(z, probs):
    n, dim = z.shape
    classes = probs.shape[1]
    zb = np.concatenate([z, np.ones((n, 1))], axis=1)
    a = -probs[:, :, None] * probs[:, None, :]
    idx = np.arange(classes)
    a[:, idx, idx] += probs
    block = np.einsum("nce,ni,nj->ciej", a, zb, zb) / n
    block = block.reshape(classes * (dim + 1), classes * (dim + 1))
    perm = np.empty(classes * (dim + 1), dtype=np.int64)
    for c in range(classes):
        for j in range(dim):
            perm[c * dim + j] = c * (dim + 1) + j
        perm[classes * dim + c] = c * (dim + 1) + dim
    return block[np.ix_(perm, perm)]


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

@njit(cache=True)
def _nb_forward_batch(params, tab, x):
    n_layers = tab.shape[0]
    batch = x.shape[0]
    a = x.copy()
    for layer in range(n_layers):
        nin = tab[layer, 0]
        nout = tab[layer, 1]
        act = tab[layer, 2]
        off = tab[layer, 3]
        out = np.empty((batch, nout))
        for n in range(batch):
            for o in range(nout):
                s = params[off + nin * nout + o]
                base = off + o * nin
                for i in range(nin):
                    s += params[base + i] * a[n, i]
                if act == 1 and s < 0.0:
                    s = 0.0
                out[n, o] = s
        a = out
    return a


@njit(cache=True)
def _nb_xent_loss_grad(params, tab, x, y, weight_decay):
    n_layers = tab.shape[0]
    batch = x.shape[0]
    maxw = x.shape[1]
    for layer in range(n_layers):
        if tab[layer, 1] > maxw:
            maxw = tab[layer, 1]
    acts = np.zeros((n_layers + 1, batch, maxw))
    pres = np.zeros((n_layers, batch, maxw))
    acts[0, :, :x.shape[1]] = x
    for layer in range(n_layers):
        nin = tab[layer, 0]
        nout = tab[layer, 1]
        act = tab[layer, 2]
        off = tab[layer, 3]
        for n in range(batch):
            for o in range(nout):
                s = params[off + nin * nout + o]
                base = off + o * nin
                for i in range(nin):
                    s += params[base + i] * acts[layer, n, i]
                pres[layer, n, o] = s
                if act == 1 and s < 0.0:
                    s = 0.0
                acts[layer + 1, n, o] = s

    classes = tab[n_layers - 1, 1]
    loss = 0.0
    delta = np.zeros((batch, maxw))
    for n in range(batch):
        top = acts[n_layers, n, 0]
        for c in range(1, classes):
            if acts[n_layers, n, c] > top:
                top = acts[n_layers, n, c]
        norm = 0.0
        for c in range(classes):
            norm += np.exp(acts[n_layers, n, c] - top)
        loss += np.log(norm) - (acts[n_layers, n, y[n]] - top)
        for c in range(classes):
            p = np.exp(acts[n_layers, n, c] - top) / norm
            if c == y[n]:
                p -= 1.0
            delta[n, c] = p / batch
    loss /= batch

    grad = np.zeros_like(params)
    for layer in range(n_layers - 1, -1, -1):
        nin = tab[layer, 0]
        nout = tab[layer, 1]
        off = tab[layer, 3]
        for o in range(nout):
            base = off + o * nin
            for i in range(nin):
                g = 0.0
                for n in range(batch):
                    g += delta[n, o] * acts[layer, n, i]
                if weight_decay > 0.0:
                    g += weight_decay * params[base + i]
                grad[base + i] = g
            gb = 0.0
            for n in range(batch):
                gb += delta[n, o]
            grad[off + nin * nout + o] = gb
        if weight_decay > 0.0:
            for idx in range(off, off + nin * nout):
                loss += 0.5 * weight_decay * params[idx] * params[idx]
        if layer > 0:
            nxt = np.zeros((batch, maxw))
            prev_act = tab[layer - 1, 2]
            for n in range(batch):
                for i in range(nin):
                    s = 0.0
                    for o in range(nout):
                        s += params[off + o * nin + i] * delta[n, o]
                    if prev_act == 1 and pres[layer - 1, n, i] <= 0.0:
                        s = 0.0
                    nxt[n, i] = s
            delta = nxt
    return loss, grad


@njit(cache=True)
def _nb_features_vjp(params, tab, x, dz):
    n_layers = tab.shape[0]
    batch = x.shape[0]
    if n_layers == 0:
        return dz.copy()
    maxw = x.shape[1]
    for layer in range(n_layers):
        if tab[layer, 1] > maxw:
            maxw = tab[layer, 1]
    acts = np.zeros((n_layers + 1, batch, maxw))
    pres = np.zeros((n_layers, batch, maxw))
    acts[0, :, :x.shape[1]] = x
    for layer in range(n_layers):
        nin = tab[layer, 0]
        nout = tab[layer, 1]
        act = tab[layer, 2]
        off = tab[layer, 3]
        for n in range(batch):
            for o in range(nout):
                s = params[off + nin * nout + o]
                base = off + o * nin
                for i in range(nin):
                    s += params[base + i] * acts[layer, n, i]
                pres[layer, n, o] = s
                if act == 1 and s < 0.0:
                    s = 0.0
                acts[layer + 1, n, o] = s

    delta = np.zeros((batch, maxw))
    delta[:, :dz.shape[1]] = dz
    for layer in range(n_layers - 1, -1, -1):
        nin = tab[layer, 0]
        nout = tab[layer, 1]
        act = tab[layer, 2]
        off = tab[layer, 3]
        if act == 1:
            for n in range(batch):
                for o in range(nout):
                    if pres[layer, n, o] <= 0.0:
                        delta[n, o] = 0.0
        nxt = np.zeros((batch, maxw))
        for n in range(batch):
            for i in range(nin):
                s = 0.0
                for o in range(nout):
                    s += params[off + o * nin + i] * delta[n, o]
                nxt[n, i] = s
        delta = nxt
    return delta[:, :x.shape[1]].copy()


@njit(cache=True)
def _nb_pairwise_loss_grad(z, squared):
    batch, dim = z.shape
    scale = 2.0 / (batch * (batch - 1))
    grad = np.zeros((batch, dim))
    loss = 0.0
    for i in range(batch):
        for j in range(i + 1, batch):
            dist_sq = 0.0
            for k in range(dim):
                t = z[i, k] - z[j, k]
                dist_sq += t * t
            if squared:
                loss += scale * dist_sq
                for k in range(dim):
                    g = 2.0 * scale * (z[i, k] - z[j, k])
                    grad[i, k] += g
                    grad[j, k] -= g
            else:
                dist = np.sqrt(dist_sq)
                if dist > 0.0:
                    loss += scale * dist
                    for k in range(dim):
                        g = scale * (z[i, k] - z[j, k]) / dist
                        grad[i, k] += g
                        grad[j, k] -= g
    return loss, grad


@njit(cache=True)
def _nb_head_hessian(z, probs):
    n, dim = z.shape
    classes = probs.shape[1]
    size = classes * (dim + 1)
    hess = np.zeros((size, size))
    zb = np.empty(dim + 1)
    for s in range(n):
        for i in range(dim):
            zb[i] = z[s, i]
        zb[dim] = 1.0
        for c in range(classes):
            for e in range(classes):
                a = -probs[s, c] * probs[s, e]
                if c == e:
                    a += probs[s, c]
                for i in range(dim + 1):
                    row = c * dim + i if i < dim else classes * dim + c
                    for j in range(dim + 1):
                        col = e * dim + j if j < dim else classes * dim + e
                        hess[row, col] += a * zb[i] * zb[j]
    return hess / n


# ---------------------------------------------------------------------------
# dispatchers
# ---------------------------------------------------------------------------

def _as_batch(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d batch, got shape {x.shape}")
    return x


def _check_tab(params, tab):
    if tab.ndim != 2 or tab.shape[1] != 4:
        raise ValueError(f"layer table must be (L, 4), got {tab.shape}")
    for layer in range(tab.shape[0]):
        nin, nout, act, off = (int(v) for v in tab[layer])
        if act not in (0, 1):
            raise ValueError(f"unknown activation code {act} in layer {layer}")
        if off + nin * nout + nout > params.shape[0]:
            raise ValueError("layer table overruns the parameter vector")


def forward_batch(params, tab, x):
    """Run a batch through the layers of ``tab``; (B, out_dim) output."""
    params = np.ascontiguousarray(params, dtype=np.float64)
    tab = np.ascontiguousarray(tab, dtype=np.int64)
    x = _as_batch(x)
    _check_tab(params, tab)
    if tab.shape[0] == 0:
        return x.copy()
    if tab[0, 0] != x.shape[1]:
        raise ValueError(
            f"input dim {x.shape[1]} does not match layer table ({tab[0, 0]})")
    if USE_NUMBA:
        return _nb_forward_batch(params, tab, x)
    return _np_forward_batch(params, tab, x)


def xent_loss_grad(params, tab, x, y, weight_decay=0.0):
    """Mean softmax cross-entropy (+ 0.5*wd*||W||^2) and its parameter gradient."""
    params = np.ascontiguousarray(params, dtype=np.float64)
    tab = np.ascontiguousarray(tab, dtype=np.int64)
    x = _as_batch(x)
    y = np.ascontiguousarray(y, dtype=np.int64)
    _check_tab(params, tab)
    if tab.shape[0] == 0:
        raise ValueError("loss table must at least contain the head layer")
    if x.shape[0] != y.shape[0]:
        raise ValueError("batch size mismatch between inputs and labels")
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate the loss on an empty batch")
    classes = int(tab[-1, 1])
    if y.min() < 0 or y.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    if USE_NUMBA:
        loss, grad = _nb_xent_loss_grad(params, tab, x, y, float(weight_decay))
        return float(loss), grad
    return _np_xent_loss_grad(params, tab, x, y, float(weight_decay))


def features_vjp(params, tab, x, dz):
    """Pull a feature-space cotangent back to the input: returns dL/dx."""
    params = np.ascontiguousarray(params, dtype=np.float64)
    tab = np.ascontiguousarray(tab, dtype=np.int64)
    x = _as_batch(x)
    dz = _as_batch(dz)
    _check_tab(params, tab)
    if x.shape[0] != dz.shape[0]:
        raise ValueError("batch size mismatch between inputs and cotangents")
    out_dim = int(tab[-1, 1]) if tab.shape[0] else x.shape[1]
    if dz.shape[1] != out_dim:
        raise ValueError(f"cotangent dim {dz.shape[1]} does not match output {out_dim}")
    if USE_NUMBA:
        return _nb_features_vjp(params, tab, x, dz)
    return _np_features_vjp(params, tab, x, dz)


def pairwise_loss_grad(z, squared):
    """Mean pairwise feature distance (squared or not) and its gradient."""
    z = _as_batch(z)
    if z.shape[0] < 2:
        raise ValueError("pairwise aggregation needs a batch of at least 2")
    if USE_NUMBA:
        loss, grad = _nb_pairwise_loss_grad(z, bool(squared))
        return float(loss), grad
    return _np_pairwise_loss_grad(z, bool(squared))


def head_hessian(z, probs):
    """Hessian of mean cross-entropy w.r.t. head params [W row-major, b]."""
    z = _as_batch(z)
    probs = _as_batch(probs)
    if z.shape[0] != probs.shape[0]:
        raise ValueError("feature/probability row counts differ")
    if z.shape[0] == 0:
        raise ValueError("cannot assemble a Hessian from zero samples")
    if USE_NUMBA:
        return _nb_head_hessian(z, probs)
    return _np_head_hessian(z, probs)


def warmup():
    """Trigger jit compilation of every kernel on tiny inputs."""
    params = np.arange(1.0, 18.0)
    tab = np.array([[2, 3, 1, 0], [3, 2, 0, 9]], dtype=np.int64)
    x = np.array([[0.1, -0.2], [0.3, 0.4]])
    y = np.array([0, 1], dtype=np.int64)
    forward_batch(params, tab, x)
    xent_loss_grad(params, tab, x, y, 0.01)
    features_vjp(params, tab[:1], x, np.ones((2, 3)))
    pairwise_loss_grad(x, True)
    pairwise_loss_grad(x, False)
    head_hessian(x, np.full((2, 2), 0.5))
