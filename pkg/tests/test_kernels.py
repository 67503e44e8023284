"""Numeric kernels against literal references and across both backends."""

import numpy as np
import pytest

from margin_forge import _kernels
from margin_forge.model import ArchSpec, flatten_params, init_params, layer_tables
from margin_forge.numerics import RandomStream, grad_check


def make_net(seed=0, input_dim=3, hidden=(4,), feature_dim=3, classes=3):
    arch = ArchSpec(input_dim=input_dim, class_count=classes, hidden=hidden,
                    feature_dim=feature_dim)
    params = init_params(arch, seed)
    feat_tab, full_tab = layer_tables(params)
    return params, flatten_params(params), feat_tab, full_tab


def ref_forward(params, x, through_head):
    h = np.asarray(x, dtype=float)
    for layer in params.layers:
        h = h @ layer.weights.T + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    if through_head:
        h = h @ params.head_weights.T + params.head_bias
    return h


def ref_xent(params, tab_params, full_tab, x, y, wd):
    logits = _kernels.forward_batch(tab_params, full_tab, x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    base = -logp[np.arange(len(y)), y].mean()
    ridge = 0.0
    for layer in params.layers:
        ridge += np.sum(layer.weights ** 2)
    ridge += np.sum(params.head_weights ** 2)
    return base + 0.5 * wd * ridge


def ref_pairwise(z, squared):
    b = z.shape[0]
    total = 0.0
    for i in range(b):
        for j in range(i + 1, b):
            d2 = float(np.sum((z[i] - z[j]) ** 2))
            total += d2 if squared else np.sqrt(d2)
    return total * 2.0 / (b * (b - 1))


class TestForwardBatch:
    def test_matches_literal_layer_walk(self):
        params, flat, feat_tab, full_tab = make_net(seed=3)
        x = RandomStream(1).standard_normal((7, 3))
        np.testing.assert_allclose(_kernels.forward_batch(flat, feat_tab, x),
                                   ref_forward(params, x, False), atol=1e-12)
        np.testing.assert_allclose(_kernels.forward_batch(flat, full_tab, x),
                                   ref_forward(params, x, True), atol=1e-12)

    def test_empty_table_is_identity(self):
        x = np.array([[1.0, -2.0]])
        out = _kernels.forward_batch(np.empty(0), np.empty((0, 4), dtype=np.int64), x)
        np.testing.assert_array_equal(out, x)

    def test_bad_table_rejected(self):
        _, flat, _, full_tab = make_net()
        bad = full_tab.copy()
        bad[-1, 3] += 1  # offset past the end of the parameter vector
        with pytest.raises(ValueError):
            _kernels.forward_batch(flat, bad, np.zeros((1, 3)))

    def test_dim_mismatch_rejected(self):
        _, flat, _, full_tab = make_net()
        with pytest.raises(ValueError):
            _kernels.forward_batch(flat, full_tab, np.zeros((1, 5)))


class TestXentLossGrad:
    def test_loss_matches_log_softmax_reference(self):
        params, flat, _, full_tab = make_net(seed=5)
        stream = RandomStream(2)
        x = stream.standard_normal((9, 3))
        y = stream.integers(0, 3, size=9)
        for wd in (0.0, 0.05):
            loss, _ = _kernels.xent_loss_grad(flat, full_tab, x, y, wd)
            assert loss == pytest.approx(
                ref_xent(params, flat, full_tab, x, y, wd), rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        _, flat, _, full_tab = make_net(seed=8)
        stream = RandomStream(3)
        x = stream.standard_normal((6, 3))
        y = stream.integers(0, 3, size=6)
        rep = grad_check(lambda f: _kernels.xent_loss_grad(f, full_tab, x, y, 0.01),
                         flat)
        assert rep.passed, rep.max_rel_error

    def test_label_out_of_range_rejected(self):
        _, flat, _, full_tab = make_net()
        with pytest.raises(ValueError):
            _kernels.xent_loss_grad(flat, full_tab, np.zeros((1, 3)),
                                    np.array([3]), 0.0)


class TestFeaturesVjp:
    def test_matches_jacobian_transpose(self):
        params, flat, feat_tab, _ = make_net(seed=11)
        stream = RandomStream(4)
        x0 = stream.standard_normal(3)
        dz = stream.standard_normal(3)

        def scalar(xv):
            z = _kernels.forward_batch(flat, feat_tab, xv[None, :])[0]
            return float(z @ dz)

        got = _kernels.features_vjp(flat, feat_tab, x0[None, :], dz[None, :])[0]
        eps = 1e-6
        fd = np.array([(scalar(x0 + eps * e) - scalar(x0 - eps * e)) / (2 * eps)
                       for e in np.eye(3)])
        np.testing.assert_allclose(got, fd, rtol=1e-5, atol=1e-8)


class TestPairwiseLossGrad:
    @pytest.mark.parametrize("squared", [True, False])
    def test_matches_double_loop(self, squared):
        stream = RandomStream(5)
        for trial in range(5):
            z = stream.standard_normal((int(stream.integers(2, 8)), 3))
            loss, _ = _kernels.pairwise_loss_grad(z, squared)
            assert loss == pytest.approx(ref_pairwise(z, squared), rel=1e-10)

    @pytest.mark.parametrize("squared", [True, False])
    def test_gradient_matches_finite_differences(self, squared):
        z = RandomStream(6).standard_normal((5, 4))

        def obj(flat):
            loss, grad = _kernels.pairwise_loss_grad(flat.reshape(5, 4), squared)
            return loss, grad.ravel()

        rep = grad_check(obj, z.ravel())
        assert rep.passed, rep.max_rel_error

    def test_duplicate_rows_stay_finite(self):
        z = np.ones((4, 3))
        z[2] = 2.0
        loss, grad = _kernels.pairwise_loss_grad(z, False)
        assert np.isfinite(loss) and np.all(np.isfinite(grad))

    def test_single_row_rejected(self):
        with pytest.raises(ValueError):
            _kernels.pairwise_loss_grad(np.ones((1, 3)), True)


class TestHeadHessian:
    def test_matches_finite_difference_hessian(self):
        stream = RandomStream(7)
        b, f, c = 6, 3, 3
        z = stream.standard_normal((b, f))
        w = stream.standard_normal((c, f)) * 0.3
        bias = stream.standard_normal(c) * 0.1
        y = stream.integers(0, c, size=b)

        def loss_at(theta):
            wm = theta[:c * f].reshape(c, f)
            bm = theta[c * f:]
            logits = z @ wm.T + bm
            shifted = logits - logits.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            return -logp[np.arange(b), y].mean()

        theta = np.concatenate([w.ravel(), bias])
        logits = z @ w.T + bias
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        got = _kernels.head_hessian(z, probs)

        dim = theta.shape[0]
        eps = 1e-5
        fd = np.zeros((dim, dim))
        for i in range(dim):
            for j in range(dim):
                pp = theta.copy(); pp[i] += eps; pp[j] += eps
                pm = theta.copy(); pm[i] += eps; pm[j] -= eps
                mp = theta.copy(); mp[i] -= eps; mp[j] += eps
                mm = theta.copy(); mm[i] -= eps; mm[j] -= eps
                fd[i, j] = (loss_at(pp) - loss_at(pm) - loss_at(mp)
                            + loss_at(mm)) / (4 * eps * eps)
        np.testing.assert_allclose(got, fd, atol=5e-6)
        np.testing.assert_allclose(got, got.T, atol=1e-12)


@pytest.mark.skipif(not _kernels.USE_NUMBA,
                    reason="jit backend inactive; nothing to compare")
class TestBackendParity:
    """The jit twins must agree with the numpy implementations bit-closely."""

    def test_all_kernels_agree(self):
        params, flat, feat_tab, full_tab = make_net(seed=13, hidden=(5, 4),
                                                    feature_dim=3)
        stream = RandomStream(9)
        x = stream.standard_normal((8, 3))
        y = stream.integers(0, 3, size=8)
        z = stream.standard_normal((8, 3))
        dz = stream.standard_normal((8, 3))
        probs = np.exp(stream.standard_normal((8, 3)))
        probs /= probs.sum(axis=1, keepdims=True)

        pairs = [
            (_kernels._nb_forward_batch(flat, full_tab, x),
             _kernels._np_forward_batch(flat, full_tab, x)),
            (_kernels._nb_features_vjp(flat, feat_tab, x, dz),
             _kernels._np_features_vjp(flat, feat_tab, x, dz)),
            (_kernels._nb_head_hessian(z, probs),
             _kernels._np_head_hessian(z, probs)),
        ]
        for got, want in pairs:
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

        for wd in (0.0, 0.1):
            l1, g1 = _kernels._nb_xent_loss_grad(flat, full_tab, x, y, wd)
            l2, g2 = _kernels._np_xent_loss_grad(flat, full_tab, x, y, wd)
            assert l1 == pytest.approx(l2, rel=1e-12)
            np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-12)
        for squared in (True, False):
            l1, g1 = _kernels._nb_pairwise_loss_grad(z, squared)
            l2, g2 = _kernels._np_pairwise_loss_grad(z, squared)
            assert l1 == pytest.approx(l2, rel=1e-12)
            np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-12)


def test_warmup_runs():
    _kernels.warmup()


def test_backend_name():
    assert _kernels.backend_name() in ("numba", "numpy")
