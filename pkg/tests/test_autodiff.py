"""Finite-difference checks for every autodiff primitive."""

import numpy as np
import pytest

from convssp import autodiff as ad


def fd_gradients(fn, tensors, h=1e-6):
    """Central-difference gradients of scalar fn() w.r.t. each tensor."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def check(fn, tensors, rtol=1e-6, atol=1e-8):
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    numeric = fd_gradients(fn, tensors)
    for t, num in zip(tensors, numeric):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        np.testing.assert_allclose(analytic, num, rtol=rtol, atol=atol)


def param(rng, *shape):
    t = ad.Tensor(rng.standard_normal(shape))
    t.requires_grad = True
    return t


class TestPrimitives:
    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def test_add_broadcast_bias(self):
        a, b = param(self.rng, 3, 4), param(self.rng, 4)
        check(lambda: (a + b).sum(), [a, b])

    def test_mul_broadcast(self):
        a, b = param(self.rng, 2, 5), param(self.rng, 1, 5)
        check(lambda: ad.mul(a, b).sum(), [a, b])

    def test_sub_and_neg(self):
        a, b = param(self.rng, 3), param(self.rng, 3)
        check(lambda: (a - b).sum(), [a, b])
        check(lambda: (-a).sum(), [a])

    def test_matmul_2d(self):
        a, b = param(self.rng, 3, 4), param(self.rng, 4, 2)
        check(lambda: (a @ b).sum(), [a, b])

    def test_matmul_batched(self):
        a, b = param(self.rng, 2, 3, 4), param(self.rng, 2, 4, 3)
        check(lambda: (a @ b).sum(), [a, b])

    def test_reshape_transpose(self):
        a = param(self.rng, 2, 6)
        check(lambda: ad.transpose(a.reshape(2, 3, 2), (1, 0, 2)).sum(), [a])

    def test_take_rows_with_repeats(self):
        table = param(self.rng, 5, 3)
        idx = np.array([0, 2, 2, 4])
        check(lambda: ad.take_rows(table, idx).sum(), [table])

    def test_concat_rows(self):
        rows = [param(self.rng, 4) for _ in range(3)]
        check(lambda: (ad.concat_rows(rows) * ad.concat_rows(rows)).sum(), rows)

    def test_reduce_sum_axis(self):
        a = param(self.rng, 3, 4)
        check(lambda: ad.mul(a.sum(axis=0), a.sum(axis=0)).sum(), [a])

    def test_reduce_mean(self):
        a = param(self.rng, 6)
        check(lambda: ad.mul(a.mean(), a.mean()), [a])

    def test_sigmoid(self):
        a = param(self.rng, 7)
        check(lambda: ad.sigmoid(a).sum(), [a])

    def test_gelu(self):
        a = param(self.rng, 9)
        check(lambda: ad.gelu(a).sum(), [a])

    def test_log_of_clipped(self):
        a = param(self.rng, 5)
        check(lambda: ad.log(ad.clip(ad.sigmoid(a), 1e-9, 1 - 1e-9)).sum(), [a])

    def test_clip_blocks_gradient_outside(self):
        a = ad.Tensor(np.array([-2.0, 0.5, 2.0]))
        a.requires_grad = True
        out = ad.clip(a, 0.0, 1.0).sum()
        out.backward()
        np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])

    def test_softmax(self):
        a = param(self.rng, 2, 5)
        w = ad.Tensor(self.rng.standard_normal((2, 5)))
        check(lambda: ad.mul(ad.softmax(a), w).sum(), [a])

    def test_layer_norm(self):
        x = param(self.rng, 3, 6)
        g = param(self.rng, 6)
        b = param(self.rng, 6)
        w = ad.Tensor(self.rng.standard_normal((3, 6)))
        check(lambda: ad.mul(ad.layer_norm(x, g, b), w).sum(), [x, g, b], rtol=1e-5)

    def test_euclidean_distance(self):
        a, b = param(self.rng, 6), param(self.rng, 6)
        check(lambda: ad.euclidean_distance(a, b), [a, b])

    def test_euclidean_distance_zero_subgradient(self):
        a = param(self.rng, 4)
        b = ad.Tensor(a.data.copy())
        b.requires_grad = True
        d = ad.euclidean_distance(a, b)
        assert d.item() == 0.0
        d.backward()
        np.testing.assert_array_equal(a.grad, np.zeros(4))
        np.testing.assert_array_equal(b.grad, np.zeros(4))

    def test_cross_entropy_with_logits(self):
        z = param(self.rng, 4, 4)
        targets = np.arange(4)
        check(lambda: ad.cross_entropy_with_logits(z, targets), [z])

    def test_dropout_mask_consistency(self):
        x = param(self.rng, 8, 8)
        out = ad.dropout(x, 0.5, np.random.default_rng(0))
        s = out.sum()
        s.backward()
        mask = (out.data != 0).astype(float) * 2.0
        np.testing.assert_array_equal(x.grad, mask)

    def test_dropout_rate_zero_is_identity(self):
        x = param(self.rng, 5)
        out = ad.dropout(x, 0.0, np.random.default_rng(0))
        assert out is x


class TestGraphMechanics:
    def test_gradient_accumulates_over_reuse(self):
        a = ad.Tensor(np.array([2.0]))
        a.requires_grad = True
        out = (a * a + a).sum()  # d/da = 2a + 1 = 5
        out.backward()
        np.testing.assert_allclose(a.grad, [5.0])

    def test_constants_get_no_grad(self):
        a = ad.Tensor(np.ones(3))
        b = ad.Tensor(np.ones(3))
        b.requires_grad = True
        (a * b).sum().backward()
        assert a.grad is None
        assert b.grad is not None

    def test_backward_requires_scalar(self):
        a = ad.Tensor(np.ones(3))
        a.requires_grad = True
        with pytest.raises(ValueError):
            (a * 2.0).backward()

    def test_deep_chain_iterative_toposort(self):
        a = ad.Tensor(np.array([1.0]))
        a.requires_grad = True
        x = a
        for _ in range(3000):
            x = x + 0.001
        x.sum().backward()
        np.testing.assert_allclose(a.grad, [1.0])

    def test_detach_stops_gradient(self):
        a = ad.Tensor(np.ones(3))
        a.requires_grad = True
        out = (a.detach() * 3.0).sum()
        assert out.requires_grad is False
