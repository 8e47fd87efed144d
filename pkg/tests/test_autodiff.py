"""Gradient and forward-value checks for the reverse-mode core.

Forward oracles are computed by independent routes: a triple-loop matmul,
an exp-normalize softmax, and closed-form cross-entropy / KL values worked
out by hand.  Gradients are checked against central finite differences in
float64, away from ReLU kinks.
"""

import numpy as np
import pytest

from port import autodiff as ad
from port.autodiff import Tape, Tensor


def loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference three-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=a.dtype)
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def exp_normalize(x: np.ndarray) -> np.ndarray:
    """Reference softmax without the max shift (safe for small inputs)."""
    e = np.exp(x)
    return e / e.sum()


def fd_check(fn, params, eps=1e-5):
    return ad.grad_check(fn, params, eps=eps)


class TestForwardValues:
    def test_matmul_matches_loop_reference(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        got = ad.matmul(Tensor(a), Tensor(b)).numpy()
        np.testing.assert_allclose(got, loop_matmul(a, b), rtol=1e-6)

    def test_matmul_batched_matches_per_slice_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 4, 5))
        got = ad.matmul(Tensor(a), Tensor(b)).numpy()
        want = np.stack([loop_matmul(a[i], b[i]) for i in range(2)])
        np.testing.assert_allclose(got, want, rtol=1e-6)

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_softmax_matches_exp_normalize(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=10)
        mask = np.ones(10, dtype=bool)
        got = ad.masked_softmax(Tensor(x), mask).numpy()
        np.testing.assert_allclose(got, exp_normalize(x), rtol=1e-6)

    def test_softmax_shift_invariance_exact_on_integer_logits(self):
        # integer logits and an integer shift are exactly representable,
        # so the max-shift form must give bitwise-equal outputs
        x = np.array([1.0, 3.0, 0.0, 2.0], dtype=np.float64)
        mask = np.ones(4, dtype=bool)
        p0 = ad.masked_softmax(Tensor(x), mask).numpy()
        p1 = ad.masked_softmax(Tensor(x + 8.0), mask).numpy()
        assert (p0 == p1).all()

    def test_softmax_masked_positions_exactly_zero(self):
        x = Tensor(np.array([5.0, -2.0, 1000.0, 0.5]))
        mask = np.array([True, True, False, True])
        p = ad.masked_softmax(x, mask).numpy()
        assert p[2] == 0.0
        np.testing.assert_allclose(p.sum(), 1.0, rtol=1e-6)
        np.testing.assert_allclose(p[[0, 1, 3]], exp_normalize(x.numpy()[[0, 1, 3]]), rtol=1e-6)

    def test_softmax_all_masked_row_rejected(self):
        x = Tensor(np.zeros((2, 3)))
        mask = np.array([[True, True, True], [False, False, False]])
        with pytest.raises(ValueError, match="masked"):
            ad.masked_softmax(x, mask)

    def test_softmax_large_logits_do_not_overflow(self):
        x = Tensor(np.array([1000.0, 1000.0], dtype=np.float64))
        p = ad.masked_softmax(x, np.ones(2, dtype=bool)).numpy()
        np.testing.assert_allclose(p, [0.5, 0.5])

    def test_cross_entropy_uniform_closed_form(self):
        # -log(1/128) = log(128) = 7 * log(2)
        dist = Tensor(np.full(128, 1.0 / 128.0, dtype=np.float64))
        got = ad.cross_entropy(dist, 17).item()
        assert got == pytest.approx(7.0 * np.log(2.0), rel=1e-12)

    def test_cross_entropy_zero_probability_is_finite(self):
        dist = Tensor(np.array([1.0, 0.0], dtype=np.float64))
        got = ad.cross_entropy(dist, 1).item()
        assert np.isfinite(got)
        assert got == pytest.approx(-np.log(ad.LOG_FLOOR), rel=1e-9)

    def test_cross_entropy_target_out_of_range(self):
        dist = Tensor(np.full(4, 0.25))
        with pytest.raises(ValueError, match="target"):
            ad.cross_entropy(dist, 4)

    def test_fused_cross_entropy_matches_two_step_route(self):
        # dual route: explicit softmax -> -log p[t] must agree with the
        # fused logits form on every row
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(5, 9))
        mask = np.ones((5, 9), dtype=bool)
        mask[:, 7:] = False
        targets = np.array([0, 3, 6, 2, 1])
        fused = ad.cross_entropy_with_logits(Tensor(logits), mask, targets).numpy()
        for i in range(5):
            p = ad.masked_softmax(Tensor(logits[i]), mask[i])
            step = ad.cross_entropy(p, int(targets[i])).item()
            assert fused[i] == pytest.approx(step, rel=1e-6)

    def test_fused_cross_entropy_rejects_masked_target(self):
        logits = Tensor(np.zeros(4))
        mask = np.array([True, True, False, True])
        with pytest.raises(ValueError, match="masked"):
            ad.cross_entropy_with_logits(logits, mask, 2)

    def test_kl_identical_distributions_is_zero(self):
        p = Tensor(np.array([0.2, 0.3, 0.5]))
        assert ad.kl_divergence(p, p).item() == pytest.approx(0.0, abs=1e-12)

    def test_kl_closed_form_log2(self):
        # KL([1, 0] || [0.5, 0.5]) = 1 * log(1/0.5) = log 2, and the
        # p=0 term must contribute exactly zero
        p = Tensor(np.array([1.0, 0.0], dtype=np.float64))
        q = Tensor(np.array([0.5, 0.5], dtype=np.float64))
        assert ad.kl_divergence(p, q).item() == pytest.approx(np.log(2.0), rel=1e-12)

    def test_kl_batched_last_axis(self):
        p = Tensor(np.array([[1.0, 0.0], [0.5, 0.5]], dtype=np.float64))
        q = Tensor(np.array([[0.5, 0.5], [0.5, 0.5]], dtype=np.float64))
        got = ad.kl_divergence(p, q).numpy()
        np.testing.assert_allclose(got, [np.log(2.0), 0.0], atol=1e-12)

    def test_bce_closed_form_at_zero_logits(self):
        # sigmoid(0) = 0.5 so every term is -log(0.5) regardless of target
        logits = Tensor(np.zeros(6, dtype=np.float64))
        y = np.array([1, 0, 1, 1, 0, 0], dtype=np.float64)
        mask = np.ones(6, dtype=bool)
        got = ad.bce_with_logits(logits, y, mask).item()
        assert got == pytest.approx(np.log(2.0), rel=1e-12)

    def test_bce_mask_excludes_positions(self):
        logits = Tensor(np.array([0.0, 50.0], dtype=np.float64))
        y = np.array([1.0, 0.0])
        mask = np.array([True, False])
        got = ad.bce_with_logits(logits, y, mask).item()
        assert got == pytest.approx(np.log(2.0), rel=1e-9)

    def test_gru_cell_matches_primitive_composition(self):
        # dual route: the fused step against the same gates built from
        # narrow/sigmoid/tanh/mul/add primitives, values and gradients both
        rng = np.random.default_rng(23)
        H, B = 6, 4
        xi_v = rng.normal(size=(B, 3 * H))
        h_v = rng.normal(size=(B, H))
        w_v = rng.normal(size=(H, 3 * H))
        b_v = rng.normal(size=(3 * H,))
        upstream = rng.normal(size=(B, H))

        def both_routes(fused: bool):
            xi = Tensor(xi_v.copy(), requires_grad=True)
            h = Tensor(h_v.copy(), requires_grad=True)
            w_hh = Tensor(w_v.copy(), requires_grad=True)
            b_hh = Tensor(b_v.copy(), requires_grad=True)
            with Tape() as tape:
                if fused:
                    out = ad.gru_cell(xi, h, w_hh, b_hh)
                else:
                    hh = ad.linear(h, w_hh, b_hh)
                    r = ad.sigmoid(xi.narrow(1, 0, H) + hh.narrow(1, 0, H))
                    z = ad.sigmoid(xi.narrow(1, H, H) + hh.narrow(1, H, H))
                    n = ad.tanh(xi.narrow(1, 2 * H, H) + r * hh.narrow(1, 2 * H, H))
                    out = n + z * (h - n)
                tape.backward(ad.mul(out, Tensor(upstream)).sum())
            return out.numpy(), [t.grad for t in (xi, h, w_hh, b_hh)]

        fused_out, fused_grads = both_routes(True)
        prim_out, prim_grads = both_routes(False)
        np.testing.assert_array_equal(fused_out, prim_out)
        for gf, gp in zip(fused_grads, prim_grads):
            np.testing.assert_allclose(gf, gp, rtol=1e-12, atol=1e-14)

    def test_layer_norm_normalizes_rows(self):
        rng = np.random.default_rng(4)
        x = rng.normal(loc=3.0, scale=2.0, size=(4, 8))
        g = Tensor(np.ones(8))
        b = Tensor(np.zeros(8))
        y = ad.layer_norm(Tensor(x), g, b).numpy()
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)


class TestTapeMechanics:
    def test_backward_populates_all_reachable_grads(self):
        a = Tensor(np.array([2.0]), requires_grad=True)
        b = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            c = ad.mul(a, b)
            loss = c.sum()
            tape.backward(loss)
        np.testing.assert_allclose(a.grad, [3.0])
        np.testing.assert_allclose(b.grad, [2.0])

    def test_reused_tensor_accumulates_within_one_backward(self):
        # y = x*x + x  =>  dy/dx = 2x + 1
        x = Tensor(np.array([4.0]), requires_grad=True)
        with Tape() as tape:
            y = ad.add(ad.mul(x, x), x).sum()
            tape.backward(y)
        np.testing.assert_allclose(x.grad, [9.0])

    def test_two_backwards_accumulate_into_grad(self):
        x = Tensor(np.array([5.0]), requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x).sum()
            tape.backward(y)
            tape.backward(y)
        np.testing.assert_allclose(x.grad, [20.0])

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, 2.0)
            with pytest.raises(ValueError, match="scalar"):
                tape.backward(y)

    def test_no_tape_means_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = ad.mul(x, 2.0)
        assert not y.requires_grad
        with pytest.raises(RuntimeError, match="tape"):
            ad.backward(y.sum())

    def test_detach_blocks_gradient(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x.detach(), x).sum()
            tape.backward(y)
        np.testing.assert_allclose(x.grad, [3.0])

    def test_constant_inputs_get_no_grad(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        c = Tensor(np.array([2.0]))
        with Tape() as tape:
            y = ad.mul(x, c).sum()
            tape.backward(y)
        assert c.grad is None

    def test_nested_tapes_restore_outer(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape() as outer:
            _ = ad.mul(x, x)
            with Tape() as inner:
                y = ad.mul(x, 3.0).sum()
                inner.backward(y)
            np.testing.assert_allclose(x.grad, [3.0])
            assert len(outer.nodes) == 1


class TestGradCheck:
    """Central-difference verification for every primitive's backward."""

    def _check_unary(self, op, x):
        p = Tensor(x.astype(np.float64), requires_grad=True)
        w = Tensor(np.random.default_rng(99).normal(size=x.shape))

        def fn():
            return ad.mul(op(p), w).sum()

        assert fd_check(fn, {"p": p}) < 1e-6

    def test_add_sub_mul_grads(self):
        rng = np.random.default_rng(10)
        a = Tensor(rng.normal(size=(3, 4)).astype(np.float64), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)).astype(np.float64), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)))

        def fn():
            return ad.mul(ad.add(ad.mul(a, b), ad.sub(a, b)), w).sum()

        assert fd_check(fn, {"a": a, "b": b}) < 1e-6

    def test_broadcast_add_grad(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.normal(size=(3, 4)).astype(np.float64), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)).astype(np.float64), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4)))

        def fn():
            return ad.mul(ad.add(a, b), w).sum()

        assert fd_check(fn, {"a": a, "b": b}) < 1e-6

    def test_matmul_grad(self):
        rng = np.random.default_rng(12)
        a = Tensor(rng.normal(size=(4, 6)).astype(np.float64), requires_grad=True)
        b = Tensor(rng.normal(size=(6, 5)).astype(np.float64), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 5)))

        def fn():
            return ad.mul(ad.matmul(a, b), w).sum()

        assert fd_check(fn, {"a": a, "b": b}) < 1e-6

    def test_batched_matmul_grad(self):
        rng = np.random.default_rng(13)
        a = Tensor(rng.normal(size=(2, 3, 4)).astype(np.float64), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4, 5)).astype(np.float64), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 5)))

        def fn():
            return ad.mul(ad.matmul(a, b), w).sum()

        assert fd_check(fn, {"a": a, "b": b}) < 1e-6

    def test_linear_grad(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(2, 3, 4)).astype(np.float64), requires_grad=True)
        weight = Tensor(rng.normal(size=(4, 5)).astype(np.float64), requires_grad=True)
        bias = Tensor(rng.normal(size=(5,)).astype(np.float64), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 5)))

        def fn():
            return ad.mul(ad.linear(x, weight, bias), w).sum()

        assert fd_check(fn, {"x": x, "weight": weight, "bias": bias}) < 1e-6

    def test_sigmoid_tanh_grads(self):
        rng = np.random.default_rng(15)
        self._check_unary(ad.sigmoid, rng.normal(size=(3, 5)))
        self._check_unary(ad.tanh, rng.normal(size=(3, 5)))

    def test_relu_grad_away_from_kink(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(4, 4))
        x[np.abs(x) < 0.1] = 0.5  # keep entries away from the nondifferentiable point
        self._check_unary(ad.relu, x)

    def test_layer_norm_grad(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.normal(size=(3, 6)).astype(np.float64), requires_grad=True)
        gain = Tensor(rng.normal(size=(6,)).astype(np.float64), requires_grad=True)
        bias = Tensor(rng.normal(size=(6,)).astype(np.float64), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 6)))

        def fn():
            return ad.mul(ad.layer_norm(x, gain, bias), w).sum()

        assert fd_check(fn, {"x": x, "gain": gain, "bias": bias}) < 1e-6

    def test_gru_cell_grad_all_four_inputs(self):
        rng = np.random.default_rng(21)
        H = 5
        xi = Tensor(rng.normal(size=(3, 3 * H)).astype(np.float64), requires_grad=True)
        h = Tensor(rng.normal(size=(3, H)).astype(np.float64), requires_grad=True)
        w_hh = Tensor(rng.normal(size=(H, 3 * H)).astype(np.float64), requires_grad=True)
        b_hh = Tensor(rng.normal(size=(3 * H,)).astype(np.float64), requires_grad=True)
        w = Tensor(rng.normal(size=(3, H)))

        def fn():
            return ad.mul(ad.gru_cell(xi, h, w_hh, b_hh), w).sum()

        assert fd_check(fn, {"xi": xi, "h": h, "w_hh": w_hh, "b_hh": b_hh}) < 1e-6

    def test_gru_cell_grad_through_two_chained_steps(self):
        # the recurrence feeds h' back in, so the state input must carry
        # gradient from both the direct term and the next step's gates
        rng = np.random.default_rng(22)
        H = 4
        xi1 = Tensor(rng.normal(size=(2, 3 * H)).astype(np.float64), requires_grad=True)
        xi2 = Tensor(rng.normal(size=(2, 3 * H)).astype(np.float64), requires_grad=True)
        h0 = Tensor(rng.normal(size=(2, H)).astype(np.float64), requires_grad=True)
        w_hh = Tensor(rng.normal(size=(H, 3 * H)).astype(np.float64), requires_grad=True)
        b_hh = Tensor(rng.normal(size=(3 * H,)).astype(np.float64), requires_grad=True)
        w = Tensor(rng.normal(size=(2, H)))

        def fn():
            h1 = ad.gru_cell(xi1, h0, w_hh, b_hh)
            h2 = ad.gru_cell(xi2, h1, w_hh, b_hh)
            return ad.mul(h2, w).sum()

        assert fd_check(fn, {"xi1": xi1, "xi2": xi2, "h0": h0, "w_hh": w_hh, "b_hh": b_hh}) < 1e-6

    def test_softmax_grad(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.normal(size=(2, 7)).astype(np.float64), requires_grad=True)
        mask = np.ones((2, 7), dtype=bool)
        mask[:, 5:] = False
        w = Tensor(rng.normal(size=(2, 7)))

        def fn():
            return ad.mul(ad.masked_softmax(x, mask), w).sum()

        assert fd_check(fn, {"x": x}) < 1e-6

    def test_cross_entropy_grad(self):
        rng = np.random.default_rng(19)
        x = Tensor(rng.normal(size=9).astype(np.float64), requires_grad=True)
        mask = np.ones(9, dtype=bool)

        def fn():
            return ad.cross_entropy(ad.masked_softmax(x, mask), 4)

        assert fd_check(fn, {"x": x}) < 1e-6

    def test_fused_cross_entropy_grad(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.normal(size=(3, 8)).astype(np.float64), requires_grad=True)
        mask = np.ones((3, 8), dtype=bool)
        mask[:, 6:] = False
        targets = np.array([1, 5, 0])

        def fn():
            return ad.cross_entropy_with_logits(x, mask, targets).mean()

        assert fd_check(fn, {"x": x}) < 1e-6

    def test_kl_grad_both_sides(self):
        rng = np.random.default_rng(21)
        a = Tensor(rng.normal(size=6).astype(np.float64), requires_grad=True)
        b = Tensor(rng.normal(size=6).astype(np.float64), requires_grad=True)
        mask = np.ones(6, dtype=bool)

        def fn():
            p = ad.masked_softmax(a, mask)
            q = ad.masked_softmax(b, mask)
            return ad.kl_divergence(p, q).sum()

        assert fd_check(fn, {"a": a, "b": b}) < 1e-6

    def test_bce_grad(self):
        rng = np.random.default_rng(22)
        x = Tensor(rng.normal(size=10).astype(np.float64), requires_grad=True)
        y = (rng.random(10) > 0.5).astype(np.float64)
        mask = np.ones(10, dtype=bool)
        mask[8:] = False

        def fn():
            return ad.bce_with_logits(x, y, mask)

        assert fd_check(fn, {"x": x}) < 1e-6

    def test_embedding_grad(self):
        rng = np.random.default_rng(23)
        table = Tensor(rng.normal(size=(5, 3)).astype(np.float64), requires_grad=True)
        ids = np.array([0, 2, 2, 4])
        w = Tensor(rng.normal(size=(4, 3)))

        def fn():
            return ad.mul(ad.embedding(table, ids), w).sum()

        assert fd_check(fn, {"table": table}) < 1e-6

    def test_shape_op_grads(self):
        rng = np.random.default_rng(24)
        x = Tensor(rng.normal(size=(2, 3, 4)).astype(np.float64), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 2)))

        def fn():
            y = x.transpose((1, 0, 2)).narrow(2, 1, 2)
            return ad.mul(y, w).sum()

        assert fd_check(fn, {"x": x}) < 1e-6

    def test_concat_stack_select_grads(self):
        rng = np.random.default_rng(25)
        a = Tensor(rng.normal(size=(2, 3)).astype(np.float64), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2)).astype(np.float64), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 5)))

        def fn():
            cat = ad.concat([a, b], axis=1)
            piled = ad.stack([cat, cat], axis=0)
            return ad.mul(piled.select(0, 1), w).sum()

        assert fd_check(fn, {"a": a, "b": b}) < 1e-6

    def test_mean_grad(self):
        rng = np.random.default_rng(26)
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float64), requires_grad=True)

        def fn():
            return x.mean(axis=1).sum()

        assert fd_check(fn, {"x": x}) < 1e-6

    def test_grad_check_rejects_float32(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError, match="float64"):
            ad.grad_check(lambda: x.sum(), {"x": x})

    def test_grad_check_rejects_nondeterminism(self):
        x = Tensor(np.ones(2, dtype=np.float64), requires_grad=True)
        rng = np.random.default_rng(0)

        def fn():
            return ad.mul(x, float(rng.random())).sum()

        with pytest.raises(ValueError, match="deterministic"):
            ad.grad_check(fn, {"x": x})


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.ones((4, 4)))
        y = ad.dropout(x, 0.5, np.random.default_rng(0), training=False)
        assert y is x

    def test_train_mode_scales_kept_positions(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.ones(10000))
        y = ad.dropout(x, 0.25, rng, training=True).numpy()
        kept = y != 0
        np.testing.assert_allclose(y[kept], 1.0 / 0.75, rtol=1e-6)
        assert abs(kept.mean() - 0.75) < 0.02

    def test_grad_respects_mask(self):
        x = Tensor(np.ones(8, dtype=np.float64), requires_grad=True)
        rng = np.random.default_rng(3)
        with Tape() as tape:
            y = ad.dropout(x, 0.5, rng, training=True)
            tape.backward(y.sum())
        mask = y.numpy() != 0
        np.testing.assert_allclose(x.grad[mask], 2.0)
        np.testing.assert_allclose(x.grad[~mask], 0.0)
