"""Differentiation engine tests: finite-difference oracle, primitives, SGD, tape."""

import math
import threading

import numpy as np
import pytest

from centroidcl import autodiff as ad
from centroidcl.autodiff import (
    SGD,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    gradient_check,
)


def fd_gradient(loss_fn, param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Independent central-difference oracle: perturbs one entry at a time."""
    flat = param.values.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(param.values.shape)


def analytic_gradient(loss_fn, param: Tensor) -> np.ndarray:
    param.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return param.grad.copy()


def assert_grads_close(loss_fn, param: Tensor, rtol: float = 1e-4, h: float = 1e-6):
    ana = analytic_gradient(loss_fn, param)
    num = fd_gradient(loss_fn, param, h=h)
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
    rel = np.abs(ana - num) / denom
    assert np.max(rel) < rtol, f"max rel err {np.max(rel):.3e}"


class TestForwardDefinitions:
    def test_relu(self):
        out = ad.relu(Tensor([-1.0, 2.0]))
        np.testing.assert_array_equal(out.values, [0.0, 2.0])

    def test_sqeuclidean_3_4_5(self):
        out = ad.sqeuclidean(Tensor([0.0, 0.0]), Tensor([3.0, 4.0]))
        assert out.item() == 25.0

    def test_softmax_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.values, [1 / 3] * 3, atol=1e-15)

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor([0.0])).values[0] == 0.5

    def test_pairwise_sqeuclidean_values(self):
        a = Tensor([[0.0, 0.0], [1.0, 1.0]])
        b = Tensor([[3.0, 4.0], [0.0, 0.0]])
        out = ad.sqeuclidean(a, b)
        np.testing.assert_allclose(out.values, [[25.0, 0.0], [13.0, 2.0]])

    def test_concat_rows(self):
        out = ad.concat([Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])], axis=0)
        np.testing.assert_array_equal(out.values, [[1.0, 2.0], [3.0, 4.0]])


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_reduce(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_sqdist_gradient_is_2x(self):
        x = Tensor([1.0, 0.0], requires_grad=True)
        c = Tensor([0.0, 0.0])
        with Tape() as tape:
            loss = ad.sqeuclidean(x, c)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 0.0])

    def test_backward_rejects_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.scale(x, 2.0)
            with pytest.raises(ShapeError):
                tape.backward(y)

    def test_backward_rejects_empty_tape(self):
        tape = Tape()
        with pytest.raises(ValueError):
            tape.backward(Tensor([1.0]))

    def test_gradients_accumulate_across_backwards(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = ad.sum_reduce(x)
            tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_each_node_visited_once(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.scale(x, 3.0)
            loss = ad.sum_reduce(y)
        n_nodes = len(tape.nodes)
        assert n_nodes == 2
        tape.backward(loss)
        assert not tape.nodes  # cleared after replay


# Randomized inputs stay in [-2, 2]; strictly positive where the domain needs it.
UNARY_CASES = [
    ("relu", ad.relu, (-2.0, 2.0)),
    ("sigmoid", ad.sigmoid, (-2.0, 2.0)),
    ("exp", ad.exp, (-2.0, 2.0)),
    ("log", ad.log, (0.1, 2.0)),
    ("sqrt", ad.sqrt, (0.1, 2.0)),
    ("neg", ad.neg, (-2.0, 2.0)),
    ("softmax", ad.softmax, (-2.0, 2.0)),
]


class TestGradientOracle:
    @pytest.mark.parametrize("name,op,domain", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
    def test_unary_primitives(self, name, op, domain):
        rng = np.random.default_rng(7)
        for _ in range(5):
            x = Tensor(rng.uniform(*domain, size=(3, 4)), requires_grad=True)
            w = rng.uniform(-1.0, 1.0, size=(3, 4))  # random linear functional

            def loss_fn():
                return ad.sum_reduce(ad.mul(op(x), Tensor(w)))

            assert_grads_close(loss_fn, x)

    @pytest.mark.parametrize("name,op", [("add", ad.add), ("sub", ad.sub), ("mul", ad.mul)])
    def test_binary_elementwise(self, name, op):
        rng = np.random.default_rng(11)
        a = Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
        w = rng.uniform(-1, 1, size=(3, 4))

        def loss_fn():
            return ad.sum_reduce(ad.mul(op(a, b), Tensor(w)))

        assert_grads_close(loss_fn, a)
        assert_grads_close(loss_fn, b)

    @pytest.mark.parametrize("name,op", [("add", ad.add), ("sub", ad.sub), ("mul", ad.mul)])
    def test_binary_row_broadcast(self, name, op):
        rng = np.random.default_rng(13)
        a = Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, size=4), requires_grad=True)
        w = rng.uniform(-1, 1, size=(3, 4))

        def loss_fn():
            return ad.sum_reduce(ad.mul(op(a, b), Tensor(w)))

        assert_grads_close(loss_fn, a)
        assert_grads_close(loss_fn, b)

    def test_matmul(self):
        rng = np.random.default_rng(17)
        a = Tensor(rng.uniform(-2, 2, size=(3, 5)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, size=(5, 2)), requires_grad=True)
        w = rng.uniform(-1, 1, size=(3, 2))

        def loss_fn():
            return ad.sum_reduce(ad.mul(ad.matmul(a, b), Tensor(w)))

        assert_grads_close(loss_fn, a)
        assert_grads_close(loss_fn, b)

    def test_pairwise_sqeuclidean(self):
        rng = np.random.default_rng(19)
        a = Tensor(rng.uniform(-2, 2, size=(4, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, size=(2, 3)), requires_grad=True)
        w = rng.uniform(-1, 1, size=(4, 2))

        def loss_fn():
            return ad.sum_reduce(ad.mul(ad.sqeuclidean(a, b), Tensor(w)))

        assert_grads_close(loss_fn, a)
        assert_grads_close(loss_fn, b)

    def test_vector_sqeuclidean(self):
        rng = np.random.default_rng(23)
        a = Tensor(rng.uniform(-2, 2, size=6), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, size=6), requires_grad=True)

        def loss_fn():
            return ad.sqeuclidean(a, b)

        assert_grads_close(loss_fn, a)
        assert_grads_close(loss_fn, b)

    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, False), (0, True), (1, True)])
    @pytest.mark.parametrize("op", [ad.sum_reduce, ad.mean_reduce])
    def test_reductions(self, op, axis, keepdims):
        rng = np.random.default_rng(29)
        x = Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)

        def loss_fn():
            red = op(x, axis=axis, keepdims=keepdims)
            return red if red.size == 1 else ad.sum_reduce(ad.mul(red, Tensor(np.ones_like(red.values) * 0.5)))

        assert_grads_close(loss_fn, x)

    def test_concat(self):
        rng = np.random.default_rng(31)
        a = Tensor(rng.uniform(-2, 2, size=(2, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, size=(4, 3)), requires_grad=True)
        w = rng.uniform(-1, 1, size=(6, 3))

        def loss_fn():
            return ad.sum_reduce(ad.mul(ad.concat([a, b], axis=0), Tensor(w)))

        assert_grads_close(loss_fn, a)
        assert_grads_close(loss_fn, b)

    def test_scale(self):
        x = Tensor(np.random.default_rng(37).uniform(-2, 2, size=(3,)), requires_grad=True)

        def loss_fn():
            return ad.sum_reduce(ad.scale(x, -1.7))

        assert_grads_close(loss_fn, x)

    def test_two_layer_network_fd(self):
        # Analytic vs central differences (h=1e-4) through a full small network.
        rng = np.random.default_rng(41)
        x = rng.uniform(-2, 2, size=(5, 4))
        target = rng.uniform(-1, 1, size=(5, 2))
        w1 = Tensor(rng.normal(0, 0.7, size=(4, 6)), requires_grad=True)
        b1 = Tensor(rng.normal(0, 0.2, size=6), requires_grad=True)
        w2 = Tensor(rng.normal(0, 0.7, size=(6, 2)), requires_grad=True)
        b2 = Tensor(rng.normal(0, 0.2, size=2), requires_grad=True)

        def loss_fn():
            h = ad.relu(ad.add(ad.matmul(Tensor(x), w1), b1))
            out = ad.add(ad.matmul(h, w2), b2)
            diff = ad.sub(out, Tensor(target))
            return ad.mean_reduce(ad.mul(diff, diff))

        for p in (w1, b1, w2, b2):
            ana = analytic_gradient(loss_fn, p)
            num = fd_gradient(loss_fn, p, h=1e-4)
            denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
            assert np.max(np.abs(ana - num) / denom) < 1e-4


class TestRejections:
    def test_shape_mismatch_reports_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_log_of_negative_rejected_naming_op(self):
        with pytest.raises(NonFiniteError, match="log"):
            ad.log(Tensor([-1.0]))

    def test_sqrt_of_negative_rejected(self):
        with pytest.raises(NonFiniteError, match="sqrt"):
            ad.sqrt(Tensor([-1.0]))

    def test_exp_overflow_rejected(self):
        with pytest.raises(NonFiniteError, match="exp"):
            ad.exp(Tensor([1e4]))


class TestSgd:
    def test_plain_step(self):
        p = Tensor([1.0], requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.0)
        p.grad[:] = 2.0
        opt.step()
        np.testing.assert_allclose(p.values, [0.8])
        np.testing.assert_array_equal(p.grad, [0.0])

    def test_momentum_two_steps(self):
        # v1 = 1, v2 = 0.9 + 1 = 1.9 -> p = p0 - 0.1 - 0.19 = p0 - 0.29
        p = Tensor([5.0], requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.9)
        for _ in range(2):
            p.grad[:] = 1.0
            opt.step()
        np.testing.assert_allclose(p.values, [5.0 - 0.29])

    def test_zero_grad_is_fixed_point(self):
        p = Tensor([3.0, -1.0], requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.9)
        opt.step()
        np.testing.assert_array_equal(p.values, [3.0, -1.0])

    def test_velocity_shape_drift_rejected(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        opt = SGD([p], lr=0.1)
        p.values = np.zeros(3)
        p.grad = np.zeros(3)
        with pytest.raises(ShapeError):
            opt.step()

    def test_hyperparameter_validation(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            SGD([p], lr=0.0)
        with pytest.raises(ValueError):
            SGD([p], momentum=1.0)


class TestGradientCheck:
    def test_identity_network_quadratic(self):
        x = Tensor([1.0, -2.0, 0.5], requires_grad=True)

        def loss_fn():
            return ad.sum_reduce(ad.mul(x, x))

        report = gradient_check(loss_fn, [("x", x)], step=1e-5)
        assert report.max_rel_error < 1e-6

    def test_parameter_budget_enforced(self):
        x = Tensor(np.zeros(10_000), requires_grad=True)
        with pytest.raises(ValueError):
            gradient_check(lambda: ad.sum_reduce(x), [("x", x)])


class TestDeterminismAndIsolation:
    def test_same_seed_same_bits(self):
        def run():
            rng = np.random.default_rng(123)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            with Tape() as tape:
                loss = ad.mean_reduce(ad.relu(ad.matmul(x, w)))
            tape.backward(loss)
            return loss.item(), w.grad.copy()

        loss_a, grad_a = run()
        loss_b, grad_b = run()
        assert loss_a == loss_b
        np.testing.assert_array_equal(grad_a, grad_b)

    def test_tapes_isolated_across_threads(self):
        results = {}

        def worker(name: str, seed: int):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
            for _ in range(50):
                with Tape() as tape:
                    loss = ad.mean_reduce(ad.mul(x, x))
                tape.backward(loss)
            results[name] = (len(tape.nodes), x.grad.copy())

        threads = [threading.Thread(target=worker, args=(f"m{i}", i)) for i in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

        # Sequential reference: identical gradients, no cross-talk.
        for i in range(2):
            rng = np.random.default_rng(i)
            x = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
            for _ in range(50):
                with Tape() as tape:
                    loss = ad.mean_reduce(ad.mul(x, x))
                tape.backward(loss)
            np.testing.assert_array_equal(results[f"m{i}"][1], x.grad)

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = ad.scale(x, 2.0)
        assert not y.requires_grad

    def test_constant_inputs_not_recorded(self):
        a = Tensor([1.0])
        with Tape() as tape:
            ad.scale(a, 2.0)
        assert not tape.nodes
