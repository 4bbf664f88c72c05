import numpy as np
import pytest

from gravembed import autodiff
from gravembed.autodiff import (
    GradCheckError,
    NonFiniteError,
    ParamStore,
    StoreFormatError,
    Tensor,
    adam_step,
    grad_check,
)


def fd_check_unary(op, shape, rng, step=1e-5):
    """Central finite differences of a weighted sum of op(x) against the analytic gradient."""
    x = rng.standard_normal(shape)
    t = Tensor(x.copy(), requires_grad=True)
    probe = op(t)
    w = rng.standard_normal(probe.data.shape)
    out = autodiff.sum_all(autodiff.mul(probe, Tensor(w)))
    out.backward()
    analytic = t.grad.copy()
    worst = 0.0
    flat = x.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        f_plus = float((op(Tensor(x)).data * w).sum())
        flat[k] = orig - step
        f_minus = float((op(Tensor(x)).data * w).sum())
        flat[k] = orig
        num = (f_plus - f_minus) / (2 * step)
        a = analytic.reshape(-1)[k]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst


class TestOps:
    def test_softmax_uniform_on_zeros(self):
        out = autodiff.softmax_rows(Tensor(np.zeros((1, 3))))
        assert np.allclose(out.data, 1 / 3)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = autodiff.softmax_rows(Tensor(rng.standard_normal((20, 7))))
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 4))
        a = autodiff.softmax_rows(Tensor(x)).data
        b = autodiff.softmax_rows(Tensor(x + 123.0)).data
        assert np.abs(a - b).max() < 1e-12

    def test_relu_subgradient(self):
        t = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        autodiff.sum_all(autodiff.relu(t)).backward()
        assert t.grad.tolist() == [0.0, 1.0]

    def test_matmul_gradient_vs_fd(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        autodiff.sum_all(autodiff.matmul(a, b)).backward()
        step = 1e-5
        for t in (a, b):
            flat = t.data.reshape(-1)
            gflat = t.grad.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                fp = float((a.data @ b.data).sum())
                flat[k] = orig - step
                fm = float((a.data @ b.data).sum())
                flat[k] = orig
                num = (fp - fm) / (2 * step)
                assert abs(gflat[k] - num) / max(abs(gflat[k]), abs(num), 1e-8) < 1e-6

    @pytest.mark.parametrize("name,op", [
        ("relu", autodiff.relu),
        ("tanh", autodiff.tanh),
        ("sigmoid", autodiff.sigmoid),
        ("softmax", autodiff.softmax_rows),
        ("rowsum", autodiff.row_sum),
    ])
    def test_every_op_fd_over_random_shapes(self, name, op):
        rng = np.random.default_rng(hash(name) % 2**32)
        for _ in range(50):
            shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
            assert fd_check_unary(op, shape, rng) <= 1e-6

    def test_binary_ops_fd(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            x = rng.standard_normal(shape)
            y = rng.standard_normal(shape) + 3.0  # keep divisor away from 0
            for op in (autodiff.add, autodiff.sub, autodiff.mul, autodiff.div):
                a = Tensor(x.copy(), requires_grad=True)
                b = Tensor(y.copy(), requires_grad=True)
                autodiff.sum_all(op(a, b)).backward()
                step = 1e-6
                k = int(rng.integers(0, x.size))
                for t, arr in ((a, x), (b, y)):
                    orig = arr.reshape(-1)[k]
                    arr.reshape(-1)[k] = orig + step
                    fp = float(op(Tensor(x), Tensor(y)).data.sum())
                    arr.reshape(-1)[k] = orig - step
                    fm = float(op(Tensor(x), Tensor(y)).data.sum())
                    arr.reshape(-1)[k] = orig
                    num = (fp - fm) / (2 * step)
                    g = t.grad.reshape(-1)[k]
                    assert abs(g - num) / max(abs(g), abs(num), 1e-8) < 1e-4

    def test_bias_broadcast_gradient(self):
        x = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        autodiff.sum_all(autodiff.add(x, b)).backward()
        assert np.array_equal(b.grad, np.full(3, 4.0))

    def test_gather_rows_scatters_gradient(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        autodiff.sum_all(autodiff.gather_rows(x, [0, 0, 2])).backward()
        assert np.array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_fsum_matches_sum(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((13, 7))
        assert abs(autodiff.fsum_all(Tensor(x)).item() - x.sum()) < 1e-12

    def test_overflow_raises_instead_of_nan(self):
        big = Tensor(np.array([[1e308, 1e308]]))
        with pytest.raises(NonFiniteError):
            autodiff.mul(big, big)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            autodiff.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestAdam:
    def test_zero_gradient_is_identity(self):
        params = ParamStore()
        w = params.add("w", np.array([1.0, -2.0, 3.0]))
        before = w.data.copy()
        adam_step(params, lr=0.1, weight_decay=0.0)
        assert np.array_equal(w.data, before)

    def test_first_step_magnitude_is_lr(self):
        params = ParamStore()
        w = params.add("w", np.array([0.5]))
        w.grad[:] = 7.3
        adam_step(params, lr=0.01)
        # first bias-corrected step: delta = lr * g / (|g| + eps) ~ lr * sign(g)
        assert abs((0.5 - w.data[0]) - 0.01) < 1e-6

    def test_weight_decay_is_decoupled(self):
        params = ParamStore()
        w = params.add("w", np.array([2.0]))
        adam_step(params, lr=0.1, weight_decay=0.5)
        # zero gradient: only the shrinkage applies
        assert abs(w.data[0] - 2.0 * (1 - 0.1 * 0.5)) < 1e-15

    def test_gradients_zeroed_after_step(self):
        params = ParamStore()
        w = params.add("w", np.array([1.0]))
        w.grad[:] = 1.0
        adam_step(params, lr=0.1)
        assert w.grad[0] == 0.0

    def test_bit_identical_trajectories(self):
        def trajectory():
            rng = np.random.default_rng(17)
            params = ParamStore()
            w = params.add("w", rng.standard_normal((4, 4)))
            snaps = []
            for _ in range(25):
                loss = autodiff.sum_all(autodiff.mul(w, w))
                loss.backward()
                adam_step(params, lr=0.05, weight_decay=1e-3)
                snaps.append(w.data.copy())
            return snaps

        for a, b in zip(trajectory(), trajectory()):
            assert np.array_equal(a, b)

    def test_invalid_lr(self):
        params = ParamStore()
        params.add("w", np.array([1.0]))
        with pytest.raises(ValueError):
            adam_step(params, lr=0.0)


class TestGradCheck:
    def test_constant_loss(self):
        params = ParamStore()
        params.add("w", np.ones((2, 2)))

        assert grad_check(lambda p: Tensor(3.14), params) == 0.0

    def test_quadratic_closed_form(self):
        params = ParamStore()
        params.add("w", np.random.default_rng(0).standard_normal((3, 3)))

        def loss(p):
            return autodiff.scale(autodiff.sum_all(autodiff.mul(p["w"], p["w"])), 0.5)

        assert grad_check(loss, params) <= 1e-7

    def test_tolerance_enforced(self):
        params = ParamStore()
        w = params.add("w", np.array([1.0]))

        def wrong_grad_loss(p):
            # forward is w^2 but the recorded backward deliberately lies
            out = Tensor(p["w"].data ** 2)
            out.requires_grad = True
            out._parents = (p["w"],)

            def backward(g):
                p["w"].grad += 100.0 * g

            out._backward = backward
            return out

        with pytest.raises(GradCheckError):
            grad_check(wrong_grad_loss, params, tolerance=1e-4)

    def test_nondeterministic_loss_detected(self):
        params = ParamStore()
        params.add("w", np.array([1.0]))
        state = {"n": 0}

        def noisy(p):
            state["n"] += 1
            return Tensor(float(state["n"]))

        with pytest.raises(ValueError, match="deterministic"):
            grad_check(noisy, params)


class TestParamStorePersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        params = ParamStore()
        params.add("a", rng.standard_normal((2, 3)))
        params.add("b", rng.standard_normal(5))
        params["a"].grad[:] = 1.0
        adam_step(params, lr=0.01)
        path = tmp_path / "store.bin"
        params.save(path)
        loaded = ParamStore.load(path)
        assert loaded.step_count == params.step_count
        for name in params.names():
            assert np.array_equal(loaded[name].data, params[name].data)
            assert np.array_equal(loaded._m[name], params._m[name])
            assert np.array_equal(loaded._v[name], params._v[name])

    def test_checksum_detects_corruption(self, tmp_path):
        params = ParamStore()
        params.add("a", np.ones(4))
        blob = bytearray(params.to_bytes())
        blob[-3] ^= 0xFF
        with pytest.raises(StoreFormatError, match="checksum"):
            ParamStore.from_bytes(bytes(blob))

    def test_version_mismatch_rejected(self):
        params = ParamStore()
        params.add("a", np.ones(2))
        blob = params.to_bytes()
        tampered = blob.replace(b'"version": 1', b'"version": 9')
        with pytest.raises(StoreFormatError, match="version"):
            ParamStore.from_bytes(tampered)

    def test_not_a_store(self):
        with pytest.raises(StoreFormatError):
            ParamStore.from_bytes(b"junk bytes that are not a store")
