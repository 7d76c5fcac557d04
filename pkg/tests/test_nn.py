import numpy as np
import pytest

from relcluster.errors import NonFiniteLossError, ValidationError
from relcluster.nn import AdamState, Mlp, adam_step, finite_diff_check
from relcluster.seeding import stream


def straight_line_forward(net, x):
    """Independent re-evaluation: explicit loop, no shared code path."""
    a = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w + b
        if i < len(net.weights) - 1:
            a = np.where(a > 0, a, 0.0)
    return a


class TestForward:
    def test_zero_net_outputs_zero(self):
        net = Mlp([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
        y, _ = net.forward(np.array([1.0, -2.0, 3.0]))
        assert np.all(y == 0.0)

    def test_single_identity_layer_is_identity(self):
        net = Mlp([np.eye(3)], [np.zeros(3)])
        x = np.array([0.5, -1.5, 2.0])
        y, _ = net.forward(x)
        np.testing.assert_array_equal(y, x)

    def test_matches_straight_line_oracle(self):
        rng = stream(0, "test", "forward")
        for _ in range(20):
            sizes = [int(rng.integers(2, 6)) for _ in range(4)]
            net = Mlp.create(sizes, rng)
            for i, b in enumerate(net.biases):
                net.biases[i] = b + rng.standard_normal(b.shape)
            x = rng.standard_normal((5, sizes[0]))
            y, _ = net.forward(x)
            np.testing.assert_allclose(y, straight_line_forward(net, x), atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        net = Mlp.create([3, 2], stream(0, "t"))
        with pytest.raises(ValidationError):
            net.forward(np.zeros(4))

    def test_param_count(self):
        sizes = [7, 5, 3, 2]
        net = Mlp.create(sizes, stream(1, "t"))
        expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        assert net.num_params == expected


class TestBackward:
    def test_zero_output_grad_gives_zero_grads(self):
        rng = stream(2, "t")
        net = Mlp.create([3, 4, 2], rng)
        x = rng.standard_normal((6, 3))
        y, tape = net.forward(x)
        grads, dx = net.backward(tape, np.zeros_like(y))
        assert all(np.all(g == 0) for g in grads)
        assert np.all(dx == 0)

    def test_linear_net_weight_grad_is_outer_product(self):
        rng = stream(3, "t")
        net = Mlp.create([4, 3], rng)
        x = rng.standard_normal(4)
        dy = rng.standard_normal(3)
        _, tape = net.forward(x)
        grads, dx = net.backward(tape, dy)
        np.testing.assert_allclose(grads[0], np.outer(x, dy), atol=1e-12)
        np.testing.assert_allclose(grads[1], dy, atol=1e-12)
        np.testing.assert_allclose(dx, net.weights[0] @ dy, atol=1e-12)

    def test_matches_finite_differences(self):
        # Biases are randomized so no preactivation sits on the relu kink.
        rng = stream(4, "t")
        for trial in range(5):
            sizes = [3, 5, 4, 2]
            net = Mlp.create(sizes, rng)
            for i, b in enumerate(net.biases):
                net.biases[i] = b + 0.5 * rng.standard_normal(b.shape)
            x = rng.standard_normal((4, 3))
            dy_fixed = rng.standard_normal((4, 2))

            def loss_fn(_):
                y, tape = net.forward(x)
                value = float(np.sum(dy_fixed * y))
                grads, _ = net.backward(tape, dy_fixed)
                return value, grads

            assert finite_diff_check(loss_fn, net.params(), step=1e-5) < 1e-6

    def test_relu_subgradient_at_zero_is_zero(self):
        # One hidden unit with preactivation exactly 0: no gradient flows.
        net = Mlp([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
        y, tape = net.forward(np.array([0.0]))
        assert y[0] == 0.0
        grads, dx = net.backward(tape, np.array([1.0]))
        assert grads[0][0, 0] == 0.0  # first-layer weight sees no gradient
        assert dx[0] == 0.0

    def test_stale_tape_rejected(self):
        rng = stream(5, "t")
        net_a = Mlp.create([3, 2], rng)
        net_b = Mlp.create([3, 4, 2], rng)
        _, tape = net_a.forward(np.zeros(3))
        with pytest.raises(ValidationError):
            net_b.backward(tape, np.zeros(2))


class TestAdam:
    def test_zero_grads_leave_params_unchanged(self):
        rng = stream(6, "t")
        params = [rng.standard_normal((3, 2)), rng.standard_normal(2)]
        before = [p.copy() for p in params]
        state = AdamState(params, learning_rate=0.1)
        adam_step(state, params, [np.zeros_like(p) for p in params])
        for p, b in zip(params, before):
            np.testing.assert_array_equal(p, b)

    def test_first_step_is_signed_learning_rate(self):
        params = [np.array([1.0, -2.0, 0.5])]
        grads = [np.array([0.3, -0.7, 2.0])]
        state = AdamState(params, learning_rate=0.01)
        before = params[0].copy()
        state.step(params, grads)
        delta = params[0] - before
        np.testing.assert_allclose(delta, -0.01 * np.sign(grads[0]), atol=1e-7)

    def test_quadratic_descent_matches_oracle_recurrence(self):
        # Oracle: the Adam recurrence written out independently for f(w) = w^2.
        w, lr, b1, b2, eps = 1.0, 0.05, 0.9, 0.999, 1e-8
        m = v = 0.0
        oracle = []
        for t in range(1, 101):
            g = 2.0 * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
            oracle.append(w)
        assert abs(w) < 0.1

        params = [np.array([1.0])]
        state = AdamState(params, learning_rate=lr)
        for t in range(100):
            state.step(params, [2.0 * params[0]])
            np.testing.assert_allclose(params[0][0], oracle[t], rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        params = [np.zeros(3)]
        state = AdamState(params, 0.1)
        with pytest.raises(ValidationError):
            state.step(params, [np.zeros(3), np.zeros(2)])


class TestFiniteDiffCheck:
    def test_quadratic_loss_is_exact(self):
        rng = stream(7, "t")
        a = rng.standard_normal(5)
        params = [rng.standard_normal(5)]

        def loss_fn(p):
            return float(np.sum(a * p[0] ** 2)), [2.0 * a * p[0]]

        assert finite_diff_check(loss_fn, params) < 1e-9

    def test_detects_corrupted_gradient(self):
        params = [np.array([0.3, -0.6])]

        def loss_fn(p):
            grads = 2.0 * p[0]
            grads = grads.copy()
            grads[0] += 1.0  # deliberate corruption
            return float(np.sum(p[0] ** 2)), [grads]

        assert finite_diff_check(loss_fn, params) > 0.1

    def test_non_finite_loss_raises(self):
        params = [np.array([1.0])]

        def loss_fn(p):
            return float("nan"), [np.zeros(1)]

        with pytest.raises(NonFiniteLossError):
            finite_diff_check(loss_fn, params)
