"""Autodiff core: forward-op oracles and finite-difference gradient checks."""

import numpy as np
import pytest

from neurofuse import tensor as T


def brute_conv2d(x, w, b=None, stride=1, padding="same"):
    """Six-loop reference convolution. Deliberately slow and obvious."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if padding == "same":
        oh, ow = -(-h // stride), -(-wd // stride)
        th = max((oh - 1) * stride + kh - h, 0)
        tw = max((ow - 1) * stride + kw - wd, 0)
        pt, pl = th // 2, tw // 2
        xp = np.pad(x, ((0, 0), (pt, th - pt), (pl, tw - pl), (0, 0)))
    else:
        oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
        xp = x
    out = np.zeros((n, oh, ow, cout))
    for ni in range(n):
        for oi in range(oh):
            for oj in range(ow):
                for co in range(cout):
                    acc = 0.0
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += (xp[ni, oi * stride + ki, oj * stride + kj, :] * w[ki, kj, :, co]).sum()
                    out[ni, oi, oj, co] = acc + (0.0 if b is None else b[co])
    return out


class TestForwardOracles:
    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid"), (3, "same")])
    def test_conv2d_matches_loop_reference(self, rng, stride, padding):
        x = rng.standard_normal((2, 9, 7, 3))
        w = rng.standard_normal((3, 3, 3, 4))
        b = rng.standard_normal(4)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=padding)
        np.testing.assert_allclose(got.data, brute_conv2d(x, w, b, stride, padding), atol=1e-10)

    def test_conv2d_even_kernel_pads_extra_on_trailing_edge(self):
        # 1x4 input, 1x2 kernel, stride 1, same: one total pad column goes right.
        x = np.arange(4, dtype=np.float64).reshape(1, 1, 4, 1)
        w = np.ones((1, 2, 1, 1))
        got = T.conv2d(T.Tensor(x), T.Tensor(w)).data[0, 0, :, 0]
        np.testing.assert_allclose(got, [1, 3, 5, 3])

    def test_conv2d_same_output_is_ceil_of_input_over_stride(self, rng):
        x = T.Tensor(rng.standard_normal((1, 7, 5, 2)))
        w = T.Tensor(rng.standard_normal((3, 3, 2, 1)))
        assert T.conv2d(x, w, stride=2, padding="same").shape == (1, 4, 3, 1)

    def test_conv2d_rejects_channel_mismatch(self, rng):
        x = T.Tensor(rng.standard_normal((1, 5, 5, 3)))
        w = T.Tensor(rng.standard_normal((3, 3, 2, 4)))
        with pytest.raises(ValueError, match="channel"):
            T.conv2d(x, w)

    def test_valid_padding_rejects_oversize_kernel(self, rng):
        x = T.Tensor(rng.standard_normal((1, 2, 2, 1)))
        w = T.Tensor(rng.standard_normal((3, 3, 1, 1)))
        with pytest.raises(ValueError):
            T.conv2d(x, w, padding="valid")

    def test_depthwise_matches_grouped_loop(self, rng):
        x = rng.standard_normal((2, 6, 6, 3))
        w = rng.standard_normal((3, 3, 3, 1))
        got = T.depthwise_conv2d(T.Tensor(x), T.Tensor(w), stride=1, padding="same").data
        for c in range(3):
            ref = brute_conv2d(x[:, :, :, c : c + 1], w[:, :, c : c + 1, :], stride=1, padding="same")
            np.testing.assert_allclose(got[:, :, :, c], ref[:, :, :, 0], atol=1e-10)

    def test_separable_equals_depthwise_then_pointwise(self, rng):
        x = rng.standard_normal((1, 5, 5, 3))
        dw = rng.standard_normal((3, 3, 3, 1))
        pw = rng.standard_normal((1, 1, 3, 5))
        b = rng.standard_normal(5)
        fused = T.depthwise_separable_conv(T.Tensor(x), T.Tensor(dw), T.Tensor(pw), T.Tensor(b))
        staged = T.conv2d(T.depthwise_conv2d(T.Tensor(x), T.Tensor(dw)), T.Tensor(pw), T.Tensor(b), padding="valid")
        np.testing.assert_allclose(fused.data, staged.data, atol=1e-12)

    def test_max_pool_values_and_shape(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        got = T.max_pool(T.Tensor(x), window=2).data
        np.testing.assert_allclose(got[0, :, :, 0], [[5, 7], [13, 15]])

    def test_max_pool_same_padding_covers_remainder(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 3, 3, 1)
        got = T.max_pool(T.Tensor(x), window=2, padding="same").data
        np.testing.assert_allclose(got[0, :, :, 0], [[4, 5], [7, 8]])

    def test_global_avg_pool(self, rng):
        x = rng.standard_normal((3, 4, 5, 6))
        got = T.global_avg_pool(T.Tensor(x)).data
        np.testing.assert_allclose(got, x.mean(axis=(1, 2)), atol=1e-12)

    def test_softmax_rows_sum_to_one_and_shift_invariant(self, rng):
        x = rng.standard_normal((4, 7))
        p = T.softmax(T.Tensor(x)).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        p2 = T.softmax(T.Tensor(x + 1000.0)).data
        np.testing.assert_allclose(p, p2, atol=1e-12)

    def test_sigmoid_extremes_do_not_overflow(self):
        p = T.sigmoid(T.Tensor(np.array([-1e4, 0.0, 1e4]))).data
        np.testing.assert_allclose(p, [0.0, 0.5, 1.0], atol=1e-12)

    def test_concat_channels_order_and_split(self, rng):
        a, b = rng.standard_normal((1, 2, 2, 3)), rng.standard_normal((1, 2, 2, 2))
        out = T.concat_channels([T.Tensor(a), T.Tensor(b)]).data
        np.testing.assert_array_equal(out[..., :3], a)
        np.testing.assert_array_equal(out[..., 3:], b)

    def test_concat_channels_rejects_spatial_mismatch(self, rng):
        a = T.Tensor(rng.standard_normal((1, 2, 2, 3)))
        b = T.Tensor(rng.standard_normal((1, 3, 2, 2)))
        with pytest.raises(ValueError, match="spatial"):
            T.concat_channels([a, b])

    def test_cross_entropy_known_value(self):
        p = T.Tensor(np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]]))
        y = T.Tensor(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
        got = T.categorical_cross_entropy(p, y).item()
        want = -(np.log(0.7) + np.log(0.8)) / 2
        assert abs(got - want) < 1e-12

    def test_cross_entropy_rejects_unnormalized_rows(self):
        p = T.Tensor(np.array([[0.5, 0.4, 0.4]]))
        y = T.Tensor(np.array([[1.0, 0.0, 0.0]]))
        with pytest.raises(ValueError, match="softmax"):
            T.categorical_cross_entropy(p, y)

    def test_cross_entropy_rejects_soft_targets(self):
        p = T.Tensor(np.array([[0.5, 0.5]]))
        y = T.Tensor(np.array([[0.5, 0.5]]))
        with pytest.raises(ValueError, match="one-hot"):
            T.categorical_cross_entropy(p, y)

    def test_cross_entropy_clamps_zero_probability(self):
        p = T.Tensor(np.array([[0.0, 1.0]]))
        y = T.Tensor(np.array([[1.0, 0.0]]))
        val = T.categorical_cross_entropy(p, y).item()
        assert np.isfinite(val) and val == pytest.approx(-np.log(1e-12))


class TestGraphMechanics:
    def test_backward_requires_scalar(self, rng):
        x = T.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.relu(x).backward()

    def test_backward_without_recorded_graph_is_rejected(self):
        x = T.Tensor(np.array(3.0))  # requires_grad=False: nothing recorded
        with pytest.raises(RuntimeError, match="no gradient tape"):
            x.backward()

    def test_grads_accumulate_across_backward_calls(self):
        x = T.Tensor(np.array(2.0), requires_grad=True)
        (x * x).backward()
        (x * x).backward()
        assert x.grad == pytest.approx(8.0)

    def test_diamond_graph_sums_both_paths(self):
        x = T.Tensor(np.array(3.0), requires_grad=True)
        y = x * x  # reused twice below
        (y + y).backward()
        assert x.grad == pytest.approx(12.0)

    def test_no_tape_recorded_for_frozen_inputs(self, rng):
        x = T.Tensor(rng.standard_normal((1, 4, 4, 2)))
        w = T.Tensor(rng.standard_normal((3, 3, 2, 2)))
        out = T.conv2d(x, w)
        assert not out.requires_grad and out._backward is None and out._parents == ()

    def test_broadcast_add_unbroadcasts_grad(self):
        x = T.Tensor(np.ones((2, 3)), requires_grad=True)
        b = T.Tensor(np.ones((3,)), requires_grad=True)
        T.sum_all(x + b).backward()
        np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])
        np.testing.assert_allclose(x.grad, np.ones((2, 3)))


def _filtered_normal(rng, shape, margin=1e-3):
    """Standard normals redrawn until every entry clears the ReLU kink."""
    x = rng.standard_normal(shape)
    for _ in range(100):
        bad = np.abs(x) < margin
        if not bad.any():
            return x
        x[bad] = rng.standard_normal(bad.sum())
    raise AssertionError("could not draw kink-free input")


def _pool_safe_input(rng, shape, window, stride, margin=1e-3):
    """Inputs whose pooling windows have a clear top-1, so FD stays exact."""
    for _ in range(200):
        x = rng.standard_normal(shape)
        xt = T.max_pool(T.Tensor(x), window, stride)
        n, oh, ow, c = xt.shape
        ok = True
        for ni in range(n):
            for oi in range(oh):
                for oj in range(ow):
                    for ci in range(c):
                        win = x[ni, oi * stride : oi * stride + window, oj * stride : oj * stride + window, ci]
                        top2 = np.sort(win.reshape(-1))[-2:]
                        if top2[1] - top2[0] < margin:
                            ok = False
        if ok:
            return x
    raise AssertionError("could not draw tie-free pooling input")


def _check_grad(build, x0, seed_note, tol=1e-4):
    """Compare autodiff grad of sum(f(x)) against central differences."""
    xt = T.Tensor(x0.astype(np.float64), requires_grad=True)
    out = build(xt)
    T.sum_all(out).backward()
    analytic = xt.grad.copy()

    def scalar(arr):
        return float(build(T.Tensor(arr)).data.sum())

    numeric = T.finite_difference_grad(scalar, x0.astype(np.float64))
    gap = T.gradient_gap(analytic, numeric)
    assert gap <= tol, f"{seed_note}: gradient gap {gap:.3e} exceeds {tol}"


class TestGradientsAgainstFiniteDifferences:
    """Every differentiable op, many seeds, float64, relative gap <= 1e-4."""

    N_SEEDS = 20

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_conv2d_wrt_input_kernel_bias(self, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal((2, 5, 4, 2))
        w0 = rng.standard_normal((3, 3, 2, 3))
        b0 = rng.standard_normal(3)
        stride = 1 + seed % 2
        padding = "same" if seed % 3 else "valid"
        _check_grad(lambda t: T.conv2d(t, T.Tensor(w0), T.Tensor(b0), stride, padding), x0, f"conv-x s{seed}")
        _check_grad(
            lambda t: T.conv2d(T.Tensor(x0), t, T.Tensor(b0), stride, padding),
            w0,
            f"conv-w s{seed}",
        )
        _check_grad(lambda t: T.conv2d(T.Tensor(x0), T.Tensor(w0), t, stride, padding), b0, f"conv-b s{seed}")

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_depthwise_wrt_input_and_kernel(self, seed):
        rng = np.random.default_rng(100 + seed)
        x0 = rng.standard_normal((1, 5, 5, 3))
        w0 = rng.standard_normal((3, 3, 3, 1))
        stride = 1 + seed % 2
        _check_grad(lambda t: T.depthwise_conv2d(t, T.Tensor(w0), stride), x0, f"dw-x s{seed}")
        _check_grad(lambda t: T.depthwise_conv2d(T.Tensor(x0), t, stride), w0, f"dw-w s{seed}")

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_max_pool_wrt_input(self, seed):
        rng = np.random.default_rng(200 + seed)
        window = 2 + seed % 2
        x0 = _pool_safe_input(rng, (1, 6, 6, 2), window, window)
        _check_grad(lambda t: T.max_pool(t, window), x0, f"pool s{seed}")

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_relu_wrt_input(self, seed):
        rng = np.random.default_rng(300 + seed)
        x0 = _filtered_normal(rng, (3, 7))
        _check_grad(T.relu, x0, f"relu s{seed}")

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_sigmoid_softmax_sqrt(self, seed):
        rng = np.random.default_rng(400 + seed)
        x0 = rng.standard_normal((3, 5))
        weights = T.Tensor(rng.standard_normal((3, 5)))  # break softmax row symmetry
        _check_grad(T.sigmoid, x0, f"sigmoid s{seed}")
        _check_grad(lambda t: T.mul(T.softmax(t), weights), x0, f"softmax s{seed}")
        _check_grad(T.sqrt, np.abs(x0) + 0.5, f"sqrt s{seed}")

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_matmul_bmm_dense(self, seed):
        rng = np.random.default_rng(500 + seed)
        a0, b0 = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
        _check_grad(lambda t: T.matmul(t, T.Tensor(b0)), a0, f"matmul-a s{seed}")
        _check_grad(lambda t: T.matmul(T.Tensor(a0), t), b0, f"matmul-b s{seed}")
        p0, q0 = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))
        _check_grad(lambda t: T.bmm(t, T.Tensor(q0)), p0, f"bmm-a s{seed}")
        _check_grad(lambda t: T.bmm(T.Tensor(p0), t), q0, f"bmm-b s{seed}")

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_elementwise_and_reductions(self, seed):
        rng = np.random.default_rng(600 + seed)
        x0 = rng.standard_normal((2, 3, 4))
        other = T.Tensor(rng.standard_normal((2, 3, 4)))
        denom = T.Tensor(np.abs(rng.standard_normal((2, 3, 4))) + 0.5)
        _check_grad(lambda t: T.add(t, other), x0, f"add s{seed}")
        _check_grad(lambda t: T.sub(other, t), x0, f"sub s{seed}")
        _check_grad(lambda t: T.mul(t, other), x0, f"mul s{seed}")
        _check_grad(lambda t: T.div(t, denom), x0, f"div-num s{seed}")
        _check_grad(lambda t: T.div(other, t), np.abs(x0) + 0.5, f"div-den s{seed}")
        _check_grad(lambda t: T.mean(t, (1,)), x0, f"mean s{seed}")
        _check_grad(lambda t: T.reshape(t, (6, 4)), x0, f"reshape s{seed}")
        _check_grad(T.transpose_last2, x0, f"transpose s{seed}")

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_global_pool_and_concat(self, seed):
        rng = np.random.default_rng(700 + seed)
        x0 = rng.standard_normal((2, 3, 3, 4))
        _check_grad(T.global_avg_pool, x0, f"gap s{seed}")
        other = T.Tensor(rng.standard_normal((2, 3, 3, 2)))
        _check_grad(lambda t: T.concat_channels([t, other]), x0, f"concat s{seed}")

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_softmax_cross_entropy_chain(self, seed):
        rng = np.random.default_rng(800 + seed)
        x0 = rng.standard_normal((4, 3))
        labels = rng.integers(0, 3, size=4)
        onehot = np.eye(3)[labels]
        _check_grad(
            lambda t: T.categorical_cross_entropy(T.softmax(t), T.Tensor(onehot)),
            x0,
            f"ce s{seed}",
        )

    @pytest.mark.parametrize("seed", range(N_SEEDS))
    def test_separable_conv_all_params(self, seed):
        rng = np.random.default_rng(900 + seed)
        x0 = rng.standard_normal((1, 5, 5, 3))
        dw0 = rng.standard_normal((3, 3, 3, 1))
        pw0 = rng.standard_normal((1, 1, 3, 4))
        b0 = rng.standard_normal(4)
        dw, pw, b = T.Tensor(dw0), T.Tensor(pw0), T.Tensor(b0)
        _check_grad(lambda t: T.depthwise_separable_conv(t, dw, pw, b), x0, f"sep-x s{seed}")
        _check_grad(lambda t: T.depthwise_separable_conv(T.Tensor(x0), t, pw, b), dw0, f"sep-dw s{seed}")
        _check_grad(lambda t: T.depthwise_separable_conv(T.Tensor(x0), dw, t, b), pw0, f"sep-pw s{seed}")
