import numpy as np
import pytest

from consistseg import tensor as T


def scalar(x):
    return T.Tensor(np.full((1, 1, 1, 1), x), requires_grad=True)


def rand_tensor(rng, shape, requires_grad=True, nudge_relu=False):
    data = rng.uniform(-1.0, 1.0, size=shape)
    if nudge_relu:
        # keep inputs away from the relu kink
        data = np.where(np.abs(data) < 1e-3, 1e-3 * np.sign(data) + (data == 0) * 1e-3, data)
    return T.Tensor(data, requires_grad=requires_grad)


class TestForwardDefinitions:
    def test_relu(self):
        x = T.Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3))
        assert np.array_equal(T.relu(x).data.reshape(-1), [0.0, 0.0, 2.0])

    def test_conv_identity_kernel(self):
        rng = np.random.default_rng(0)
        img = rand_tensor(rng, (2, 1, 8, 8), requires_grad=False)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = T.conv2d(img, T.Tensor(w))
        assert np.allclose(out.data, img.data)

    def test_upsample_nearest(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        assert np.array_equal(T.upsample2(x).data[0, 0], expected)

    def test_maxpool(self):
        x = T.Tensor(np.array([[1.0, 5.0], [3.0, 2.0]]).reshape(1, 1, 2, 2))
        assert T.maxpool2(x).data.reshape(()) == 5.0

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(1)
        x = rand_tensor(rng, (2, 5, 4, 4))
        s = T.softmax_channels(x).data.sum(axis=1)
        assert np.allclose(s, 1.0, atol=1e-12)

    def test_sigmoid_extremes_finite(self):
        x = T.Tensor(np.array([-1000.0, 0.0, 1000.0]).reshape(1, 1, 1, 3))
        out = T.sigmoid(x).data.reshape(-1)
        assert np.all(np.isfinite(out))
        assert out[1] == 0.5

    def test_forward_values_finite(self):
        rng = np.random.default_rng(2)
        x = rand_tensor(rng, (1, 3, 8, 8))
        w = rand_tensor(rng, (4, 3, 3, 3))
        out = T.softmax_channels(T.relu(T.conv2d(x, w)))
        assert np.isfinite(out.data).all()


class TestShapeErrors:
    def test_add_mismatch_names_dims(self):
        a = T.Tensor(np.zeros((1, 2, 3, 3)))
        b = T.Tensor(np.zeros((1, 2, 3, 4)))
        with pytest.raises(T.ShapeError, match=r"\(1, 2, 3, 3\).*\(1, 2, 3, 4\)"):
            T.add(a, b)

    def test_conv_channel_mismatch(self):
        x = T.Tensor(np.zeros((1, 3, 4, 4)))
        w = T.Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(T.ShapeError, match="3 channels.*expects 4"):
            T.conv2d(x, w)

    def test_maxpool_odd_dims(self):
        with pytest.raises(T.ShapeError, match="must be even"):
            T.maxpool2(T.Tensor(np.zeros((1, 1, 3, 4))))

    def test_backward_non_scalar(self):
        x = T.Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(T.ShapeError, match="scalar"):
            T.backward(T.relu(x))

    def test_rank4_required(self):
        with pytest.raises(T.ShapeError):
            T.Tensor(np.zeros((3, 3)))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        rng = np.random.default_rng(3)
        x = rand_tensor(rng, (2, 3, 4, 5))
        T.backward(T.sum_all(x))
        assert np.array_equal(x.grad, np.ones_like(x.data))

    def test_sum_of_squares(self):
        x = T.Tensor(np.array([2.0, 3.0]).reshape(1, 1, 1, 2), requires_grad=True)
        T.backward(T.sum_all(x * x))
        assert np.allclose(x.grad.reshape(-1), [4.0, 6.0])

    def test_accumulation_matches_explicit_duplication(self):
        rng = np.random.default_rng(4)
        data = rng.uniform(-1, 1, (1, 2, 3, 3))
        r = rng.uniform(-1, 1, (1, 2, 3, 3))

        x = T.Tensor(data, requires_grad=True)
        shared = T.mul(x, T.Tensor(r))
        T.backward(T.sum_all(T.add(T.add(shared, shared), shared)))
        grad_shared = x.grad.copy()

        x2 = T.Tensor(data, requires_grad=True)
        terms = [T.mul(x2, T.Tensor(r)) for _ in range(3)]
        T.backward(T.sum_all(T.add(T.add(terms[0], terms[1]), terms[2])))
        assert np.array_equal(grad_shared, x2.grad)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            x = rand_tensor(rng, (2, 3, 8, 8))
            w = rand_tensor(rng, (4, 3, 3, 3))
            out = T.softmax_channels(T.conv2d(x, w))
            loss = T.mean_all(out * out)
            T.backward(loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)


def fd_vs_analytic(build_loss, params, eps=1e-5):
    return T.finite_diff_check(build_loss, params, eps=eps)


class TestFiniteDifferences:
    """Every op's vector-Jacobian product vs central differences."""

    @pytest.mark.parametrize("opname", [
        "relu", "sigmoid", "softmax", "maxpool", "upsample", "conv", "conv1x1",
        "concat", "slice", "add", "mul", "div", "sum_spatial", "scalar_ops",
    ])
    def test_op_gradients(self, opname):
        rng = np.random.default_rng(hash(opname) % 2**32)
        x = rand_tensor(rng, (2, 3, 4, 4), nudge_relu=True)
        r = T.Tensor(rng.uniform(0.5, 1.5, (2, 3, 4, 4)))
        params = [x]

        if opname == "relu":
            def op(): return T.relu(x) * r
        elif opname == "sigmoid":
            def op(): return T.sigmoid(x) * r
        elif opname == "softmax":
            def op(): return T.softmax_channels(x) * r
        elif opname == "maxpool":
            def op(): return T.maxpool2(x) * T.Tensor(r.data[:, :, :2, :2])
        elif opname == "upsample":
            def op(): return T.upsample2(x) * T.Tensor(np.tile(r.data, (1, 1, 2, 2)))
        elif opname == "conv":
            w = rand_tensor(rng, (5, 3, 3, 3))
            b = rand_tensor(rng, (1, 5, 1, 1))
            params = [x, w, b]
            rr = T.Tensor(rng.uniform(0.5, 1.5, (2, 5, 4, 4)))
            def op(): return T.conv2d(x, w, b) * rr
        elif opname == "conv1x1":
            w = rand_tensor(rng, (2, 3, 1, 1))
            params = [x, w]
            rr = T.Tensor(rng.uniform(0.5, 1.5, (2, 2, 4, 4)))
            def op(): return T.conv2d(x, w) * rr
        elif opname == "concat":
            y = rand_tensor(rng, (2, 2, 4, 4))
            params = [x, y]
            rr = T.Tensor(rng.uniform(0.5, 1.5, (2, 5, 4, 4)))
            def op(): return T.concat_channels([x, y]) * rr
        elif opname == "slice":
            rr = T.Tensor(rng.uniform(0.5, 1.5, (1, 3, 4, 4)))
            def op(): return T.slice_batch(x, 1, 2) * rr
        elif opname == "add":
            y = rand_tensor(rng, (2, 3, 4, 4))
            params = [x, y]
            def op(): return T.add(x, y) * r
        elif opname == "mul":
            y = rand_tensor(rng, (2, 3, 4, 4))
            params = [x, y]
            def op(): return T.mul(x, y) * r
        elif opname == "div":
            y = T.Tensor(rng.uniform(0.5, 1.5, (2, 3, 4, 4)), requires_grad=True)
            params = [x, y]
            def op(): return T.div(x, y) * r
        elif opname == "sum_spatial":
            rr = T.Tensor(rng.uniform(0.5, 1.5, (2, 3, 1, 1)))
            def op(): return T.sum_spatial(x) * rr
        else:
            def op(): return ((x * 2.5) + 0.75) * r

        err = fd_vs_analytic(lambda: T.sum_all(op()), params)
        assert err < 1e-6

    def test_quadratic_loss_near_exact(self):
        x = scalar(1.7)
        err = T.finite_diff_check(lambda: T.sum_all(x * x), [x], eps=1e-5)
        assert err < 1e-8

    def test_three_layer_conv_net(self):
        rng = np.random.default_rng(42)
        x = T.Tensor(rng.uniform(0.1, 1.0, (1, 1, 8, 8)))
        ws = [rand_tensor(rng, (4, 1, 3, 3)), rand_tensor(rng, (4, 4, 3, 3)),
              rand_tensor(rng, (2, 4, 3, 3))]
        bs = [rand_tensor(rng, (1, 4, 1, 1)), rand_tensor(rng, (1, 4, 1, 1)),
              rand_tensor(rng, (1, 2, 1, 1))]

        def loss_fn():
            h = T.sigmoid(T.conv2d(x, ws[0], bs[0]))
            h = T.sigmoid(T.conv2d(h, ws[1], bs[1]))
            h = T.conv2d(h, ws[2], bs[2])
            return T.mean_all(h * h)

        err = T.finite_diff_check(loss_fn, ws + bs)
        assert err < 1e-6

    def test_finite_diff_rejects_bad_eps(self):
        x = scalar(1.0)
        with pytest.raises(ValueError):
            T.finite_diff_check(lambda: T.sum_all(x), [x], eps=0.0)


class TestStopGradient:
    def test_blocks_gradient(self):
        x = scalar(3.0)
        y = T.stop_gradient(x * 2.0)
        assert y.item() == 6.0
        assert not y.requires_grad


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        params = [rand_tensor(rng, (3, 2, 3, 3)), rand_tensor(rng, (1, 3, 1, 1))]
        path = tmp_path / "ckpt.wct"
        T.save_params(path, params)
        loaded = T.load_params(path)
        assert len(loaded) == 2
        for p, arr in zip(params, loaded):
            assert p.data.tobytes() == arr.tobytes()

    def test_magic_enforced(self, tmp_path):
        path = tmp_path / "bad.wct"
        path.write_bytes(b"XXXX\x00\x00\x00\x00")
        with pytest.raises(ValueError, match="magic"):
            T.load_params(path)

    def test_load_into_shape_check(self, tmp_path):
        path = tmp_path / "ckpt.wct"
        T.save_params(path, [T.Tensor(np.zeros((1, 1, 2, 2)))])
        with pytest.raises(ValueError, match="shape"):
            T.load_into(path, [T.Tensor(np.zeros((1, 1, 3, 3)))])
