import numpy as np
import pytest

from rfpdet import tensor as T
from rfpdet.errors import ConfigError, ContractError
from rfpdet.gradcheck import check_gradients
from rfpdet.tensor import (
    Parameter,
    Tensor,
    add,
    concat,
    conv2d,
    crop2d,
    mean_n,
    mul,
    relu,
    reshape,
    permute,
    scale,
    sgd_step,
    smooth_l1_loss,
    softmax_cross_entropy,
    sum_all,
    take_rows,
    upsample_nearest_2x,
)

from helpers import naive_conv2d


class TestConvForward:
    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 1, 5, 7)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        y = conv2d(x, w, stride=1, padding=0)
        np.testing.assert_array_equal(y.data, x.data)

    def test_receptive_field_and_shape_preservation(self):
        # one k=3 layer at dilation 5 spans 5*(3-1)+1 = 11 pixels per side
        assert 5 * (3 - 1) + 1 == 11
        x = Tensor(np.random.default_rng(1).normal(size=(1, 2, 13, 17)))
        w = Tensor(np.random.default_rng(2).normal(size=(2, 2, 3, 3)))
        y = conv2d(x, w, stride=1, padding=5, dilation=5)
        assert y.shape == (1, 2, 13, 17)

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 1, 1), (2, 1, 1), (1, 3, 3), (1, 5, 5), (2, 2, 2)])
    def test_matches_naive_loops(self, stride, padding, dilation):
        rng = np.random.default_rng(10 * stride + padding + dilation)
        x = rng.normal(size=(2, 3, 8, 9))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, dilation=dilation)
        want = naive_conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation)
        np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((2, 4, 3, 3)))
        with pytest.raises(ConfigError):
            conv2d(x, w)

    def test_nonpositive_output_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(ConfigError):
            conv2d(x, w, padding=0, dilation=3)

    def test_footprint_locality(self):
        # an input cell outside the dilated taps of an output cell must not
        # change that output, bit for bit
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 1, 9, 9))
        w = Tensor(rng.normal(size=(1, 1, 3, 3)))
        base = conv2d(Tensor(x.copy()), w, padding=3, dilation=3).data
        # output (0,0) samples rows/cols {0,3,6} of the padded grid minus pad 3
        # -> input coords {-3,0,3}; poke (1,1) which no tap of (0,0) touches
        poked = x.copy()
        poked[0, 0, 1, 1] += 123.456
        out = conv2d(Tensor(poked), w, padding=3, dilation=3).data
        assert out[0, 0, 0, 0] == base[0, 0, 0, 0]
        assert not np.array_equal(out, base)


class TestConvGrad:
    def test_dilated_conv_gradcheck(self):
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        err = check_gradients(lambda: sum_all(conv2d(x, w, padding=3, dilation=3)), [x, w])
        assert err < 1e-6

    @pytest.mark.parametrize("seed", range(20))
    def test_gradcheck_random_configs(self, seed):
        rng = np.random.default_rng(seed)
        stride = int(rng.integers(1, 3))
        dilation = int(rng.integers(1, 4))
        padding = int(rng.integers(0, 4))
        h = int(rng.integers(2 * dilation + 1, 2 * dilation + 5))
        x = Tensor(rng.normal(size=(1, 2, h, h)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)

        def f():
            y = conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation)
            return sum_all(mul(y, y))

        assert check_gradients(f, [x, w, b]) < 1e-6


class TestElementwise:
    def test_mean_n_idempotent(self):
        t = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
        out = mean_n([t, t, t])
        np.testing.assert_array_equal(out.data, t.data)

    def test_mean_n_backward_splits_grad(self):
        xs = [Tensor(np.ones((2, 2)), requires_grad=True) for _ in range(3)]
        sum_all(mean_n(xs)).backward()
        for t in xs:
            np.testing.assert_allclose(t.grad, np.full((2, 2), 1.0 / 3.0))

    def test_mean_n_rejects_empty_and_mismatch(self):
        with pytest.raises(ConfigError):
            mean_n([])
        with pytest.raises(ConfigError):
            mean_n([Tensor(np.zeros((2,))), Tensor(np.zeros((3,)))])

    def test_add_zero(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 3)))
        np.testing.assert_array_equal(add(x, Tensor(np.zeros((3, 3)))).data, x.data)

    def test_add_shape_mismatch(self):
        with pytest.raises(ConfigError):
            add(Tensor(np.zeros((2,))), Tensor(np.zeros((3,))))

    def test_relu_scale_values(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(relu(x).data, [0.0, 0.0, 3.0])
        np.testing.assert_array_equal(scale(x, -2.0).data, [4.0, -0.0, -6.0])


class TestUpsample:
    def test_single_cell(self):
        y = upsample_nearest_2x(Tensor(np.full((1, 1, 1, 1), 7.0)))
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 7.0))

    def test_constant_stays_constant(self):
        y = upsample_nearest_2x(Tensor(np.full((2, 3, 4, 5), 1.5)))
        assert y.shape == (2, 3, 8, 10)
        assert np.all(y.data == 1.5)

    def test_grad_of_sum_is_four(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 3)), requires_grad=True)
        sum_all(upsample_nearest_2x(x)).backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 2, 3, 3), 4.0))


class TestBackward:
    def test_scale_then_sum(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
        sum_all(scale(x, 2.0)).backward()
        np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            scale(x, 1.0).backward()

    def test_shared_weight_grad_is_sum_of_sites(self):
        rng = np.random.default_rng(5)
        x_data = rng.normal(size=(1, 2, 5, 5))
        w_data = rng.normal(size=(2, 2, 3, 3))

        # shared: one weight tensor wired into three branches
        w = Tensor(w_data.copy(), requires_grad=True)
        x = Tensor(x_data)
        ys = [conv2d(x, w, padding=d, dilation=d) for d in (1, 2, 3)]
        sum_all(mean_n(ys)).backward()
        shared_grad = w.grad.copy()

        # unshared: three clones, one branch each, grads summed by hand
        total = np.zeros_like(w_data)
        for d in (1, 2, 3):
            wc = Tensor(w_data.copy(), requires_grad=True)
            ys = [
                conv2d(x, wc if dd == d else Tensor(w_data.copy()), padding=dd, dilation=dd)
                for dd in (1, 2, 3)
            ]
            sum_all(mean_n(ys)).backward()
            total += wc.grad
        np.testing.assert_allclose(shared_grad, total, atol=1e-12, rtol=0)


class TestStructuralOps:
    def test_reshape_permute_roundtrip_grad(self):
        x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 4)), requires_grad=True)

        def f():
            y = permute(reshape(x, (2, 12)), (1, 0))
            return sum_all(mul(y, y))

        assert check_gradients(f, [x]) < 1e-6

    def test_concat_backward_splits(self):
        a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
        out = concat([a, b], axis=1)
        assert out.shape == (1, 5, 2, 2)
        sum_all(scale(out, 3.0)).backward()
        np.testing.assert_array_equal(a.grad, np.full((1, 2, 2, 2), 3.0))
        np.testing.assert_array_equal(b.grad, np.full((1, 3, 2, 2), 3.0))

    def test_take_rows_repeated_indices_accumulate(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        sum_all(take_rows(x, np.array([0, 0, 2]))).backward()
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_crop2d_grad(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 4, 4)), requires_grad=True)
        sum_all(crop2d(x, 2, 3)).backward()
        want = np.zeros((1, 1, 4, 4))
        want[:, :, :2, :3] = 1.0
        np.testing.assert_array_equal(x.grad, want)


class TestLosses:
    def test_smooth_l1_formula(self):
        x = Tensor(np.array([0.5]))
        assert smooth_l1_loss(x, np.array([0.0])).item() == pytest.approx(0.125)
        x = Tensor(np.array([2.0]))
        assert smooth_l1_loss(x, np.array([0.0])).item() == pytest.approx(1.5)

    def test_cross_entropy_perfect_limit(self):
        labels = np.array([0, 1])
        for margin in (5.0, 20.0, 80.0):
            logits = Tensor(np.array([[margin, 0.0], [0.0, margin]]))
            loss = softmax_cross_entropy(logits, labels).item()
            assert loss < np.exp(-margin) * 2 + 1e-12
        assert softmax_cross_entropy(Tensor(np.array([[700.0, 0.0]])), np.array([0])).item() == pytest.approx(0.0)

    def test_loss_gradchecks(self):
        rng = np.random.default_rng(9)
        logits = Tensor(rng.normal(size=(6, 2)), requires_grad=True)
        labels = rng.integers(0, 2, size=6)
        assert check_gradients(lambda: softmax_cross_entropy(logits, labels), [logits]) < 1e-6

        pred = Tensor(rng.normal(size=(5, 4)) * 2, requires_grad=True)
        target = rng.normal(size=(5, 4))
        # keep |d| away from the smooth-l1 kink at 1 so central differences are valid
        mask = np.abs(pred.data - target) < 1.2
        pred.data[mask] += np.sign(pred.data[mask] - target[mask] + 1e-9) * 1.5
        assert check_gradients(lambda: smooth_l1_loss(pred, target), [pred]) < 1e-6


OP_SEEDS = range(100)


@pytest.mark.parametrize("seed", OP_SEEDS)
def test_every_op_gradcheck(seed):
    """One randomized composite touching every differentiable op per seed."""
    rng = np.random.default_rng(seed)
    h = int(rng.integers(4, 7))
    x = Tensor(rng.normal(size=(1, 2, h, h)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    d = int(rng.integers(1, 3))

    def f():
        y = conv2d(x, w, b, padding=d, dilation=d)
        y = add(y, x)
        u = upsample_nearest_2x(y)
        c = crop2d(u, h, h)
        m = mean_n([y, c, scale(y, 0.5)])
        # shift away from relu kinks so finite differences stay clean
        r = relu(add(m, 3.0))
        flat = reshape(permute(r, (0, 2, 3, 1)), (h * h, 2))
        rows = take_rows(concat([flat, flat], axis=0), np.arange(0, h * h, 2))
        return sum_all(mul(rows, rows))

    assert check_gradients(f, [x, w, b]) < 1e-6


class TestSgd:
    def _param(self, value):
        p = Parameter("p", np.array(value))
        return p

    def test_zero_lr_is_noop(self):
        p = self._param([1.0, 2.0])
        p.tensor.grad = np.array([5.0, -3.0])
        sgd_step([p], lr=0.0, momentum=0.9)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_plain_step_subtracts_grad(self):
        p = self._param([1.0])
        p.tensor.grad = np.array([0.25])
        sgd_step([p], lr=1.0, momentum=0.0)
        np.testing.assert_allclose(p.data, [0.75])
        assert p.tensor.grad is None

    def test_quadratic_descent(self):
        # f(w) = w^2 from w=1 with lr 0.1: w' = 1 - 0.1*2 = 0.8
        p = self._param([1.0])
        loss = mul(p.tensor, p.tensor)
        sum_all(loss).backward()
        sgd_step([p], lr=0.1, momentum=0.0)
        np.testing.assert_allclose(p.data, [0.8])

    def test_missing_grad_rejected(self):
        p = self._param([1.0])
        with pytest.raises(ContractError):
            sgd_step([p], lr=0.1)


class TestModes:
    def test_no_grad_blocks_tape(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with T.no_grad():
            y = scale(x, 2.0)
        assert not y.requires_grad

    def test_debug_check_catches_nan(self):
        T.set_debug_checks(True)
        try:
            with pytest.raises(ContractError):
                scale(Tensor(np.array([np.inf])), 2.0)
        finally:
            T.set_debug_checks(False)

    def test_rank_limit(self):
        with pytest.raises(ConfigError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_dtype_switch(self):
        T.set_default_dtype("float32")
        try:
            assert Tensor([1.0, 2.0]).dtype == np.float32 or Tensor(np.array([1, 2])).dtype == np.float32
        finally:
            T.set_default_dtype("float64")
        assert Tensor(np.array([1, 2])).dtype == np.float64


class TestMultCounter:
    def test_conv_counts_match_formula(self):
        T.reset_mult_count()
        x = Tensor(np.zeros((2, 3, 8, 8)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        conv2d(x, w, padding=1)
        assert T.mult_count() == 2 * 4 * 3 * 9 * 8 * 8
