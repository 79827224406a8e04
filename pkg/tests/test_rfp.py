import numpy as np
import pytest

from rfpdet.errors import ConfigError
from rfpdet.gradcheck import check_gradients
from rfpdet.rfp import (
    RfpConfig,
    default_dilations,
    fold_for_inference,
    init_rfp_params,
    rfp_forward,
    rfp_param_count,
)
from rfpdet.tensor import Tensor, sum_all

from helpers import naive_conv2d


def make(channels=4, seed=0, **kw):
    cfg = RfpConfig(channels=channels, **kw).validate()
    params = init_rfp_params(cfg, np.random.default_rng(seed))
    return cfg, params


class TestForward:
    def test_zero_weights_is_identity(self):
        cfg, params = make()
        for p in params.branch_weights:
            p.tensor.data[:] = 0.0
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 6, 6)))
        out = rfp_forward(x, cfg, params)
        np.testing.assert_array_equal(out.data, x.data)

    def test_equal_dilations_pool_equals_single(self):
        cfg, params = make(branches=3, dilations=(2, 2, 2))
        x = Tensor(np.random.default_rng(2).normal(size=(1, 4, 7, 7)))
        pooled = rfp_forward(x, cfg, params)
        single = rfp_forward(x, fold_for_inference(cfg, 1), params)
        assert np.max(np.abs(pooled.data - single.data)) <= 1e-12

    def test_matches_straight_line_reference(self):
        # independent evaluation: per-branch naive conv + shortcut, averaged
        cfg, params = make(seed=3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 4, 9, 9))
        w = params.branch_weights[0].tensor.data
        want = np.zeros_like(x)
        for d in cfg.dilations:
            want += naive_conv2d(x, w, stride=1, padding=d, dilation=d) + x
        want /= cfg.branches
        got = rfp_forward(Tensor(x), cfg, params)
        np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)

    def test_unshared_branches_use_distinct_kernels(self):
        cfg, params = make(share_weights=False, seed=5)
        assert len(params.branch_weights) == 3
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 4, 8, 8))
        want = np.zeros_like(x)
        for d, p in zip(cfg.dilations, params.branch_weights):
            want += naive_conv2d(x, p.tensor.data, stride=1, padding=d, dilation=d) + x
        want /= 3
        np.testing.assert_allclose(rfp_forward(Tensor(x), cfg, params).data, want, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("fusion", ["branch_pool", "add", "concat"])
    def test_output_shape_equals_input_shape(self, fusion):
        cfg, params = make(fusion=fusion, seed=7)
        x = Tensor(np.random.default_rng(8).normal(size=(2, 4, 11, 13)))
        assert rfp_forward(x, cfg, params).shape == x.shape

    def test_shape_preservation_sweep(self):
        rng = np.random.default_rng(9)
        for branches in (1, 2, 3, 4):
            dil = default_dilations(branches)
            h = int(rng.integers(8, 34))
            w = int(rng.integers(8, 34))
            cfg, params = make(channels=3, branches=branches, dilations=dil, seed=branches)
            x = Tensor(rng.normal(size=(1, 3, h, w)))
            assert rfp_forward(x, cfg, params).shape == (1, 3, h, w)
        # and the largest rate in the sweep, on a map smaller than its span
        cfg, params = make(channels=2, branches=1, dilations=(7,), seed=99)
        x = Tensor(rng.normal(size=(1, 2, 8, 8)))
        assert rfp_forward(x, cfg, params).shape == (1, 2, 8, 8)

    def test_channel_mismatch_rejected(self):
        cfg, params = make(channels=4)
        with pytest.raises(ConfigError):
            rfp_forward(Tensor(np.zeros((1, 3, 8, 8))), cfg, params)

    def test_force_branch_on_add_fusion_runs_degraded(self):
        cfg, params = make(fusion="add", seed=11)
        x = Tensor(np.random.default_rng(12).normal(size=(1, 4, 6, 6)))
        full = rfp_forward(x, cfg, params)
        one = rfp_forward(x, cfg, params, force_branch=2)
        assert one.shape == full.shape
        assert np.max(np.abs(one.data - full.data)) > 1e-6

    def test_force_branch_on_concat_rejected(self):
        cfg, params = make(fusion="concat", seed=13)
        x = Tensor(np.zeros((1, 4, 6, 6)))
        with pytest.raises(ConfigError):
            rfp_forward(x, cfg, params, force_branch=1)


class TestFold:
    def test_default_fold_keeps_middle_dilation_branch(self):
        cfg, _ = make()
        folded = fold_for_inference(cfg)
        assert folded.inference == 2
        assert cfg.dilations[folded.inference - 1] == 3

    def test_fold_single_branch_module_is_identity_behavior(self):
        cfg, params = make(branches=1, dilations=(1,), seed=20)
        folded = fold_for_inference(cfg, 1)
        x = Tensor(np.random.default_rng(21).normal(size=(1, 4, 6, 6)))
        np.testing.assert_array_equal(
            rfp_forward(x, cfg, params).data, rfp_forward(x, folded, params).data
        )

    def test_fold_refused_for_add_and_concat(self):
        for fusion in ("add", "concat"):
            cfg, _ = make(fusion=fusion)
            with pytest.raises(ConfigError, match="branch pool|fold"):
                fold_for_inference(cfg)

    def test_folded_output_shares_shape_with_unfolded(self):
        cfg, params = make(seed=22)
        x = Tensor(np.random.default_rng(23).normal(size=(2, 4, 10, 10)))
        full = rfp_forward(x, cfg, params)
        folded = rfp_forward(x, fold_for_inference(cfg), params)
        assert folded.shape == full.shape
        assert not np.array_equal(folded.data, full.data)

    def test_config_validation_rejects_single_with_add(self):
        with pytest.raises(ConfigError):
            RfpConfig(channels=4, fusion="add", inference=2).validate()

    def test_dilations_must_match_branch_count(self):
        with pytest.raises(ConfigError):
            RfpConfig(channels=4, branches=2, dilations=(1, 3, 5)).validate()


class TestParamCount:
    def test_shared_256ch_no_bias(self):
        cfg = RfpConfig(channels=256)
        assert rfp_param_count(cfg) == 589_824

    def test_count_independent_of_branches_when_shared(self):
        counts = {
            rfp_param_count(RfpConfig(channels=256, branches=b, dilations=default_dilations(b)))
            for b in (1, 2, 3, 4)
        }
        assert len(counts) == 1

    def test_unshared_scales_linearly(self):
        shared = rfp_param_count(RfpConfig(channels=256))
        unshared = rfp_param_count(RfpConfig(channels=256, share_weights=False))
        assert unshared == 3 * shared
        # six pyramid levels' worth of extra kernels vs the published 6.77M delta
        model_delta = (unshared - shared) * 6
        assert model_delta == 2 * 6 * 589_824
        assert abs(model_delta - 6.77e6) / 6.77e6 < 0.06

    def test_bias_and_concat_terms(self):
        assert rfp_param_count(RfpConfig(channels=8, use_bias=True)) == 8 * 8 * 9 + 8
        assert rfp_param_count(RfpConfig(channels=8, fusion="concat")) == 8 * 8 * 9 + 3 * 8 * 8

    def test_counts_match_instantiated_parameters(self):
        for kw in (
            {},
            {"share_weights": False},
            {"use_bias": True},
            {"fusion": "concat"},
            {"branches": 4, "dilations": (1, 3, 5, 7), "share_weights": False, "use_bias": True},
        ):
            cfg, params = make(channels=5, seed=1, **kw)
            actual = sum(p.tensor.data.size for p in params.parameters())
            assert actual == rfp_param_count(cfg), kw


class TestSharedGradient:
    def test_shared_weight_grad_is_sum_over_branches(self):
        cfg, params = make(channels=2, seed=30)
        x = Tensor(np.random.default_rng(31).normal(size=(1, 2, 6, 6)))
        w = params.branch_weights[0].tensor
        assert params.branch_weights[0].shared_ref_count == 3
        err = check_gradients(lambda: sum_all(rfp_forward(x, cfg, params)), [w])
        assert err < 1e-6

    def test_input_gradient_through_block(self):
        cfg, params = make(channels=2, seed=32)
        x = Tensor(np.random.default_rng(33).normal(size=(1, 2, 5, 5)), requires_grad=True)
        err = check_gradients(lambda: sum_all(rfp_forward(x, cfg, params)), [x])
        assert err < 1e-6

    @pytest.mark.parametrize("fusion", ["add", "concat"])
    def test_ablation_fusions_gradcheck(self, fusion):
        cfg, params = make(channels=2, seed=34, fusion=fusion)
        x = Tensor(np.random.default_rng(35).normal(size=(1, 2, 5, 5)))
        wrt = [p.tensor for p in params.parameters()]
        err = check_gradients(lambda: sum_all(rfp_forward(x, cfg, params)), wrt)
        assert err < 1e-6


def test_default_dilation_schedule():
    assert default_dilations(1) == (1,)
    assert default_dilations(2) == (1, 3)
    assert default_dilations(3) == (1, 3, 5)
    assert default_dilations(4) == (1, 3, 5, 7)
