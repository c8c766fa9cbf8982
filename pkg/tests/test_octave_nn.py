import numpy as np
import pytest
import torch
import torch.nn.functional as F

from octdehaze.errors import CapacityError, ValidationError
from octdehaze.octave_nn import (
    OctConv2d,
    OctFeature,
    OctResidualBlock,
    SelfAttention2d,
    SpectralNormConv2d,
    init_spectral_state,
    spectral_normalize,
    split_channels,
)

from oracles import avg_pool2, fd_gradient, naive_conv2d, reference_attention, upsample_nearest2


def rand_feature(rng, c_high, c_low, size, dtype=torch.float64):
    high = torch.tensor(rng.standard_normal((1, c_high, size, size)), dtype=dtype)
    low = None
    if c_low:
        low = torch.tensor(
            rng.standard_normal((1, c_low, size // 2, size // 2)), dtype=dtype
        )
    return OctFeature(high=high, low=low)


def oct_forward_oracle(oc: OctConv2d, feat: OctFeature):
    """Four paths computed independently with the naive conv oracle and summed."""

    def conv(mod, x):
        c = mod.conv if isinstance(mod, SpectralNormConv2d) else mod
        w = c.weight.detach().numpy()
        b = c.bias.detach().numpy() if c.bias is not None else None
        return naive_conv2d(x, w, b, stride=c.stride[0], padding=c.padding[0])

    high = feat.high.numpy() if feat.high is not None else None
    low = feat.low.numpy() if feat.low is not None else None
    y_high = y_low = None
    if oc.w_hh is not None:
        y_high = conv(oc.w_hh, high)
    if oc.w_lh is not None:
        part = upsample_nearest2(conv(oc.w_lh, low))
        y_high = part if y_high is None else y_high + part
    if oc.w_hl is not None:
        y_low = conv(oc.w_hl, avg_pool2(high))
    if oc.w_ll is not None:
        part = conv(oc.w_ll, low)
        y_low = part if y_low is None else y_low + part
    return y_high, y_low


class TestOctConv:
    def test_alpha_zero_equals_vanilla_conv(self, rng):
        oc = OctConv2d(4, 6, 3, alpha_in=0.0, alpha_out=0.0).double()
        x = torch.tensor(rng.standard_normal((1, 4, 8, 8)))
        out = oc(OctFeature(high=x))
        assert out.low is None
        expected = naive_conv2d(
            x.numpy(),
            oc.w_hh.weight.detach().numpy(),
            oc.w_hh.bias.detach().numpy(),
            padding=1,
        )
        assert np.abs(out.high.detach().numpy() - expected).max() < 1e-6

    def test_shape_contract(self, rng):
        oc = OctConv2d(16, 16, 3).double()
        out = oc(rand_feature(rng, 8, 8, 16))
        assert tuple(out.high.shape) == (1, 8, 16, 16)
        assert tuple(out.low.shape) == (1, 8, 8, 8)

    def test_four_path_decomposition_oracle(self, rng):
        oc = OctConv2d(8, 8, 3).double()
        feat = rand_feature(rng, 4, 4, 8)
        out = oc(feat)
        e_high, e_low = oct_forward_oracle(oc, feat)
        assert np.abs(out.high.detach().numpy() - e_high).max() < 1e-6
        assert np.abs(out.low.detach().numpy() - e_low).max() < 1e-6

    def test_four_path_decomposition_100_cases(self):
        worst = 0.0
        for seed in range(100):
            r = np.random.default_rng(seed)
            torch.manual_seed(seed)
            oc = OctConv2d(4, 4, 3).double()
            feat = rand_feature(r, 2, 2, 6)
            out = oc(feat)
            e_high, e_low = oct_forward_oracle(oc, feat)
            worst = max(
                worst,
                np.abs(out.high.detach().numpy() - e_high).max(),
                np.abs(out.low.detach().numpy() - e_low).max(),
            )
        assert worst < 1e-6

    def test_alpha_one_is_half_resolution_vanilla(self, rng):
        oc = OctConv2d(4, 4, 3, alpha_in=1.0, alpha_out=1.0).double()
        low = torch.tensor(rng.standard_normal((1, 4, 6, 6)))
        out = oc(OctFeature(high=None, low=low))
        assert out.high is None
        expected = naive_conv2d(
            low.numpy(),
            oc.w_ll.weight.detach().numpy(),
            oc.w_ll.bias.detach().numpy(),
            padding=1,
        )
        assert np.abs(out.low.detach().numpy() - expected).max() < 1e-6

    def test_param_count_partition(self):
        for alpha in (0.0, 0.5):
            oc = OctConv2d(16, 24, 3, alpha_in=alpha, alpha_out=alpha)
            vanilla = torch.nn.Conv2d(16, 24, 3)
            assert sum(p.numel() for p in oc.parameters()) == sum(
                p.numel() for p in vanilla.parameters()
            )

    def test_odd_spatial_dims_rejected(self, rng):
        oc = OctConv2d(4, 4, 3).double()
        high = torch.tensor(rng.standard_normal((1, 2, 7, 7)))
        low = torch.tensor(rng.standard_normal((1, 2, 3, 3)))
        with pytest.raises(ValidationError):
            oc(OctFeature(high=high, low=low))

    def test_mismatched_branch_split_rejected(self, rng):
        oc = OctConv2d(4, 4, 3, alpha_in=0.0, alpha_out=0.0).double()
        with pytest.raises(ValidationError):
            oc(rand_feature(rng, 2, 2, 8))

    def test_gradient_matches_finite_differences(self, rng):
        torch.manual_seed(0)
        oc = OctConv2d(4, 4, 3).double()
        feat = rand_feature(rng, 2, 2, 6)
        proj_h = torch.tensor(rng.standard_normal((1, 2, 6, 6)))
        proj_l = torch.tensor(rng.standard_normal((1, 2, 3, 3)))

        def loss_fn():
            out = oc(feat)
            return (out.high * proj_h).sum() + (out.low * proj_l).sum()

        loss = loss_fn()
        loss.backward()
        weight = oc.w_hh.weight
        analytic = weight.grad.detach().numpy().reshape(-1)
        idx = rng.choice(weight.numel(), size=8, replace=False)

        w_np = weight.detach().numpy()

        def eval_at(w):
            with torch.no_grad():
                weight.copy_(torch.tensor(w))
            return float(loss_fn().detach())

        fd = fd_gradient(lambda w: eval_at(w), w_np.copy(), idx, eps=1e-6)
        rel = np.abs(fd - analytic[idx]) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


class TestOctResidualBlock:
    def test_zero_second_conv_is_identity(self, rng):
        block = OctResidualBlock(8).double()
        with torch.no_grad():
            for conv in (block.conv2.w_hh, block.conv2.w_hl, block.conv2.w_lh, block.conv2.w_ll):
                conv.weight.zero_()
                if conv.bias is not None:
                    conv.bias.zero_()
        feat = rand_feature(rng, 4, 4, 8)
        out = block(feat)
        assert torch.equal(out.high, feat.high)
        assert torch.equal(out.low, feat.low)

    def test_shapes_preserved(self, rng):
        block = OctResidualBlock(8).double()
        feat = rand_feature(rng, 4, 4, 8)
        out = block(feat)
        assert out.high.shape == feat.high.shape
        assert out.low.shape == feat.low.shape

    def test_gradient_matches_finite_differences(self, rng):
        torch.manual_seed(1)
        block = OctResidualBlock(4).double()
        feat = rand_feature(rng, 2, 2, 8)
        proj_h = torch.tensor(rng.standard_normal(tuple(feat.high.shape)))
        proj_l = torch.tensor(rng.standard_normal(tuple(feat.low.shape)))

        def loss_fn():
            out = block(feat)
            return (out.high * proj_h).sum() + (out.low * proj_l).sum()

        loss_fn().backward()
        weight = block.conv1.w_lh.weight
        analytic = weight.grad.detach().numpy().reshape(-1)
        idx = rng.choice(weight.numel(), size=6, replace=False)
        w_np = weight.detach().numpy()

        def eval_at(w):
            with torch.no_grad():
                weight.copy_(torch.tensor(w))
            return float(loss_fn().detach())

        fd = fd_gradient(eval_at, w_np.copy(), idx, eps=1e-6)
        rel = np.abs(fd - analytic[idx]) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


class TestSelfAttention:
    def test_zero_gate_is_identity(self, rng):
        attn = SelfAttention2d(8).double()
        x = torch.tensor(rng.standard_normal((1, 8, 6, 6)))
        assert torch.equal(attn(x), x)

    def test_rows_sum_to_one(self, rng):
        attn = SelfAttention2d(8).double()
        x = torch.tensor(rng.standard_normal((2, 8, 5, 5)))
        weights = attn.attention_weights(x)
        assert np.abs(weights.sum(dim=2).detach().numpy() - 1.0).max() < 1e-6

    def test_matches_three_projection_reference(self, rng):
        torch.manual_seed(3)
        attn = SelfAttention2d(16).double()
        with torch.no_grad():
            attn.gate.fill_(0.7)
        x = torch.tensor(rng.standard_normal((1, 16, 8, 8)))
        out = attn(x)
        expected = reference_attention(
            x[0].numpy(),
            attn.query.weight.detach().numpy()[:, :, 0, 0],
            attn.query.bias.detach().numpy(),
            attn.key.weight.detach().numpy()[:, :, 0, 0],
            attn.key.bias.detach().numpy(),
            attn.value.weight.detach().numpy()[:, :, 0, 0],
            attn.value.bias.detach().numpy(),
            0.7,
        )
        assert np.abs(out[0].detach().numpy() - expected).max() < 1e-6

    def test_capacity_error(self, rng):
        attn = SelfAttention2d(4, max_positions=16).double()
        x = torch.tensor(rng.standard_normal((1, 4, 8, 8)))
        with pytest.raises(CapacityError):
            attn(x)

    def test_gradient_matches_finite_differences(self, rng):
        torch.manual_seed(4)
        attn = SelfAttention2d(4).double()
        with torch.no_grad():
            attn.gate.fill_(0.5)
        x0 = rng.standard_normal((1, 4, 4, 4))
        proj = torch.tensor(rng.standard_normal((1, 4, 4, 4)))

        x = torch.tensor(x0, requires_grad=True)
        (attn(x) * proj).sum().backward()
        analytic = x.grad.detach().numpy().reshape(-1)
        idx = rng.choice(x0.size, size=8, replace=False)

        def eval_at(arr):
            with torch.no_grad():
                return float((attn(torch.tensor(arr)) * proj).sum())

        fd = fd_gradient(eval_at, x0.copy(), idx, eps=1e-6)
        rel = np.abs(fd - analytic[idx]) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


class TestSpectralNorm:
    def test_orthonormal_rows_unchanged(self):
        q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((64, 16)))
        w = torch.tensor(q.T)  # 16 x 64, orthonormal rows, sigma = 1
        state = init_spectral_state(w, seed=0)
        out, _ = spectral_normalize(w, state, n_iters=50)
        assert (out - w).abs().max() < 1e-3

    def test_scale_invariance_of_direction(self, rng):
        w = torch.tensor(rng.standard_normal((8, 12)))
        state = init_spectral_state(w, seed=1)
        out1, _ = spectral_normalize(w, state, n_iters=50)
        state = init_spectral_state(w, seed=1)
        out2, _ = spectral_normalize(3.7 * w, state, n_iters=50)
        assert (out1 - out2).abs().max() < 1e-6

    def test_svd_oracle_20_matrices(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            w = torch.tensor(r.standard_normal((32, 64)))
            state = init_spectral_state(w, seed=seed)
            out, _ = spectral_normalize(w, state, n_iters=200)
            sigma = np.linalg.svd(out.numpy(), compute_uv=False)[0]
            assert abs(sigma - 1.0) < 1e-3

    def test_zero_matrix_warns_and_floors(self):
        w = torch.zeros(4, 4, dtype=torch.float64)
        state = init_spectral_state(w, seed=0)
        with pytest.warns(UserWarning, match="zero weight"):
            out, _ = spectral_normalize(w, state)
        assert torch.isfinite(out).all()

    def test_module_gradient_with_frozen_state(self, rng):
        torch.manual_seed(5)
        sn = SpectralNormConv2d(torch.nn.Conv2d(3, 4, 3, padding=1)).double()
        sn.eval()  # state held constant
        x0 = rng.standard_normal((1, 3, 6, 6))
        proj = torch.tensor(rng.standard_normal((1, 4, 6, 6)))
        x = torch.tensor(x0, requires_grad=True)
        (sn(x) * proj).sum().backward()
        analytic = x.grad.detach().numpy().reshape(-1)
        idx = rng.choice(x0.size, size=8, replace=False)

        def eval_at(arr):
            with torch.no_grad():
                return float((sn(torch.tensor(arr)) * proj).sum())

        fd = fd_gradient(eval_at, x0.copy(), idx, eps=1e-6)
        rel = np.abs(fd - analytic[idx]) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4


def test_split_channels_validation():
    assert split_channels(16, 0.5) == (8, 8)
    assert split_channels(16, 0.0) == (16, 0)
    with pytest.raises(ValidationError):
        split_channels(1, 0.4)
