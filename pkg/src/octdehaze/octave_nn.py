"""Octave convolution layers, residual blocks, self-attention and spectral norm.

An octave layer carries a pair of feature maps (high resolution, low
resolution at exactly half the spatial size) and mixes them through four
convolution paths: high->high, high->low (after 2x2 average pooling),
low->high (nearest upsampling after the conv) and low->low. Outputs at the
same resolution are summed element-wise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapacityError, ValidationError


@dataclass
class OctFeature:
    """High/low frequency feature pair; ``low`` is None when alpha = 0."""

    high: torch.Tensor | None
    low: torch.Tensor | None = None

    def __post_init__(self):
        if self.high is not None and self.low is not None:
            hh, hw = self.high.shape[-2:]
            lh, lw = self.low.shape[-2:]
            if (hh, hw) != (2 * lh, 2 * lw):
                raise ValidationError(
                    f"low branch {lh}x{lw} is not half of high branch {hh}x{hw}"
                )


def split_channels(channels: int, alpha: float) -> tuple[int, int]:
    """(high, low) channel counts under the alpha split; floor on the low side."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    low = int(math.floor(alpha * channels))
    high = channels - low
    if 0.0 < alpha < 1.0 and (low == 0 or high == 0):
        raise ValidationError(
            f"alpha={alpha} leaves an empty branch for {channels} channels"
        )
    return high, low


def _check_even(t: torch.Tensor, what: str):
    h, w = t.shape[-2:]
    if h % 2 or w % 2:
        raise ValidationError(f"{what} needs even spatial dims, got {h}x{w}")


class SpectralNormConv2d(nn.Module):
    """Conv2d whose weight is divided by a power-iteration estimate of its
    largest singular value. The u/v vectors persist as buffers (they are part
    of checkpoints and of the repo's parameter-count convention)."""

    def __init__(self, conv: nn.Conv2d, n_power_iterations: int = 1, eps: float = 1e-12):
        super().__init__()
        self.conv = conv
        self.n_power_iterations = n_power_iterations
        self.eps = eps
        out_dim = conv.weight.shape[0]
        in_dim = conv.weight[0].numel()
        self.register_buffer("u", F.normalize(torch.randn(out_dim), dim=0, eps=eps))
        self.register_buffer("v", F.normalize(torch.randn(in_dim), dim=0, eps=eps))

    def _sigma(self, mat: torch.Tensor, update: bool) -> torch.Tensor:
        u, v = self.u, self.v
        if update:
            with torch.no_grad():
                for _ in range(self.n_power_iterations):
                    v = F.normalize(mat.t().mv(u), dim=0, eps=self.eps)
                    u = F.normalize(mat.mv(v), dim=0, eps=self.eps)
                self.u.copy_(u)
                self.v.copy_(v)
        sigma = torch.dot(u.to(mat.dtype), mat.mv(v.to(mat.dtype)))
        return torch.clamp(sigma, min=self.eps)

    def normalized_weight(self, update: bool | None = None) -> torch.Tensor:
        if update is None:
            update = self.training
        w = self.conv.weight
        mat = w.view(w.shape[0], -1)
        return w / self._sigma(mat, update)

    def forward(self, x):
        return F.conv2d(
            x,
            self.normalized_weight(),
            self.conv.bias,
            self.conv.stride,
            self.conv.padding,
            self.conv.dilation,
            self.conv.groups,
        )


def spectral_normalize(weight: torch.Tensor, state: tuple, n_iters: int = 1):
    """Functional spectral normalization of a matrixized kernel.

    ``state`` is the (u, v) power-iteration pair; returns
    (weight / sigma_hat, (u, v)) with the state advanced by ``n_iters``.
    """
    if n_iters < 1:
        raise ValidationError("n_iters must be >= 1")
    mat = weight.reshape(weight.shape[0], -1)
    u, v = state
    eps = 1e-12
    with torch.no_grad():
        for _ in range(n_iters):
            v = F.normalize(mat.t().mv(u), dim=0, eps=eps)
            u = F.normalize(mat.mv(v), dim=0, eps=eps)
    sigma = torch.dot(u, mat.mv(v))
    if float(sigma) < eps:
        warnings.warn("spectral_normalize: zero weight matrix, flooring sigma")
        sigma = sigma + eps
    return weight / sigma, (u, v)


def init_spectral_state(weight: torch.Tensor, seed: int | None = None):
    gen = torch.Generator()
    if seed is not None:
        gen.manual_seed(seed)
    out_dim = weight.shape[0]
    in_dim = weight[0].numel()
    u = F.normalize(torch.randn(out_dim, generator=gen, dtype=weight.dtype), dim=0)
    v = F.normalize(torch.randn(in_dim, generator=gen, dtype=weight.dtype), dim=0)
    return u, v


def _make_conv(in_ch, out_ch, kernel_size, stride, padding, bias, spectral):
    conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride, padding, bias=bias)
    return SpectralNormConv2d(conv) if spectral else conv


class OctConv2d(nn.Module):
    """Four-path octave convolution.

    The alpha split partitions channels between the branches, so the total
    parameter count equals a vanilla convolution with the same
    (in_channels, out_channels, kernel_size): one bias vector per output
    branch, attached to the first existing path feeding it.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int | None = None,
        alpha_in: float = 0.5,
        alpha_out: float = 0.5,
        bias: bool = True,
        spectral_norm: bool = False,
    ):
        super().__init__()
        if padding is None:
            padding = kernel_size // 2
        self.in_high, self.in_low = split_channels(in_channels, alpha_in)
        self.out_high, self.out_low = split_channels(out_channels, alpha_out)
        self.alpha_in, self.alpha_out = alpha_in, alpha_out
        self.stride = stride

        def conv(ci, co, with_bias):
            return _make_conv(
                ci, co, kernel_size, stride, padding, bias and with_bias, spectral_norm
            )

        self.w_hh = self.w_hl = self.w_lh = self.w_ll = None
        if self.in_high and self.out_high:
            self.w_hh = conv(self.in_high, self.out_high, True)
        if self.in_high and self.out_low:
            self.w_hl = conv(self.in_high, self.out_low, True)
        if self.in_low and self.out_high:
            self.w_lh = conv(self.in_low, self.out_high, self.w_hh is None)
        if self.in_low and self.out_low:
            self.w_ll = conv(self.in_low, self.out_low, self.w_hl is None)

    def forward(self, x: OctFeature) -> OctFeature:
        high, low = x.high, x.low
        if (high is None) != (self.in_high == 0) or (low is None) != (self.in_low == 0):
            raise ValidationError("OctFeature branches do not match alpha_in split")
        y_high = y_low = None
        if self.w_hh is not None:
            y_high = self.w_hh(high)
        if self.w_lh is not None:
            part = F.interpolate(self.w_lh(low), scale_factor=2, mode="nearest")
            y_high = part if y_high is None else y_high + part
        if self.w_hl is not None:
            _check_even(high, "high branch (high->low path)")
            y_low = self.w_hl(F.avg_pool2d(high, 2))
        if self.w_ll is not None:
            part = self.w_ll(low)
            y_low = part if y_low is None else y_low + part
        return OctFeature(high=y_high, low=y_low)


class _BranchWise(nn.Module):
    """Applies (possibly distinct) modules to the two branches of an OctFeature."""

    def __init__(self, high: nn.Module | None, low: nn.Module | None):
        super().__init__()
        self.high = high
        self.low = low

    def forward(self, x: OctFeature) -> OctFeature:
        return OctFeature(
            high=self.high(x.high) if (self.high is not None and x.high is not None) else x.high,
            low=self.low(x.low) if (self.low is not None and x.low is not None) else x.low,
        )


def branch_norm(oct_conv: OctConv2d) -> _BranchWise:
    # affine=False matches the cycle-consistent baseline's instance norm
    mk = lambda c: nn.InstanceNorm2d(c, affine=False) if c else None
    return _BranchWise(mk(oct_conv.out_high), mk(oct_conv.out_low))


def branch_act(act_factory) -> _BranchWise:
    return _BranchWise(act_factory(), act_factory())


class OctResidualBlock(nn.Module):
    """y = x + F(x) branch-wise; F = octconv -> norm -> ReLU -> octconv -> norm."""

    def __init__(self, channels: int, alpha: float = 0.5, kernel_size: int = 3):
        super().__init__()
        self.conv1 = OctConv2d(
            channels, channels, kernel_size, alpha_in=alpha, alpha_out=alpha
        )
        self.conv2 = OctConv2d(
            channels, channels, kernel_size, alpha_in=alpha, alpha_out=alpha
        )
        self.norm1 = branch_norm(self.conv1)
        self.norm2 = branch_norm(self.conv2)
        self.act = branch_act(nn.ReLU)

    def forward(self, x: OctFeature) -> OctFeature:
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        high = x.high + y.high if x.high is not None else None
        low = x.low + y.low if x.low is not None else None
        return OctFeature(high=high, low=low)


class SelfAttention2d(nn.Module):
    """Gated self-attention over spatial positions (query/key channels reduced,
    zero-initialized output gate so the layer starts as the identity)."""

    def __init__(
        self,
        channels: int,
        key_channel_ratio: float = 1 / 8,
        gate_init: float = 0.0,
        max_positions: int = 4096,
    ):
        super().__init__()
        key_channels = max(1, int(channels * key_channel_ratio))
        self.query = nn.Conv2d(channels, key_channels, 1)
        self.key = nn.Conv2d(channels, key_channels, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gate = nn.Parameter(torch.tensor(float(gate_init)))
        self.key_channels = key_channels
        self.max_positions = max_positions

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        n = h * w
        if n > self.max_positions:
            raise CapacityError(
                f"attention over {n} positions exceeds budget {self.max_positions}"
            )
        q = self.query(x).reshape(b, self.key_channels, n)
        k = self.key(x).reshape(b, self.key_channels, n)
        # scores[b, i, j]: query position i attending to position j
        return torch.softmax(torch.einsum("bci,bcj->bij", q, k), dim=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        attn = self.attention_weights(x)
        v = self.value(x).reshape(b, c, h * w)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.gate * out
