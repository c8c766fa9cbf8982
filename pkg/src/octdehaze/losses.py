"""Loss functions for unpaired dehazing training.

Every loss reduces by the mean over all elements, so values are independent
of image resolution and batch size. Images are expected in whatever range
the caller declares; SSIM takes the dynamic range explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ExtractorUnavailableError, ValidationError

LOSS_FLAG_VOCAB = ("base", "CPD", "SSIM")


@dataclass
class LossWeights:
    """Scalar coefficients for the training objective. The source material
    omits them; these defaults follow cycle-consistent GAN conventions."""

    w_adv: float = 1.0
    w_cyc: float = 10.0
    w_idt: float = 5.0
    w_perc: float = 0.1
    w_depth: float = 0.5
    w_ssim: float = 0.5

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not (v >= 0 and torch.isfinite(torch.tensor(float(v)))):
                raise ValidationError(f"{name} must be finite and >= 0, got {v}")


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def cycle_consistency_loss(x, x_rec, y, y_rec):
    """Mean |x_rec - x| + mean |y_rec - y| (L1 cycle reconstruction penalty)."""
    _check_same_shape(x, x_rec, "cycle_consistency_loss x")
    _check_same_shape(y, y_rec, "cycle_consistency_loss y")
    return (x_rec - x).abs().mean() + (y_rec - y).abs().mean()


def identity_loss(x, g_x):
    """Mean |g_x - x| for a generator applied to its own output domain."""
    _check_same_shape(x, g_x, "identity_loss")
    return (g_x - x).abs().mean()


def depth_consistency_loss(x, x_hat, phi):
    """Mean squared difference between phi(x) and phi(x_hat)."""
    dx, dx_hat = phi(x), phi(x_hat)
    _check_same_shape(dx, dx_hat, "depth_consistency_loss (phi outputs)")
    return ((dx - dx_hat) ** 2).mean()


def cyclic_depth_loss(x, y, g, f, phi):
    """Depth consistency over both cycle directions: x->G->F and y->F->G."""
    return depth_consistency_loss(x, f(g(x)), phi) + depth_consistency_loss(
        y, g(f(y)), phi
    )


def normalize_depth(d, eps: float = 1e-6):
    """Zero-median, unit mean-absolute-deviation scaling per image.

    Applied to depth estimator outputs before the consistency loss so the
    loss scale is invariant to the backend's arbitrary affine depth calibration.
    """
    flat = d.reshape(d.shape[0], -1)
    med = flat.median(dim=1, keepdim=True).values
    scale = (flat - med).abs().mean(dim=1, keepdim=True) + eps
    return ((flat - med) / scale).reshape(d.shape)


class NormalizedDepth(nn.Module):
    """Wraps a depth estimator with affine output normalization."""

    def __init__(self, phi):
        super().__init__()
        self.phi = phi

    def forward(self, x):
        return normalize_depth(self.phi(x))


def _gaussian_window(size: int, sigma: float, dtype, device):
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x, y, data_range: float = 1.0, window_size: int = 11, sigma: float = 1.5):
    """Mean local structural similarity (Gaussian 11x11 window, sigma 1.5).

    Inputs are NCHW tensors; stabilizers C1=(0.01*L)^2 and C2=(0.03*L)^2 scale
    with the declared dynamic range L. Windows are 'valid' (no padding).
    """
    _check_same_shape(x, y, "ssim")
    if x.dim() != 4:
        raise ValidationError(f"ssim expects NCHW tensors, got {x.dim()} dims")
    h, w = x.shape[-2:]
    if h < window_size or w < window_size:
        raise ValidationError(
            f"image {h}x{w} smaller than SSIM window {window_size}x{window_size}"
        )
    c = x.shape[1]
    win = _gaussian_window(window_size, sigma, x.dtype, x.device)
    win = win.expand(c, 1, window_size, window_size)

    def filt(t):
        return F.conv2d(t, win, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def ssim_loss(x, x_hat, data_range: float = 1.0):
    return 1.0 - ssim(x, x_hat, data_range=data_range)


def cyclic_ssim_loss(x, y, g, f, data_range: float = 1.0):
    """(1 - SSIM(x, F(G(x)))) + (1 - SSIM(y, G(F(y))))."""
    return ssim_loss(x, f(g(x)), data_range) + ssim_loss(y, g(f(y)), data_range)


def perceptual_loss(x, x_hat, extractor):
    """Sum over the extractor's tap points of mean squared feature differences."""
    feats_x = extractor(x)
    feats_hat = extractor(x_hat)
    if len(feats_x) != len(feats_hat):
        raise ValidationError("extractor returned differing tap counts")
    total = x.new_zeros(())
    for fx, fh in zip(feats_x, feats_hat):
        _check_same_shape(fx, fh, "perceptual_loss feature")
        total = total + ((fx - fh) ** 2).mean()
    return total


def adversarial_losses(d_real_patch, d_fake_patch):
    """Least-squares GAN objective on patch maps.

    Returns (g_loss, d_loss): g_loss = mean((d_fake-1)^2),
    d_loss = 0.5*mean((d_real-1)^2) + 0.5*mean(d_fake^2).
    """
    g_loss = ((d_fake_patch - 1.0) ** 2).mean()
    d_loss = 0.5 * ((d_real_patch - 1.0) ** 2).mean() + 0.5 * (d_fake_patch**2).mean()
    return g_loss, d_loss


# ---------------------------------------------------------------------------
# perceptual feature extractors
# ---------------------------------------------------------------------------


class StubFeatureExtractor(nn.Module):
    """Frozen random conv stack with 5 tap points; deterministic given seed.

    Stands in for the pretrained 5-tap backbone when its weights are not
    available. Differentiable with respect to the input, never trained.
    """

    tap_count = 5

    def __init__(self, seed: int = 0, widths=(8, 16, 32, 64, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        cin = 3
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
            stages.append(conv)
            cin = w
        self.stages = nn.ModuleList(stages)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        for conv in self.stages:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


class ResNet50FeatureExtractor(nn.Module):
    """ImageNet-pretrained 5-tap backbone (stem + the four residual stages)."""

    tap_count = 5

    def __init__(self):
        super().__init__()
        try:
            from torchvision import models

            backbone = models.resnet50(weights=models.ResNet50_Weights.IMAGENET1K_V2)
        except Exception as exc:  # weights download/torchvision missing
            raise ExtractorUnavailableError(
                "pretrained resnet50 feature extractor unavailable "
                f"({exc}); use the 'stub' extractor instead"
            ) from exc
        self.stem = nn.Sequential(
            backbone.conv1, backbone.bn1, backbone.relu, backbone.maxpool
        )
        self.stages = nn.ModuleList(
            [backbone.layer1, backbone.layer2, backbone.layer3, backbone.layer4]
        )
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        feats = []
        x = self.stem(x)
        feats.append(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def make_extractor(backbone: str = "stub", seed: int = 0) -> nn.Module:
    if backbone == "stub":
        return StubFeatureExtractor(seed=seed)
    if backbone == "resnet50":
        return ResNet50FeatureExtractor()
    raise ValidationError(f"unknown extractor backbone '{backbone}' (stub|resnet50)")


def parse_loss_flag(flag: str) -> dict:
    """Map an ablation-grid loss name to component toggles.

    ``base`` = adversarial + cycle + identity + perceptual; ``CPD`` adds the
    cyclic depth-consistency term; ``SSIM`` adds the cyclic SSIM term.
    """
    if flag not in LOSS_FLAG_VOCAB:
        raise ValidationError(
            f"unknown loss flag '{flag}'; valid flags: {list(LOSS_FLAG_VOCAB)}"
        )
    return {"use_depth": flag == "CPD", "use_ssim": flag == "SSIM"}
