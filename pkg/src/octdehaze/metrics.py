"""Evaluation: PSNR/SSIM, parameter and FLOP accounting, report generation."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ValidationError
from .losses import ssim as ssim_torch
from .octave_nn import SelfAttention2d, SpectralNormConv2d

PSNR_CAP_DB = 100.0


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 100 dB when MSE is zero."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"psnr shape mismatch: {x.shape} vs {y.shape}")
    if peak <= 0:
        raise ValidationError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def ssim_np(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """SSIM on HxWxC (or HxW) numpy images, via the shared torch implementation."""

    def to_nchw(a):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, :, None]
        return torch.from_numpy(a.transpose(2, 0, 1)[None])

    return float(ssim_torch(to_nchw(x), to_nchw(y), data_range=data_range))


# ---------------------------------------------------------------------------
# parameter / FLOP accounting
# ---------------------------------------------------------------------------


def count_params(module: nn.Module) -> int:
    """Trainable parameter elements plus persistent spectral-norm state.

    Convention: the power-iteration u/v vectors are counted because they are
    persistent per-layer state carried in every checkpoint.
    """
    total = sum(p.numel() for p in module.parameters() if p.requires_grad)
    for m in module.modules():
        if isinstance(m, SpectralNormConv2d):
            total += m.u.numel() + m.v.numel()
    return total


def _conv_flops(module, out_shape):
    conv = module.conv if isinstance(module, SpectralNormConv2d) else module
    k = conv.kernel_size[0] * conv.kernel_size[1]
    cin = conv.in_channels // conv.groups
    b, cout, h, w = out_shape
    return 2 * k * cin * cout * h * w * b


def _conv_transpose_flops(module, in_shape):
    k = module.kernel_size[0] * module.kernel_size[1]
    b, cin, h, w = in_shape
    return 2 * k * (cin // module.groups) * module.out_channels * h * w * b


def _attention_flops(module, in_shape):
    b, c, h, w = in_shape
    n = h * w
    # score matrix and its application to values (projections are counted by
    # their own conv hooks)
    return 2 * n * n * module.key_channels * b + 2 * n * n * c * b


def count_flops(network: nn.Module, input_shape) -> int:
    """Multiply-accumulate based FLOP count (2 x MACs) via a shape-tracing
    forward pass. Convolutions and attention matrix products are counted;
    normalizations and activations are not."""
    if len(input_shape) == 3:
        input_shape = (1, *input_shape)
    total = 0
    handles = []

    def hook(module, inputs, output):
        nonlocal total
        if isinstance(module, (nn.Conv2d, SpectralNormConv2d)):
            total += _conv_flops(module, tuple(output.shape))
        elif isinstance(module, nn.ConvTranspose2d):
            total += _conv_transpose_flops(module, tuple(inputs[0].shape))
        elif isinstance(module, SelfAttention2d):
            total += _attention_flops(module, tuple(inputs[0].shape))

    for m in network.modules():
        if isinstance(
            m, (nn.Conv2d, nn.ConvTranspose2d, SpectralNormConv2d, SelfAttention2d)
        ):
            # the conv inside SpectralNormConv2d never runs its own forward,
            # so registering on it is a no-op and nothing is double counted
            handles.append(m.register_forward_hook(hook))
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            network(torch.zeros(input_shape))
    finally:
        for h in handles:
            h.remove()
        network.train(was_training)
    return total


def octave_conv_flop_ratio(alpha: float = 0.5) -> float:
    """Analytic four-path cost of an octave conv relative to a vanilla conv
    with the same channels/kernel/output size (0.4375 at alpha = 0.5)."""
    ah, al = 1.0 - alpha, alpha
    # HH at full resolution; HL, LH, LL at quarter the positions
    return ah * ah + (ah * al + al * ah + al * al) / 4.0


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------


def config_fingerprint(gen_name, disc_name, loss_flag, seed) -> str:
    blob = json.dumps(
        {"gen": gen_name, "disc": disc_name, "loss": loss_flag, "seed": seed},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MetricsReport:
    psnr_mean: float
    ssim_mean: float
    per_image: list = field(default_factory=list)
    param_count: int = 0
    flop_count: int = 0
    flop_input_size: int = 0
    fingerprint: str = ""
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
            "per_image": self.per_image,
            "param_count": self.param_count,
            "flop_count": self.flop_count,
            "flop_input_size": self.flop_input_size,
            "fingerprint": self.fingerprint,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def table_row(self) -> dict:
        cfg = self.config
        return {
            "G": cfg.get("gen", "-"),
            "D": cfg.get("disc", "-"),
            "Loss": cfg.get("loss", "-"),
            "PSNR": f"{self.psnr_mean:.2f}",
            "SSIM": f"{self.ssim_mean:.3f}",
            "#param": f"{self.param_count / 1e6:.2f}M",
        }


def format_table(rows: list[dict]) -> str:
    cols = ["G", "D", "Loss", "PSNR", "SSIM", "#param"]
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    header = " | ".join(c.ljust(widths[c]) for c in cols)
    sep = "-+-".join("-" * widths[c] for c in cols)
    lines = [header, sep]
    lines += [" | ".join(str(r[c]).ljust(widths[c]) for c in cols) for r in rows]
    return "\n".join(lines)


def evaluate(
    dehazer, test_pairs, config: dict | None = None, pair_aware: bool = False
) -> MetricsReport:
    """Run ``dehazer`` (hazy HxWx3 [0,1] -> dehazed HxWx3 [0,1]) over aligned
    (hazy, clear) test pairs and aggregate per-image PSNR/SSIM by the mean.

    With ``pair_aware=True`` the dehazer receives the whole pair instead of
    just the hazy image (used by the analytic oracle, which needs the true
    transmission and atmospheric light)."""
    if not test_pairs:
        raise ValidationError("empty test set")
    per_image = []
    for pair in test_pairs:
        raw = dehazer(pair) if pair_aware else dehazer(pair.hazy)
        out = np.clip(np.asarray(raw, dtype=np.float64), 0.0, 1.0)
        per_image.append(
            {
                "source_id": pair.source_id,
                "psnr": psnr(out, pair.clear, peak=1.0),
                "ssim": ssim_np(out, pair.clear, data_range=1.0),
                "clipped_pixels": pair.clipped_pixels,
            }
        )
    return MetricsReport(
        psnr_mean=float(np.mean([r["psnr"] for r in per_image])),
        ssim_mean=float(np.mean([r["ssim"] for r in per_image])),
        per_image=per_image,
        config=config or {},
        fingerprint=config_fingerprint(
            (config or {}).get("gen"),
            (config or {}).get("disc"),
            (config or {}).get("loss"),
            (config or {}).get("seed"),
        ),
    )


def identity_dehazer(hazy):
    return hazy


def oracle_dehazer(t_min: float = 0.05):
    """Pair-aware analytic inversion using the true transmission and A."""
    from .haze_synth import invert_scattering, transmission_from_depth

    def run(pair):
        t = transmission_from_depth(pair.depth, pair.params.beta)
        return invert_scattering(pair.hazy, t, pair.params.atmospheric_light, t_min)

    return run


def generator_dehazer(module: nn.Module, dtype=torch.float32):
    """Wrap a trained hazy->clear generator as a [0,1] numpy dehazer."""

    def run(hazy):
        x = torch.from_numpy(np.ascontiguousarray(hazy.transpose(2, 0, 1)))[None]
        x = (x.to(dtype) * 2.0 - 1.0)
        with torch.no_grad():
            y = module(x)
        y = ((y[0] + 1.0) / 2.0).clamp(0, 1)
        return y.numpy().transpose(1, 2, 0)

    return run
