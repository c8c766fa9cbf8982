"""Generator and discriminator variants, built from declarative specs.

Naming follows the ablation-grid vocabulary: generators ``9B``, ``6B``,
``6B-SA``, ``6B-Oct`` (residual block count, optionally with self-attention
or octave blocks); discriminators ``3L``, ``3L-SA``, ``3L-Oct``, ``3L-OctN``
(3 stride-2 feature layers + a stride-1 layer + a 1-channel patch head;
``N`` adds spectral normalization).

Octave layers only ever appear between the generator's downsampling and
upsampling stages and never in the discriminator's first layer; those
boundary layers stay plain for training stability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .octave_nn import (
    OctConv2d,
    OctFeature,
    OctResidualBlock,
    SelfAttention2d,
    SpectralNormConv2d,
    branch_act,
)

GENERATOR_NAMES = {
    "9B": (9, "plain"),
    "6B": (6, "plain"),
    "6B-SA": (6, "self_attention"),
    "6B-Oct": (6, "octave"),
}
DISCRIMINATOR_NAMES = {
    "3L": "plain",
    "3L-SA": "self_attention",
    "3L-Oct": "octave",
    "3L-OctN": "octave_spectral",
}


@dataclass
class NetworkSpec:
    kind: str  # generator | discriminator
    blocks: int = 9
    block_type: str = "plain"  # plain | octave | self_attention
    disc_layers: int = 3
    disc_type: str = "plain"  # plain | self_attention | octave | octave_spectral
    alpha: float = 0.5
    base_width: int = 64
    attention_budget: int = 4096
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("generator", "discriminator"):
            raise ConfigurationError(f"unknown network kind '{self.kind}'")
        if self.alpha not in (0.0, 0.5):
            raise ConfigurationError(f"alpha must be 0 or 0.5, got {self.alpha}")


def generator_spec(name: str, base_width: int = 64, **kw) -> NetworkSpec:
    if name not in GENERATOR_NAMES:
        raise ConfigurationError(
            f"unknown generator '{name}'; valid names: {sorted(GENERATOR_NAMES)}"
        )
    blocks, block_type = GENERATOR_NAMES[name]
    return NetworkSpec(
        kind="generator",
        blocks=blocks,
        block_type=block_type,
        base_width=base_width,
        name=name,
        **kw,
    )


def discriminator_spec(name: str, base_width: int = 64, **kw) -> NetworkSpec:
    if name not in DISCRIMINATOR_NAMES:
        raise ConfigurationError(
            f"unknown discriminator '{name}'; valid names: {sorted(DISCRIMINATOR_NAMES)}"
        )
    return NetworkSpec(
        kind="discriminator",
        disc_type=DISCRIMINATOR_NAMES[name],
        base_width=base_width,
        name=name,
        **kw,
    )


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResnetBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels, affine=False),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels, affine=False),
        )

    def forward(self, x):
        return x + self.body(x)


class _AttnResnetBlock(nn.Module):
    def __init__(self, channels: int, budget: int):
        super().__init__()
        self.block = ResnetBlock(channels)
        self.attention = SelfAttention2d(channels, max_positions=budget)

    def forward(self, x):
        return self.attention(self.block(x))


class ResnetGenerator(nn.Module):
    """7x7 stem -> two stride-2 downs -> residual blocks -> two ups -> 7x7 tanh head."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        w = spec.base_width
        self.alpha = spec.alpha if spec.block_type == "octave" else 0.0
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(3, w, 7),
            nn.InstanceNorm2d(w, affine=False),
            nn.ReLU(inplace=True),
        )
        self.down1 = nn.Sequential(
            nn.Conv2d(w, 2 * w, 3, 2, 1),
            nn.InstanceNorm2d(2 * w, affine=False),
            nn.ReLU(inplace=True),
        )
        self.down2 = nn.Sequential(
            nn.Conv2d(2 * w, 4 * w, 3, 2, 1),
            nn.InstanceNorm2d(4 * w, affine=False),
            nn.ReLU(inplace=True),
        )
        blocks = []
        for i in range(spec.blocks):
            if spec.block_type == "octave":
                blocks.append(OctResidualBlock(4 * w, alpha=spec.alpha))
            elif spec.block_type == "self_attention" and i >= spec.blocks - 2:
                blocks.append(_AttnResnetBlock(4 * w, spec.attention_budget))
            else:
                blocks.append(ResnetBlock(4 * w))
        self.blocks = nn.ModuleList(blocks)
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, 3, 2, 1, output_padding=1),
            nn.InstanceNorm2d(2 * w, affine=False),
            nn.ReLU(inplace=True),
        )
        self.up2 = nn.Sequential(
            nn.ConvTranspose2d(2 * w, w, 3, 2, 1, output_padding=1),
            nn.InstanceNorm2d(w, affine=False),
            nn.ReLU(inplace=True),
        )
        self.tail = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(w, 3, 7), nn.Tanh()
        )
        init_weights(self)

    def forward(self, x):
        x = self.down2(self.down1(self.stem(x)))
        if self.alpha > 0:
            # channel split into the high/low frequency pair; the low half is
            # pooled to half resolution (no parameters involved)
            c = x.shape[1]
            c_low = int(self.alpha * c)
            feat = OctFeature(high=x[:, : c - c_low], low=F.avg_pool2d(x[:, c - c_low:], 2))
            for block in self.blocks:
                feat = block(feat)
            x = torch.cat(
                [feat.high, F.interpolate(feat.low, scale_factor=2, mode="nearest")],
                dim=1,
            )
        else:
            for block in self.blocks:
                x = block(x)
        return self.tail(self.up2(self.up1(x)))


class PatchDiscriminator(nn.Module):
    """3 stride-2 layers, a stride-1 widening layer, and a 1-channel patch head."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        w = spec.base_width
        with_attn = spec.disc_type == "self_attention"
        lrelu = lambda: nn.LeakyReLU(0.2, inplace=True)
        layers = [nn.Conv2d(3, w, 4, 2, 1), lrelu()]
        for cin, cout, stride in ((w, 2 * w, 2), (2 * w, 4 * w, 2), (4 * w, 8 * w, 1)):
            layers += [
                nn.Conv2d(cin, cout, 4, stride, 1),
                nn.InstanceNorm2d(cout, affine=False),
                lrelu(),
            ]
            if with_attn:
                layers.append(SelfAttention2d(cout, max_positions=spec.attention_budget))
        layers.append(nn.Conv2d(8 * w, 1, 4, 1, 1))
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, x):
        return self.model(x)


class OctPatchDiscriminator(nn.Module):
    """Patch discriminator with octave middle layers.

    The first layer stays plain; its output is split into the frequency pair.
    After the last stride-2 octave layer the low branch is upsampled and added
    back into the high branch, so the stride-1 layer and the patch head run at
    half the channel width — this is where the octave discriminator saves
    parameters over the plain one.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        w = spec.base_width
        sn = spec.disc_type == "octave_spectral"
        alpha = spec.alpha if spec.alpha > 0 else 0.5

        def maybe_sn(conv):
            return SpectralNormConv2d(conv) if sn else conv

        self.first = maybe_sn(nn.Conv2d(3, w, 4, 2, 1))
        self.oct1 = OctConv2d(
            w, 2 * w, 4, stride=2, padding=1, alpha_in=alpha, alpha_out=alpha,
            spectral_norm=sn,
        )
        self.oct2 = OctConv2d(
            2 * w, 4 * w, 4, stride=2, padding=1, alpha_in=alpha, alpha_out=alpha,
            spectral_norm=sn,
        )
        self.pre_head = maybe_sn(nn.Conv2d(2 * w, 8 * w, 4, 1, 1))
        self.head = maybe_sn(nn.Conv2d(8 * w, 1, 4, 1, 1))
        self.act = nn.LeakyReLU(0.2, inplace=True)
        self.oct_act = branch_act(lambda: nn.LeakyReLU(0.2, inplace=True))
        self.alpha = alpha
        init_weights(self)

    def forward(self, x):
        x = self.act(self.first(x))
        c = x.shape[1]
        c_low = int(self.alpha * c)
        feat = OctFeature(high=x[:, : c - c_low], low=F.avg_pool2d(x[:, c - c_low:], 2))
        feat = self.oct_act(self.oct1(feat))
        feat = self.oct_act(self.oct2(feat))
        merged = feat.high + F.interpolate(feat.low, scale_factor=2, mode="nearest")
        return self.head(self.act(self.pre_head(merged)))


@dataclass
class BuiltNetwork:
    module: nn.Module = field(repr=False)
    spec: NetworkSpec
    param_count: int

    def flops(self, input_shape) -> int:
        from .metrics import count_flops

        return count_flops(self.module, input_shape)


def build_generator(spec: NetworkSpec) -> BuiltNetwork:
    if spec.kind != "generator":
        raise ConfigurationError(f"spec kind is '{spec.kind}', expected generator")
    if spec.block_type not in ("plain", "octave", "self_attention"):
        raise ConfigurationError(f"unknown block_type '{spec.block_type}'")
    module = ResnetGenerator(spec)
    from .metrics import count_params

    return BuiltNetwork(module=module, spec=spec, param_count=count_params(module))


def build_discriminator(spec: NetworkSpec) -> BuiltNetwork:
    if spec.kind != "discriminator":
        raise ConfigurationError(f"spec kind is '{spec.kind}', expected discriminator")
    if spec.disc_type in ("plain", "self_attention"):
        module = PatchDiscriminator(spec)
    elif spec.disc_type in ("octave", "octave_spectral"):
        module = OctPatchDiscriminator(spec)
    else:
        raise ConfigurationError(f"unknown disc_type '{spec.disc_type}'")
    from .metrics import count_params

    return BuiltNetwork(module=module, spec=spec, param_count=count_params(module))


def build_by_name(gen_name: str, disc_name: str, base_width: int = 64):
    """Convenience: (G_hazy->clear, G_clear->hazy, D_clear, D_hazy) as BuiltNetworks."""
    g_spec = generator_spec(gen_name, base_width)
    d_spec = discriminator_spec(disc_name, base_width)
    return (
        build_generator(g_spec),
        build_generator(generator_spec(gen_name, base_width)),
        build_discriminator(d_spec),
        build_discriminator(discriminator_spec(disc_name, base_width)),
    )
