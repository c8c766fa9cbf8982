import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from octdehaze.errors import ValidationError
from octdehaze.haze_synth import synthesize_dataset
from octdehaze.metrics import (
    MetricsReport,
    config_fingerprint,
    count_flops,
    count_params,
    evaluate,
    format_table,
    identity_dehazer,
    octave_conv_flop_ratio,
    oracle_dehazer,
    psnr,
    ssim_np,
)
from octdehaze.networks import build_generator, generator_spec
from octdehaze.octave_nn import OctConv2d, OctFeature, SpectralNormConv2d

from oracles import scalar_ssim


class TestPsnr:
    def test_identical_images_cap(self, rng):
        x = rng.random((8, 8, 3))
        assert psnr(x, x) == 100.0

    def test_known_mse_value(self):
        x = np.zeros((4, 4))
        y = np.full((4, 4), 0.1)  # MSE = 0.01 -> 20 dB
        assert abs(psnr(x, y) - 20.0) < 1e-12

    def test_peak_scaling(self, rng):
        x, y = rng.random((8, 8)), rng.random((8, 8))
        assert abs(psnr(255 * x, 255 * y, peak=255.0) - psnr(x, y)) < 1e-9

    def test_validation(self, rng):
        with pytest.raises(ValidationError):
            psnr(rng.random((4, 4)), rng.random((5, 5)))
        with pytest.raises(ValidationError):
            psnr(rng.random((4, 4)), rng.random((4, 4)), peak=0.0)


class TestSsimNp:
    def test_matches_scalar_oracle(self, rng):
        x = rng.random((13, 13, 3))
        y = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
        assert abs(ssim_np(x, y) - scalar_ssim(x, y)) < 1e-8

    def test_grayscale_input(self, rng):
        x = rng.random((16, 16))
        assert abs(ssim_np(x, x) - 1.0) < 1e-12


class TestParamCount:
    def test_plain_conv_closed_form(self):
        # 3x3 conv, 16 in, 8 out, bias: 16*8*9 + 8 = 1160 + 8
        assert count_params(nn.Conv2d(16, 8, 3)) == 16 * 8 * 9 + 8

    def test_frozen_params_excluded(self):
        conv = nn.Conv2d(4, 4, 3)
        for p in conv.parameters():
            p.requires_grad_(False)
        assert count_params(conv) == 0

    def test_spectral_state_included(self):
        conv = nn.Conv2d(4, 8, 3)
        base = count_params(conv)
        sn = SpectralNormConv2d(nn.Conv2d(4, 8, 3))
        # u has cout entries, v has cin*k*k entries
        assert count_params(sn) == base + 8 + 4 * 9


class TestFlops:
    def test_conv_closed_form(self):
        # 3x3 conv, 16->8 channels, 8x8 output (padding 1): 2*9*16*8*64
        net = nn.Conv2d(16, 8, 3, padding=1)
        assert count_flops(net, (16, 8, 8)) == 2 * 9 * 16 * 8 * 64

    def test_octave_ratio_analytic(self):
        assert octave_conv_flop_ratio(0.5) == 7 / 16
        assert octave_conv_flop_ratio(0.0) == 1.0

    def test_octave_conv_measured_ratio(self):
        class OctWrap(nn.Module):
            def __init__(self):
                super().__init__()
                self.oc = OctConv2d(16, 16, 3)

            def forward(self, x):
                c_low = 8
                feat = OctFeature(
                    high=x[:, :8], low=nn.functional.avg_pool2d(x[:, 8:], 2)
                )
                out = self.oc(feat)
                return out.high

        vanilla = count_flops(nn.Conv2d(16, 16, 3, padding=1), (16, 16, 16))
        octave = count_flops(OctWrap(), (16, 16, 16))
        assert abs(octave / vanilla - 7 / 16) < 1e-12

    def test_octave_generator_cheaper_than_plain(self):
        plain = build_generator(generator_spec("6B", base_width=16))
        octave = build_generator(generator_spec("6B-Oct", base_width=16))
        f_plain = plain.flops((3, 64, 64))
        f_oct = octave.flops((3, 64, 64))
        assert f_oct < f_plain


class TestEvaluate:
    def make_pairs(self, toy_sources):
        pairs, _ = synthesize_dataset(
            toy_sources[:4], 2, beta_range=(0.2, 0.6), seed=0
        )
        return pairs

    def test_identity_baseline(self, toy_sources):
        pairs = self.make_pairs(toy_sources)
        report = evaluate(identity_dehazer, pairs)
        assert len(report.per_image) == 8
        assert 0 < report.psnr_mean < 100
        assert 0 < report.ssim_mean <= 1

    def test_oracle_beats_identity(self, toy_sources):
        pairs = self.make_pairs(toy_sources)
        oracle = evaluate(oracle_dehazer(), pairs, pair_aware=True)
        ident = evaluate(identity_dehazer, pairs)
        assert oracle.psnr_mean > ident.psnr_mean
        assert oracle.psnr_mean > 40.0

    def test_empty_test_set(self):
        with pytest.raises(ValidationError):
            evaluate(identity_dehazer, [])

    def test_report_json_roundtrip(self, toy_sources):
        pairs = self.make_pairs(toy_sources)
        cfg = {"gen": "6B-Oct", "disc": "3L-OctN", "loss": "CPD", "seed": 0}
        report = evaluate(identity_dehazer, pairs, config=cfg)
        doc = json.loads(report.to_json())
        assert doc["config"] == cfg
        assert doc["fingerprint"] == config_fingerprint("6B-Oct", "3L-OctN", "CPD", 0)

    def test_fingerprint_sensitivity(self):
        a = config_fingerprint("6B-Oct", "3L", "base", 0)
        b = config_fingerprint("6B-Oct", "3L", "base", 1)
        assert a != b and len(a) == 16

    def test_format_table(self):
        rows = [
            MetricsReport(
                psnr_mean=21.5,
                ssim_mean=0.87,
                param_count=28_285_832,
                config={"gen": "9B", "disc": "3L", "loss": "base"},
            ).table_row()
        ]
        text = format_table(rows)
        lines = text.splitlines()
        assert "PSNR" in lines[0] and "#param" in lines[0]
        assert "28.29M" in lines[2] and "21.50" in lines[2]
