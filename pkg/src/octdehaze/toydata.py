"""Procedural toy RGBD sources for desk-scale experiments and tests.

Depth is a smooth random field; image luminance is shaded by inverse depth
(nearer surfaces are brighter), so depth is learnable from the image by a
small regressor and pseudo-depth heuristics are informative.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .haze_synth import RgbdSample, _to_u8, _depth_to_u16


def _smooth_field(rng: np.random.Generator, size: int, grid: int = 4) -> np.ndarray:
    """Bilinear upsampling of a coarse random grid; values in [0, 1]."""
    coarse = rng.random((grid, grid))
    xi = np.linspace(0, grid - 1, size)
    rows = np.empty((grid, size))
    for r in range(grid):
        rows[r] = np.interp(xi, np.arange(grid), coarse[r])
    out = np.empty((size, size))
    for c in range(size):
        out[:, c] = np.interp(xi, np.arange(grid), rows[:, c])
    return out


def make_toy_rgbd(
    n: int,
    size: int = 64,
    seed: int = 0,
    depth_range: tuple[float, float] = (0.5, 2.5),
) -> list[RgbdSample]:
    rng = np.random.default_rng(seed)
    lo, hi = depth_range
    samples = []
    for i in range(n):
        depth = lo + (hi - lo) * _smooth_field(rng, size)
        base = np.stack([_smooth_field(rng, size) for _ in range(3)], axis=-1)
        shade = 1.0 / depth
        shade = (shade - shade.min()) / (np.ptp(shade) + 1e-9) * 0.7 + 0.15
        image = np.clip(0.45 * base + 0.55 * shade[..., None], 0.0, 1.0)
        samples.append(RgbdSample(image=image, depth=depth, id=f"toy{i:04d}"))
    return samples


def write_toy_sources(out_dir, n: int, size: int = 64, seed: int = 0,
                      depth_range=(0.5, 2.5)) -> Path:
    """Write toy sources in the RGBD input layout consumed by `synth`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = make_toy_rgbd(n, size=size, seed=seed, depth_range=depth_range)
    lo, hi = depth_range
    for s in samples:
        Image.fromarray(_to_u8(s.image)).save(out_dir / f"{s.id}.png")
        Image.fromarray(_depth_to_u16(s.depth, lo, hi)).save(
            out_dir / f"{s.id}.depth.png"
        )
    (out_dir / "depth_meta.json").write_text(
        json.dumps({"depth_min": lo, "depth_max": hi})
    )
    return out_dir
