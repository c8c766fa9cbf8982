"""Atmospheric scattering model and synthetic hazy/clear dataset generation.

Haze formation follows I = J*t + A*(1-t) with transmission t = exp(-d*beta),
where J is the clear scene, d the metric depth map, A the global atmospheric
light and beta the scattering coefficient. One (A, beta) pair is drawn per
synthesized sample; beta is a per-image scalar shared across RGB channels.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError

log = logging.getLogger(__name__)

DEFAULT_A_RANGE = (0.5, 1.0)
DEFAULT_BETA_RANGE = (0.4, 1.6)


@dataclass(frozen=True)
class HazeParams:
    """Per-sample haze parameters: atmospheric light A and scattering beta."""

    atmospheric_light: float
    beta: float

    def __post_init__(self):
        a, b = self.atmospheric_light, self.beta
        if not (np.isfinite(a) and 0.0 < a <= 1.0):
            raise ValidationError(f"atmospheric_light must be in (0, 1], got {a}")
        if not (np.isfinite(b) and b >= 0.0):
            raise ValidationError(f"beta must be finite and >= 0, got {b}")


@dataclass(frozen=True)
class RgbdSample:
    """A clear RGB image with its aligned metric depth map."""

    image: np.ndarray  # H x W x 3, values in [0, 1]
    depth: np.ndarray  # H x W, meters, strictly positive
    id: str

    def __post_init__(self):
        img, d = self.image, self.depth
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValidationError(f"image must be HxWx3, got shape {img.shape}")
        if d.shape != img.shape[:2]:
            raise ValidationError(
                f"depth shape {d.shape} does not match image {img.shape[:2]}"
            )
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValidationError("image values must lie in [0, 1]")
        bad = int(np.count_nonzero(~(np.isfinite(d) & (d > 0))))
        if bad:
            raise ValidationError(f"depth has {bad} non-finite or non-positive pixels")


@dataclass(frozen=True)
class HazePair:
    hazy: np.ndarray
    clear: np.ndarray
    params: HazeParams
    depth: np.ndarray
    source_id: str
    clipped_pixels: int = 0


def transmission_from_depth(
    depth: np.ndarray, beta: float, allow_zero_depth: bool = False
) -> np.ndarray:
    """Transmission map t = exp(-depth * beta), element-wise, values in (0, 1]."""
    depth = np.asarray(depth, dtype=np.float64)
    if not np.isfinite(beta) or beta < 0:
        raise ValidationError(f"beta must be finite and >= 0, got {beta}")
    lower_ok = (depth >= 0) if allow_zero_depth else (depth > 0)
    bad = int(np.count_nonzero(~(np.isfinite(depth) & lower_ok)))
    if bad:
        raise ValidationError(
            f"depth has {bad} non-finite or non-positive pixels "
            "(pass allow_zero_depth=True to permit zeros)"
        )
    return np.exp(-depth * beta)


def apply_scattering(clear: np.ndarray, t: np.ndarray, atmospheric_light: float):
    """Synthesize a hazy image via I = clear*t + A*(1-t), clipped to [0, 1].

    Returns (hazy, clipped_pixel_count); the count is also logged at DEBUG.
    """
    clear = np.asarray(clear, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    a = float(atmospheric_light)
    if not (0.0 < a <= 1.0):
        raise ValidationError(f"atmospheric_light must be in (0, 1], got {a}")
    if clear.shape[:2] != t.shape:
        raise ValidationError(
            f"clear shape {clear.shape[:2]} does not match transmission {t.shape}"
        )
    tt = t[..., None] if clear.ndim == 3 else t
    hazy = clear * tt + a * (1.0 - tt)
    clipped = int(np.count_nonzero((hazy < 0.0) | (hazy > 1.0)))
    if clipped:
        log.debug("apply_scattering clipped %d values", clipped)
    return np.clip(hazy, 0.0, 1.0), clipped


def invert_scattering(
    hazy: np.ndarray, t: np.ndarray, atmospheric_light: float, t_min: float = 0.05
) -> np.ndarray:
    """Analytic dehazing: J = (I - A*(1 - t^)) / t^ with t^ = max(t, t_min).

    Used as the test-time oracle; exact inverse of apply_scattering wherever
    t >= t_min and no clipping occurred.
    """
    hazy = np.asarray(hazy, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if hazy.shape[:2] != t.shape:
        raise ValidationError(
            f"hazy shape {hazy.shape[:2]} does not match transmission {t.shape}"
        )
    t_hat = np.maximum(t, t_min) if t_min > 0 else t
    tt = t_hat[..., None] if hazy.ndim == 3 else t_hat
    clear = (hazy - atmospheric_light * (1.0 - tt)) / tt
    return np.clip(clear, 0.0, 1.0)


def synthesize_dataset(
    sources: list[RgbdSample],
    samples_per_image: int,
    a_range: tuple[float, float] = DEFAULT_A_RANGE,
    beta_range: tuple[float, float] = DEFAULT_BETA_RANGE,
    seed: int = 0,
) -> tuple[list[HazePair], list[dict]]:
    """Draw (A, beta) i.i.d. uniform per sample and synthesize hazy images.

    All parameters are drawn in a fixed order from the seeded generator
    before any image work, so the per-sample assignment is stable even if
    the rendering itself is later parallelized. Returns (pairs, manifest);
    the manifest has one record per pair with source_id, A and beta.
    """
    if not sources:
        raise ValidationError("source list is empty")
    if samples_per_image < 1:
        raise ValidationError("samples_per_image must be >= 1")
    for lo, hi, name in (*a_range, "A"), (*beta_range, "beta"):
        if not (0 < lo <= hi):
            raise ValidationError(f"{name} range must satisfy 0 < lo <= hi")

    rng = np.random.default_rng(seed)
    draws = []
    for src in sources:
        for k in range(samples_per_image):
            a = float(rng.uniform(*a_range))
            beta = float(rng.uniform(*beta_range))
            draws.append((src, k, HazeParams(a, beta)))

    pairs, manifest = [], []
    for src, k, params in draws:
        t = transmission_from_depth(src.depth, params.beta)
        hazy, clipped = apply_scattering(src.image, t, params.atmospheric_light)
        pairs.append(
            HazePair(hazy, src.image, params, src.depth, src.id, clipped_pixels=clipped)
        )
        manifest.append(
            {
                "source_id": src.id,
                "sample_index": k,
                "A": params.atmospheric_light,
                "beta": params.beta,
                "clipped_pixels": clipped,
            }
        )
    return pairs, manifest


# ---------------------------------------------------------------------------
# disk I/O
#
# Source layout: <id>.png (8-bit RGB) + <id>.depth.png (16-bit grayscale) +
# depth_meta.json with {"depth_min": meters, "depth_max": meters} mapping the
# 16-bit range to meters.
# Output layout: hazy/, clear/, depth/ directories + manifest.json.
# ---------------------------------------------------------------------------


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _from_u8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0


def _depth_to_u16(depth, dmin, dmax):
    scaled = (depth - dmin) / (dmax - dmin)
    return np.clip(np.rint(scaled * 65535.0), 0, 65535).astype(np.uint16)


def _depth_from_u16(arr, dmin, dmax):
    return arr.astype(np.float64) / 65535.0 * (dmax - dmin) + dmin


def load_rgbd_dir(src_dir) -> list[RgbdSample]:
    src_dir = Path(src_dir)
    meta_path = src_dir / "depth_meta.json"
    if not meta_path.exists():
        raise ValidationError(
            f"missing {meta_path}: expected depth_meta.json with depth_min/depth_max"
        )
    meta = json.loads(meta_path.read_text())
    dmin, dmax = float(meta["depth_min"]), float(meta["depth_max"])
    samples = []
    for img_path in sorted(src_dir.glob("*.png")):
        if img_path.name.endswith(".depth.png"):
            continue
        sid = img_path.stem
        depth_path = src_dir / f"{sid}.depth.png"
        if not depth_path.exists():
            raise ValidationError(f"missing depth map for source '{sid}': {depth_path}")
        image = _from_u8(np.asarray(Image.open(img_path).convert("RGB")))
        depth = _depth_from_u16(np.asarray(Image.open(depth_path)), dmin, dmax)
        samples.append(RgbdSample(image=image, depth=depth, id=sid))
    if not samples:
        raise ValidationError(f"no RGB/depth source pairs found under {src_dir}")
    return samples


def write_dataset(pairs, manifest, out_dir, depth_range=None) -> Path:
    """Write hazy/, clear/, depth/ images plus manifest.json; returns manifest path."""
    out_dir = Path(out_dir)
    if depth_range is None:
        dmin = min(float(p.depth.min()) for p in pairs)
        dmax = max(float(p.depth.max()) for p in pairs)
        if dmax <= dmin:
            dmax = dmin + 1.0
    else:
        dmin, dmax = depth_range
    for sub in ("hazy", "clear", "depth"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i, (pair, rec) in enumerate(zip(pairs, manifest)):
        name = f"{i:05d}_{pair.source_id}.png"
        Image.fromarray(_to_u8(pair.hazy)).save(out_dir / "hazy" / name)
        Image.fromarray(_to_u8(pair.clear)).save(out_dir / "clear" / name)
        Image.fromarray(_depth_to_u16(pair.depth, dmin, dmax)).save(
            out_dir / "depth" / name
        )
        records.append(
            dict(
                rec,
                hazy=f"hazy/{name}",
                clear=f"clear/{name}",
                depth=f"depth/{name}",
            )
        )
    doc = {
        "format_version": 1,
        "depth_min": dmin,
        "depth_max": dmax,
        "pairs": records,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(doc, sort_keys=True, indent=1))
    return manifest_path


def load_dataset(dataset_dir) -> tuple[list[HazePair], dict]:
    """Read a synthesized dataset back from disk (8-bit images, 16-bit depth)."""
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"missing manifest: {manifest_path}")
    doc = json.loads(manifest_path.read_text())
    dmin, dmax = doc["depth_min"], doc["depth_max"]
    pairs = []
    for rec in doc["pairs"]:
        hazy = _from_u8(np.asarray(Image.open(dataset_dir / rec["hazy"]).convert("RGB")))
        clear = _from_u8(
            np.asarray(Image.open(dataset_dir / rec["clear"]).convert("RGB"))
        )
        depth = _depth_from_u16(
            np.asarray(Image.open(dataset_dir / rec["depth"])), dmin, dmax
        )
        pairs.append(
            HazePair(
                hazy=hazy,
                clear=clear,
                params=HazeParams(rec["A"], rec["beta"]),
                depth=depth,
                source_id=rec["source_id"],
                clipped_pixels=rec.get("clipped_pixels", 0),
            )
        )
    return pairs, doc
