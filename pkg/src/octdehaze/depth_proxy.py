"""Scene depth estimators behind a single interface.

Three backends:
  * ``stub``        — inverted channel-mean luminance; deterministic, closed form.
  * ``proxy``       — small conv regressor fitted on synthetic RGBD pairs,
                      frozen after fitting; the desk-scale substitute for a
                      pretrained monocular depth network.
  * ``pretrained``  — a user-supplied TorchScript monocular depth model.

All backends take [0,1]-range NCHW images and return a finite depth map,
either at input resolution (stub) or at a fixed quarter resolution (proxy).
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DepthBackendError, ValidationError

BACKENDS = ("pretrained", "proxy", "stub")


class StubDepth(nn.Module):
    """Pseudo-depth: 1 - mean over channels (darker pixels read as farther)."""

    backend = "stub"
    output_scale = 1  # output resolution == input resolution

    def forward(self, x):
        return 1.0 - x.mean(dim=1, keepdim=True)


class ProxyDepth(nn.Module):
    """4-layer conv regressor emitting depth at quarter resolution."""

    backend = "proxy"
    output_scale = 4

    def __init__(self, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width // 2, 3, 2, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width // 2, width, 3, 2, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, 1, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, 3, 1, 1),
            nn.Softplus(),  # depth is positive
        )

    def forward(self, x):
        return self.net(x)


class PretrainedDepth(nn.Module):
    backend = "pretrained"
    output_scale = 1

    def __init__(self, weights_path):
        super().__init__()
        try:
            self.model = torch.jit.load(str(weights_path))
        except Exception as exc:
            raise DepthBackendError(
                f"could not load pretrained depth weights from '{weights_path}' "
                f"({exc}); available backends: {list(BACKENDS)}"
            ) from exc
        self.model.eval()

    def forward(self, x):
        return self.model(x)


def estimate_depth(estimator: nn.Module, image: torch.Tensor) -> torch.Tensor:
    """Run a backend on a [0,1]-range NCHW batch and validate the output."""
    if image.dim() != 4 or image.shape[1] != 3:
        raise ValidationError(f"expected NCHW RGB batch, got shape {tuple(image.shape)}")
    out = estimator(image)
    if not torch.isfinite(out).all():
        raise DepthBackendError(f"{estimator.backend} backend produced non-finite depth")
    return out


def _images_to_batch(samples, dtype=torch.float32):
    imgs = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1))) for s in samples]
    ).to(dtype)
    depths = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.depth))[None] for s in samples]
    ).to(dtype)
    return imgs, depths


def fit_proxy(
    rgbd_samples,
    epochs: int = 40,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 8,
    width: int = 32,
):
    """Fit the proxy regressor on (clear image -> ground-truth depth) pairs.

    Returns (frozen ProxyDepth, per-epoch training losses). Deterministic
    given the seed; the model is put in eval mode with gradients disabled on
    return so it stays frozen during dehazing training.
    """
    if len(rgbd_samples) < 2:
        raise ValidationError(
            f"need at least 2 RGBD samples to fit the proxy, got {len(rgbd_samples)}"
        )
    torch.manual_seed(seed)
    model = ProxyDepth(width=width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    images, depths = _images_to_batch(rgbd_samples)
    targets = F.avg_pool2d(depths, model.output_scale)
    rng = np.random.default_rng(seed)
    n = len(rgbd_samples)
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            pred = model(images[idx])
            loss = F.mse_loss(pred, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
        history.append(epoch_loss / n)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, history


def depth_error(estimator: nn.Module, images: torch.Tensor, true_depth: torch.Tensor):
    """Mean absolute error of the backend against ground truth, at the
    backend's native output resolution."""
    with torch.no_grad():
        pred = estimate_depth(estimator, images)
        target = F.avg_pool2d(true_depth, estimator.output_scale) \
            if estimator.output_scale > 1 else true_depth
        return float((pred - target).abs().mean())


def get_backend(name: str, weights_path=None, proxy_model: nn.Module | None = None):
    if name == "stub":
        return StubDepth()
    if name == "proxy":
        if proxy_model is not None:
            return proxy_model
        raise DepthBackendError(
            "proxy backend requires a fitted model (run fit-depth-proxy first); "
            f"available backends: {list(BACKENDS)}"
        )
    if name == "pretrained":
        if weights_path is None:
            raise DepthBackendError(
                "pretrained backend requires a weights path; "
                f"available backends: {list(BACKENDS)}"
            )
        return PretrainedDepth(weights_path)
    raise DepthBackendError(f"unknown depth backend '{name}'; available: {list(BACKENDS)}")
