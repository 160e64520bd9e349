"""
Image quality and performance metrics: PSNR, SSIM, render FPS.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List

import torch
import torch.nn.functional as F

from .scene_model import DTYPE

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0


def psnr(image: torch.Tensor, target: torch.Tensor) -> float:
    """PSNR in dB for images in [0, 1], capped at 99 dB for identical images."""
    mse = float(((image - target) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=DTYPE) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(image: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """
    Mean SSIM of two H x W x C images (Gaussian window 11, sigma 1.5,
    zero padding as in 3DGS). Differentiable.
    """
    channels = image.shape[-1]
    x = image.permute(2, 0, 1).unsqueeze(0)
    y = target.to(image.dtype).permute(2, 0, 1).unsqueeze(0)
    window = _gaussian_window().to(image.dtype).expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW)
    pad = SSIM_WINDOW // 2

    mu_x = F.conv2d(x, window, padding=pad, groups=channels)
    mu_y = F.conv2d(y, window, padding=pad, groups=channels)
    sigma_x = F.conv2d(x * x, window, padding=pad, groups=channels) - mu_x * mu_x
    sigma_y = F.conv2d(y * y, window, padding=pad, groups=channels) - mu_y * mu_y
    sigma_xy = F.conv2d(x * y, window, padding=pad, groups=channels) - mu_x * mu_y

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / \
        ((mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2))
    return ssim_map.mean()


def measure_fps(render_fn: Callable[[], Any], repeats: int = 100, warmup: int = 10) -> float:
    for _ in range(warmup):
        render_fn()
    start = time.perf_counter()
    for _ in range(repeats):
        render_fn()
    elapsed = time.perf_counter() - start
    return repeats / elapsed if elapsed > 0 else math.inf


@dataclass
class ViewMetrics:
    view: int
    timestamp: float
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    views: List[ViewMetrics] = field(default_factory=list)
    gaussian_count: int = 0
    storage: Dict[str, int] = field(default_factory=dict)
    fps: float = 0.0
    image_size: List[int] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return sum(v.psnr for v in self.views) / len(self.views) if self.views else 0.0

    @property
    def mean_ssim(self) -> float:
        return sum(v.ssim for v in self.views) / len(self.views) if self.views else 0.0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['mean_psnr'] = self.mean_psnr
        data['mean_ssim'] = self.mean_ssim
        return data


def evaluate_views(render_fn: Callable[[Any], torch.Tensor], frames) -> List[ViewMetrics]:
    """Render every frame with ``render_fn(frame)`` and score it."""
    results = []
    with torch.no_grad():
        for i, frame in enumerate(frames):
            image = render_fn(frame)
            results.append(ViewMetrics(view=i, timestamp=frame.timestamp,
                                       psnr=psnr(image, frame.image),
                                       ssim=float(ssim(image, frame.image))))
    return results
