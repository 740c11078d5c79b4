"""Y-channel PSNR/SSIM evaluation against bicubically degraded inputs.

Both metrics quantize their inputs to 8-bit first (the usual benchmark
convention) and shave a border of `scale` pixels before comparing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .blocks import MBMFN
from .data import (
    DatasetManifest,
    ImagePlane,
    bicubic_resize,
    degrade,
    load_image,
    modulo_crop,
    quantize_u8,
    rgb_to_y,
)
from .tensor import Tensor

__all__ = ["psnr", "ssim", "MetricReport", "evaluate", "sr_forward"]

# Capped stand-in for infinite PSNR in reports.
PSNR_CAP = 100.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_L = 255.0


def _shave(a: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return a
    if a.shape[0] <= 2 * border or a.shape[1] <= 2 * border:
        raise ValueError(
            f"image {a.shape[0]}x{a.shape[1]} too small to shave {border} pixels"
        )
    return a[border:-border, border:-border]


def psnr(a: ImagePlane, b: ImagePlane, shave: int = 0) -> float:
    """Peak signal-to-noise ratio in dB over quantized 8-bit values.

    Identical images give math.inf.
    """
    if a.data.shape != b.data.shape:
        raise ValueError(f"psnr shapes differ: {a.data.shape} vs {b.data.shape}")
    qa = _shave(quantize_u8(a.data), shave).astype(np.float64)
    qb = _shave(quantize_u8(b.data), shave).astype(np.float64)
    mse = np.mean((qa - qb) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation, valid region only."""
    k = kernel.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ kernel
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ kernel


def ssim(a: ImagePlane, b: ImagePlane, shave: int = 0) -> float:
    """Mean structural similarity with the standard 11x11 sigma=1.5 window.

    Computed on quantized 8-bit values with L=255, K1=0.01, K2=0.03,
    averaging over valid (fully overlapping) windows only.
    """
    if a.data.shape != b.data.shape:
        raise ValueError(f"ssim shapes differ: {a.data.shape} vs {b.data.shape}")
    qa = _shave(quantize_u8(a.data), shave).astype(np.float64)
    qb = _shave(quantize_u8(b.data), shave).astype(np.float64)
    if qa.shape[0] < _SSIM_WINDOW or qa.shape[1] < _SSIM_WINDOW:
        raise ValueError(
            f"ssim needs at least {_SSIM_WINDOW}x{_SSIM_WINDOW} pixels after "
            f"shaving, got {qa.shape[0]}x{qa.shape[1]}"
        )
    g = _gaussian_1d(_SSIM_WINDOW, _SSIM_SIGMA)
    mu_a = _filter_valid(qa, g)
    mu_b = _filter_valid(qb, g)
    var_a = _filter_valid(qa * qa, g) - mu_a * mu_a
    var_b = _filter_valid(qb * qb, g) - mu_b * mu_b
    cov = _filter_valid(qa * qb, g) - mu_a * mu_b
    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# dataset evaluation


def sr_forward(model: MBMFN, lr: ImagePlane) -> ImagePlane:
    """Run one luma plane through the network, clamped back to [0, 1]."""
    x = Tensor(lr.data[None, None, :, :])
    out = model.forward(x)
    return ImagePlane(np.clip(out.data[0, 0], 0.0, 1.0), "y")


@dataclass
class MetricReport:
    """Per-image and average scores for one dataset/scale/model triple."""

    dataset: str
    scale: int
    model_id: str
    shave: int
    rows: list = field(default_factory=list)  # (name, psnr_db, ssim)
    skipped: list = field(default_factory=list)

    @property
    def psnr_avg(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else math.nan

    @property
    def ssim_avg(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else math.nan

    def to_csv(self) -> str:
        lines = ["image,psnr_db,ssim"]
        for name, p, s in self.rows:
            lines.append(f"{name},{min(p, PSNR_CAP)!r},{s!r}")
        lines.append(f"AVG,{min(self.psnr_avg, PSNR_CAP)!r},{self.ssim_avg!r}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        width = max([len("image")] + [len(r[0]) for r in self.rows])
        head = (
            f"dataset={self.dataset} scale=x{self.scale} "
            f"model={self.model_id} shave={self.shave}"
        )
        lines = [head, f"{'image':<{width}}  {'psnr_db':>9}  {'ssim':>7}"]
        for name, p, s in self.rows:
            lines.append(f"{name:<{width}}  {min(p, PSNR_CAP):>9.4f}  {s:>7.4f}")
        lines.append(
            f"{'AVG':<{width}}  {min(self.psnr_avg, PSNR_CAP):>9.4f}  "
            f"{self.ssim_avg:>7.4f}"
        )
        for name in self.skipped:
            lines.append(f"skipped: {name}")
        return "\n".join(lines) + "\n"


def evaluate(
    model,
    manifest: DatasetManifest,
    scale: int,
    shave: Optional[int] = None,
    dataset: str = "dataset",
) -> MetricReport:
    """Score a model (or the "bicubic" baseline) over a manifest.

    Each HR image converts to luma, is modulo-cropped, degraded to LR,
    upscaled by the model, and scored on PSNR/SSIM with `shave` border
    pixels (default: the scale factor) removed.  Undecodable entries are
    skipped and listed in the report footer.
    """
    if shave is None:
        shave = scale
    model_id = model if isinstance(model, str) else "mbmfn"
    if isinstance(model, MBMFN) and model.config.scale != scale:
        raise ValueError(
            f"model was built for x{model.config.scale}, asked to eval at x{scale}"
        )
    report = MetricReport(dataset=dataset, scale=scale, model_id=model_id, shave=shave)
    for index, entry in enumerate(manifest.entries):
        try:
            hr = modulo_crop(rgb_to_y(load_image(entry.hr_path)), scale)
        except (OSError, ValueError) as exc:
            report.skipped.append(f"{entry.name} ({exc})")
            continue
        lr = manifest.lr_y(index)
        lr = degrade(hr, scale) if lr is None else lr
        if isinstance(model, str):
            if model != "bicubic":
                raise ValueError(f"unknown baseline {model!r}")
            sr = bicubic_resize(lr, hr.h, hr.w)
        else:
            sr = sr_forward(model, lr)
        report.rows.append((entry.name, psnr(sr, hr, shave), ssim(sr, hr, shave)))
    return report
