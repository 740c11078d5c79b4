"""Image IO, colour conversion, bicubic degradation and patch sampling.

Images travel through the pipeline as :class:`ImagePlane` values: float32
arrays in [0, 1], either a single luma plane (h, w) or RGB (h, w, 3).
Degradation is bicubic downscaling with the antialiasing kernel stretch,
matching the usual "BI" protocol for super-resolution training data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

__all__ = [
    "ImagePlane",
    "load_image",
    "save_image",
    "quantize_u8",
    "rgb_to_y",
    "y_to_visual",
    "rgb_to_ycbcr",
    "ycbcr_to_rgb",
    "cubic_weight",
    "bicubic_resize",
    "degrade",
    "modulo_crop",
    "ManifestEntry",
    "DatasetManifest",
    "load_manifest",
    "PatchPair",
    "sample_patch_pair",
]

log = logging.getLogger(__name__)

# ITU-R BT.601 studio-swing analog->digital matrix (for values in [0, 1],
# producing Y in [16, 235] and Cb/Cr in [16, 240] before the /255).
_RGB_TO_YCBCR = np.array(
    [
        [65.481, 128.553, 24.966],
        [-37.797, -74.203, 112.0],
        [112.0, -93.786, -18.214],
    ],
    dtype=np.float64,
)
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0], dtype=np.float64)
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)


@dataclass
class ImagePlane:
    """A float32 image in [0, 1]: (h, w) luma or (h, w, 3) RGB."""

    data: np.ndarray
    space: str  # "y" or "rgb"

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if self.space == "y":
            if arr.ndim != 2:
                raise ValueError(f"luma plane must be (h, w), got {arr.shape}")
        elif self.space == "rgb":
            if arr.ndim != 3 or arr.shape[2] != 3:
                raise ValueError(f"rgb plane must be (h, w, 3), got {arr.shape}")
        else:
            raise ValueError(f"space must be 'y' or 'rgb', got {self.space!r}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must be at least 1x1, got {arr.shape}")
        self.data = np.clip(arr, 0.0, 1.0)

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.space == "y" else 3


def load_image(path) -> ImagePlane:
    """Decode a PNG (or other 8-bit image) into an RGB plane."""
    with Image.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
            raise ValueError(f"{path}: unsupported high-depth mode {im.mode!r}")
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImagePlane(arr.astype(np.float32) / 255.0, "rgb")


def quantize_u8(data: np.ndarray) -> np.ndarray:
    """Map [0, 1] reals to bytes with round-half-up: floor(v*255 + 0.5)."""
    return np.clip(np.floor(np.asarray(data, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(
        np.uint8
    )


def save_image(img: ImagePlane, path) -> None:
    """Write an 8-bit PNG; luma planes save as grayscale."""
    q = quantize_u8(img.data)
    mode = "L" if img.space == "y" else "RGB"
    Image.fromarray(q, mode=mode).save(path)


def rgb_to_y(img: ImagePlane) -> ImagePlane:
    """BT.601 studio-swing luma: Y255 = 16 + 65.481 R + 128.553 G + 24.966 B."""
    if img.space != "rgb":
        raise ValueError("rgb_to_y expects an rgb plane")
    rgb = img.data.astype(np.float64)
    y = (_YCBCR_OFFSET[0] + rgb @ _RGB_TO_YCBCR[0]) / 255.0
    return ImagePlane(y, "y")


def y_to_visual(img: ImagePlane) -> ImagePlane:
    """Map studio-swing luma back to a displayable gray RGB image."""
    if img.space != "y":
        raise ValueError("y_to_visual expects a luma plane")
    g = (img.data.astype(np.float64) * 255.0 - 16.0) / 219.0
    g = np.clip(g, 0.0, 1.0)
    return ImagePlane(np.repeat(g[:, :, None], 3, axis=2), "rgb")


def rgb_to_ycbcr(img: ImagePlane) -> tuple:
    """Full BT.601 split into (y, cb, cr) planes, each stored /255."""
    if img.space != "rgb":
        raise ValueError("rgb_to_ycbcr expects an rgb plane")
    rgb = img.data.astype(np.float64)
    ycc = (rgb @ _RGB_TO_YCBCR.T + _YCBCR_OFFSET) / 255.0
    return tuple(ImagePlane(ycc[:, :, i], "y") for i in range(3))


def ycbcr_to_rgb(y: ImagePlane, cb: ImagePlane, cr: ImagePlane) -> ImagePlane:
    """Invert :func:`rgb_to_ycbcr`; output clipped to [0, 1]."""
    ycc = np.stack([p.data.astype(np.float64) for p in (y, cb, cr)], axis=2)
    rgb = (ycc * 255.0 - _YCBCR_OFFSET) @ _YCBCR_TO_RGB.T
    return ImagePlane(np.clip(rgb, 0.0, 1.0), "rgb")


# ---------------------------------------------------------------------------
# bicubic resampling


def cubic_weight(x):
    """Keys cubic kernel with a = -0.5 (the classic bicubic weights)."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    inner = (1.5 * ax - 2.5) * ax * ax + 1.0
    outer = ((-0.5 * ax + 2.5) * ax - 4.0) * ax + 2.0
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _contributions(n_in: int, n_out: int) -> tuple:
    """Tap indices and normalised weights for one resize axis.

    Sample centers follow the half-pixel convention; when downscaling the
    kernel is stretched by the scale factor (antialiasing); indices clamp
    at the edges; each output row's weights are normalised to sum to 1.
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    taps = int(np.ceil(4.0 * stretch)) + 2
    left = np.floor(centers - 2.0 * stretch).astype(np.int64) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = cubic_weight((centers[:, None] - idx) / stretch)
    weights /= weights.sum(axis=1, keepdims=True)
    return np.clip(idx, 0, n_in - 1), weights


def _resize_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    idx, w = _contributions(arr.shape[axis], n_out)
    taps = np.take(arr, idx, axis=axis)  # axis dim becomes (n_out, taps)
    wshape = [1] * taps.ndim
    wshape[axis], wshape[axis + 1] = idx.shape
    return (taps * w.reshape(wshape)).sum(axis=axis + 1)


def bicubic_resize(img: ImagePlane, out_h: int, out_w: int) -> ImagePlane:
    """Separable bicubic resize to (out_h, out_w), clamped to [0, 1].

    Resizing to the identical size reproduces the input bit-exactly.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1x1, got {out_h}x{out_w}")
    arr = img.data.astype(np.float64)
    arr = _resize_axis(arr, out_h, axis=0)
    arr = _resize_axis(arr, out_w, axis=1)
    return ImagePlane(np.clip(arr, 0.0, 1.0), img.space)


def modulo_crop(img: ImagePlane, scale: int) -> ImagePlane:
    """Trim right/bottom so both dimensions divide by `scale`."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    h = img.h - img.h % scale
    w = img.w - img.w % scale
    if h < 1 or w < 1:
        raise ValueError(f"image {img.h}x{img.w} too small to crop modulo {scale}")
    return ImagePlane(img.data[:h, :w], img.space)


def degrade(hr: ImagePlane, scale: int) -> ImagePlane:
    """Bicubic downscale by an integer factor; dimensions must divide."""
    if scale not in (2, 3, 4):
        raise ValueError(f"scale must be 2, 3 or 4, got {scale}")
    if hr.h % scale or hr.w % scale:
        raise ValueError(
            f"image {hr.h}x{hr.w} not divisible by scale {scale}; modulo-crop first"
        )
    return bicubic_resize(hr, hr.h // scale, hr.w // scale)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class ManifestEntry:
    hr_path: Path
    lr_path: Optional[Path] = None

    @property
    def name(self) -> str:
        return self.hr_path.stem


@dataclass
class DatasetManifest:
    """Sorted list of training/eval images, with an optional LR column.

    Manifest files hold one HR path per line (relative paths resolve
    against the manifest's directory), optionally followed by a tab and a
    precomputed LR path.  Blank lines and '#' comments are skipped.
    """

    entries: list
    _y_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def hr_y(self, index: int) -> ImagePlane:
        """Decoded HR luma plane, cached per entry."""
        if index not in self._y_cache:
            self._y_cache[index] = rgb_to_y(load_image(self.entries[index].hr_path))
        return self._y_cache[index]

    def lr_y(self, index: int) -> Optional[ImagePlane]:
        entry = self.entries[index]
        if entry.lr_path is None:
            return None
        key = ("lr", index)
        if key not in self._y_cache:
            self._y_cache[key] = rgb_to_y(load_image(entry.lr_path))
        return self._y_cache[key]


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest file; entries sort by HR path for determinism."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) > 2:
            raise ValueError(f"{path}:{lineno}: expected 'hr[\\tlr]' columns, got {len(cols)}")
        hr = (base / cols[0]).resolve() if not Path(cols[0]).is_absolute() else Path(cols[0])
        lr = None
        if len(cols) == 2 and cols[1]:
            lr = (base / cols[1]).resolve() if not Path(cols[1]).is_absolute() else Path(cols[1])
        if not hr.exists():
            raise FileNotFoundError(f"{path}:{lineno}: missing image {hr}")
        if lr is not None and not lr.exists():
            raise FileNotFoundError(f"{path}:{lineno}: missing image {lr}")
        entries.append(ManifestEntry(hr, lr))
    if not entries:
        raise ValueError(f"{path}: manifest lists no images")
    entries.sort(key=lambda e: str(e.hr_path))
    return DatasetManifest(entries)


@dataclass(frozen=True)
class PatchPair:
    """An aligned (hr, lr) luma patch pair and where it came from."""

    hr: ImagePlane
    lr: ImagePlane
    source: str
    origin: tuple


def sample_patch_pair(
    manifest: DatasetManifest,
    scale: int,
    hr_patch: int,
    rng: np.random.Generator,
) -> PatchPair:
    """Draw one aligned HR/LR patch pair.

    The HR origin lands on a multiple of `scale` so the LR crop is exact.
    When the entry carries a precomputed LR image the patch is cut from
    it; otherwise the HR patch is degraded on the fly.  Images smaller
    than the patch are skipped with a warning and another draw is made.
    """
    if hr_patch % scale:
        raise ValueError(f"hr_patch {hr_patch} must be divisible by scale {scale}")
    for _ in range(100 * max(len(manifest), 1)):
        index = int(rng.integers(len(manifest)))
        entry = manifest.entries[index]
        hr_full = modulo_crop(manifest.hr_y(index), scale)
        if hr_full.h < hr_patch or hr_full.w < hr_patch:
            log.warning(
                "skipping %s: %dx%d smaller than patch %d",
                entry.hr_path, hr_full.h, hr_full.w, hr_patch,
            )
            continue
        max_oy = (hr_full.h - hr_patch) // scale
        max_ox = (hr_full.w - hr_patch) // scale
        oy = int(rng.integers(max_oy + 1)) * scale
        ox = int(rng.integers(max_ox + 1)) * scale
        hr = ImagePlane(hr_full.data[oy:oy + hr_patch, ox:ox + hr_patch], "y")
        lr_full = manifest.lr_y(index)
        p = hr_patch // scale
        if lr_full is not None:
            ly, lx = oy // scale, ox // scale
            lr = ImagePlane(lr_full.data[ly:ly + p, lx:lx + p], "y")
        else:
            lr = degrade(hr, scale)
        return PatchPair(hr, lr, str(entry.hr_path), (oy, ox))
    raise ValueError(f"no manifest image can supply a {hr_patch}x{hr_patch} patch")
