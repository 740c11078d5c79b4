"""Shared fixtures: synthetic test images and manifest files."""

from __future__ import annotations

import numpy as np
import pytest

from mbmfn.data import ImagePlane, bicubic_resize, save_image


def synthetic_rgb(h: int, w: int, seed: int = 0) -> np.ndarray:
    """A band-limited "natural" RGB image: smooth noise, stripes, edges.

    Content is concentrated at wavelengths a x4 degrade keeps some trace
    of, with hard level-set edges so interpolation baselines leave room
    for a trained model to improve on.
    """
    rng = np.random.default_rng(seed)
    low = rng.random((max(h // 8, 2), max(w // 8, 2), 3)).astype(np.float32)
    smooth = bicubic_resize(ImagePlane(low, "rgb"), h, w).data.astype(np.float64)
    mid = rng.random((max(h // 3, 2), max(w // 3, 2), 3)).astype(np.float32)
    detail = bicubic_resize(ImagePlane(mid, "rgb"), h, w).data.astype(np.float64)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx / 12.0 + yy / 29.0))
    edges = np.floor(smooth * 4.0) / 4.0  # posterized levels: sharp boundaries
    img = 0.35 * smooth + 0.25 * detail + 0.15 * stripes[:, :, None] + 0.25 * edges
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    """Directory of PNGs plus manifests: train.txt, eval.txt, const.txt."""
    root = tmp_path_factory.mktemp("images")
    save_image(ImagePlane(synthetic_rgb(128, 128, seed=3), "rgb"), root / "train_a.png")
    save_image(ImagePlane(synthetic_rgb(96, 96, seed=4), "rgb"), root / "train_b.png")
    save_image(ImagePlane(synthetic_rgb(100, 88, seed=5), "rgb"), root / "eval_a.png")
    save_image(ImagePlane(synthetic_rgb(72, 96, seed=6), "rgb"), root / "eval_b.png")
    save_image(
        ImagePlane(np.full((64, 64, 3), 0.5, dtype=np.float32), "rgb"),
        root / "const.png",
    )
    (root / "train.txt").write_text("train_a.png\ntrain_b.png\n")
    (root / "single.txt").write_text("train_a.png\n")
    (root / "overfit.txt").write_text("train_b.png\n")
    (root / "eval.txt").write_text("eval_a.png\neval_b.png\n")
    (root / "const.txt").write_text("const.png\n")
    return root
