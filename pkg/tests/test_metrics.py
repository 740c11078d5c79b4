"""PSNR/SSIM scoring and dataset evaluation reports."""

import math

import numpy as np
import pytest

from conftest import synthetic_rgb
from mbmfn.blocks import ModelConfig, ParamStore, param_layout
from mbmfn.blocks import MBMFN
from mbmfn.data import ImagePlane, degrade, load_manifest, modulo_crop, quantize_u8, rgb_to_y
from mbmfn.metrics import PSNR_CAP, MetricReport, evaluate, psnr, sr_forward, ssim
from mbmfn.tensor import Tensor, upsample_bilinear


def psnr_reference(a: ImagePlane, b: ImagePlane) -> float:
    """PSNR from per-pixel scalar accumulation over quantized bytes."""
    qa = quantize_u8(a.data)
    qb = quantize_u8(b.data)
    total = 0.0
    for i in range(qa.shape[0]):
        for j in range(qa.shape[1]):
            d = float(qa[i, j]) - float(qb[i, j])
            total += d * d
    mse = total / qa.size
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def ssim_reference(a: ImagePlane, b: ImagePlane) -> float:
    """SSIM from the definition, one explicit window at a time."""
    qa = quantize_u8(a.data).astype(np.float64)
    qb = quantize_u8(b.data).astype(np.float64)
    x = np.arange(11, dtype=np.float64) - 5.0
    g1 = np.exp(-(x**2) / (2.0 * 1.5**2))
    g1 /= g1.sum()
    win = np.outer(g1, g1)
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    values = []
    for i in range(qa.shape[0] - 10):
        for j in range(qa.shape[1] - 10):
            wa = qa[i : i + 11, j : j + 11]
            wb = qb[i : i + 11, j : j + 11]
            mu_a = float((win * wa).sum())
            mu_b = float((win * wb).sum())
            var_a = float((win * wa * wa).sum()) - mu_a * mu_a
            var_b = float((win * wb * wb).sum()) - mu_b * mu_b
            cov = float((win * wa * wb).sum()) - mu_a * mu_b
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
            values.append(num / den)
    return float(np.mean(values))


def zero_model(scale: int) -> MBMFN:
    cfg = ModelConfig(scale=scale, num_blocks=1, trunk_channels=8, distill_channels=6)
    store = ParamStore()
    for name, shape, _ in param_layout(cfg):
        store.add(name, Tensor(np.zeros(shape, dtype=np.float32)))
    return MBMFN(cfg, store)


def luma(h, w, seed):
    return rgb_to_y(ImagePlane(synthetic_rgb(h, w, seed=seed), "rgb"))


class TestPsnr:
    def test_identical_images_are_infinite(self):
        img = luma(16, 16, 0)
        assert psnr(img, img) == math.inf

    def test_uniform_single_level_difference(self):
        a = ImagePlane(np.zeros((8, 8)), "y")
        b = ImagePlane(np.full((8, 8), 1.0 / 255.0), "y")
        want = 10.0 * math.log10(255.0**2)
        assert psnr(a, b) == pytest.approx(want, abs=1e-12)
        assert psnr(a, b) == pytest.approx(48.130803608679, abs=1e-9)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a = ImagePlane(rng.random((13, 9)), "y")
            b = ImagePlane(rng.random((13, 9)), "y")
            assert psnr(a, b) == pytest.approx(psnr_reference(a, b), abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = ImagePlane(rng.random((12, 12)), "y")
        b = ImagePlane(rng.random((12, 12)), "y")
        assert psnr(a, b) == psnr(b, a)

    def test_decreases_with_noise_amplitude(self):
        rng = np.random.default_rng(3)
        base = luma(24, 24, 4)
        noise = rng.standard_normal(base.data.shape)
        scores = []
        for amp in (0.01, 0.03, 0.09):
            noisy = ImagePlane(base.data + amp * noise, "y")
            scores.append(psnr(base, noisy))
        assert scores[0] > scores[1] > scores[2]

    def test_shave_ignores_border(self):
        base = luma(20, 20, 5)
        corrupted = base.data.copy()
        corrupted[0, :] = 0.0
        corrupted[:, -1] = 1.0
        assert psnr(base, ImagePlane(corrupted, "y"), shave=4) == math.inf
        assert psnr(base, ImagePlane(corrupted, "y"), shave=0) < 40.0

    def test_shave_larger_than_image_rejected(self):
        img = luma(8, 8, 6)
        with pytest.raises(ValueError):
            psnr(img, img, shave=4)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            psnr(luma(8, 8, 7), luma(8, 9, 7))


class TestSsim:
    def test_identical_images_score_exactly_one(self):
        img = luma(24, 20, 8)
        assert ssim(img, img) == 1.0

    def test_contrast_inversion_scores_low(self):
        base = luma(32, 32, 9)
        inverted = ImagePlane(1.0 - base.data, "y")
        assert ssim(base, inverted) < 0.5

    def test_matches_windowed_reference(self):
        rng = np.random.default_rng(10)
        for trial in range(6):
            a = ImagePlane(rng.random((16, 14)), "y")
            b = ImagePlane(np.clip(a.data + 0.1 * rng.standard_normal(a.data.shape), 0, 1), "y")
            assert ssim(a, b) == pytest.approx(ssim_reference(a, b), abs=1e-6), trial

    def test_symmetry(self):
        rng = np.random.default_rng(11)
        a = ImagePlane(rng.random((14, 14)), "y")
        b = ImagePlane(rng.random((14, 14)), "y")
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small_after_shave_rejected(self):
        img = luma(14, 14, 12)
        with pytest.raises(ValueError):
            ssim(img, img, shave=2)


class TestReport:
    def _report(self):
        rep = MetricReport(dataset="set", scale=4, model_id="m", shave=4)
        rep.rows = [("a", 30.0, 0.9), ("b", 40.0, 0.8), ("c", math.inf, 1.0)]
        return rep

    def test_averages_recompute(self):
        rep = self._report()
        assert rep.psnr_avg == math.inf
        assert rep.ssim_avg == pytest.approx((0.9 + 0.8 + 1.0) / 3.0, abs=1e-9)
        finite = MetricReport(dataset="set", scale=4, model_id="m", shave=4)
        finite.rows = self._report().rows[:2]
        assert finite.psnr_avg == pytest.approx(35.0, abs=1e-9)

    def test_csv_caps_infinities(self):
        text = self._report().to_csv()
        lines = text.strip().split("\n")
        assert lines[0] == "image,psnr_db,ssim"
        assert lines[3] == f"c,{PSNR_CAP!r},{1.0!r}"
        assert lines[4].startswith("AVG,")
        assert len(lines) == 5

    def test_table_lists_skips(self):
        rep = self._report()
        rep.skipped.append("broken (bad png)")
        text = rep.to_table()
        assert "skipped: broken" in text
        assert "AVG" in text


class TestEvaluate:
    def test_bicubic_on_constant_images_hits_sentinels(self, image_dir):
        manifest = load_manifest(image_dir / "const.txt")
        rep = evaluate("bicubic", manifest, scale=4, dataset="const")
        assert len(rep.rows) == 1
        name, p, s = rep.rows[0]
        assert name == "const"
        assert p == math.inf and s == 1.0
        assert "100.0" in rep.to_csv()

    def test_zero_model_equals_bilinear_baseline(self, image_dir):
        manifest = load_manifest(image_dir / "eval.txt")
        model = zero_model(2)
        rep = evaluate(model, manifest, scale=2, dataset="eval")
        assert len(rep.rows) == 2
        for index in range(2):
            hr = modulo_crop(manifest.hr_y(index), 2)
            lr = degrade(hr, 2)
            up = upsample_bilinear(Tensor(lr.data[None, None]), 2)
            baseline = ImagePlane(up.data[0, 0], "y")
            up_arr = up.data[0, 0]
            assert np.array_equal(
                sr_forward(model, lr).data, ImagePlane(up_arr, "y").data
            )
            name, p, s = rep.rows[index]
            assert p == psnr(baseline, hr, shave=2)
            # identical pixels, but BLAS rounding can differ by one ulp
            # between separately allocated buffers
            assert s == pytest.approx(ssim(baseline, hr, shave=2), abs=1e-12)

    def test_model_beats_nothing_but_runs(self, image_dir):
        manifest = load_manifest(image_dir / "eval.txt")
        model = MBMFN.create(
            ModelConfig(scale=4, num_blocks=1, trunk_channels=8, distill_channels=6),
            seed=0,
        )
        rep = evaluate(model, manifest, scale=4)
        assert len(rep.rows) == 2
        assert all(np.isfinite(r[1]) for r in rep.rows)

    def test_default_shave_equals_scale(self, image_dir):
        manifest = load_manifest(image_dir / "const.txt")
        rep = evaluate("bicubic", manifest, scale=3)
        assert rep.shave == 3

    def test_scale_mismatch_rejected(self, image_dir):
        manifest = load_manifest(image_dir / "const.txt")
        with pytest.raises(ValueError, match="x2"):
            evaluate(zero_model(2), manifest, scale=4)

    def test_unknown_baseline_rejected(self, image_dir):
        manifest = load_manifest(image_dir / "const.txt")
        with pytest.raises(ValueError, match="baseline"):
            evaluate("lanczos", manifest, scale=2)

    def test_undecodable_entries_skip_to_footer(self, image_dir, tmp_path):
        junk = tmp_path / "junk.png"
        junk.write_bytes(b"not a png at all")
        mpath = tmp_path / "mix.txt"
        mpath.write_text(f"{image_dir / 'const.png'}\n{junk}\n")
        manifest = load_manifest(mpath)
        rep = evaluate("bicubic", manifest, scale=2)
        assert len(rep.rows) == 1
        assert len(rep.skipped) == 1 and "junk" in rep.skipped[0]

    def test_sr_forward_clips_to_unit_range(self):
        model = zero_model(2)
        lr = ImagePlane(np.random.default_rng(13).random((12, 12)), "y")
        out = sr_forward(model, lr)
        assert out.space == "y"
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0
