"""Config file round-trips and the command-line interface."""

import numpy as np
import pytest

from conftest import synthetic_rgb
from mbmfn.blocks import ModelConfig, count_params, init_params
from mbmfn.cli import _ablation_variants, main
from mbmfn.config import RunConfig, apply_overrides, format_config, parse_config
from mbmfn.data import ImagePlane, load_image, save_image
from mbmfn.training import save_checkpoint

TINY = ModelConfig(scale=2, num_blocks=1, trunk_channels=8, distill_channels=6)

TINY_OVERRIDES = [
    "model.scale=2",
    "model.num_blocks=1",
    "model.trunk_channels=8",
    "model.distill_channels=6",
    "train.epochs=1",
    "train.iters_per_epoch=2",
    "train.batch_size=2",
    "train.hr_patch=32",
]


def tiny_run_config(image_dir, out_dir) -> RunConfig:
    rc = apply_overrides(RunConfig(), TINY_OVERRIDES)
    return apply_overrides(
        rc,
        [
            f"data.train_manifest={image_dir / 'train.txt'}",
            f"data.checkpoint_dir={out_dir}",
        ],
    )


class TestConfigFormat:
    def test_defaults_round_trip(self):
        rc = RunConfig()
        assert parse_config(format_config(rc)) == rc

    def test_modified_values_round_trip(self):
        rc = apply_overrides(
            RunConfig(),
            [
                "model.scale=3",
                "model.attention_kind=CCA",
                "model.basic_branch=false",
                "train.lr0=0.001",
                "train.augment=true",
                "data.checkpoint_dir=/tmp/out",
            ],
        )
        again = parse_config(format_config(rc))
        assert again == rc
        assert again.model.scale == 3
        assert again.model.basic_branch is False
        assert again.train.augment is True

    def test_format_is_sectioned_key_value(self):
        text = format_config(RunConfig())
        assert "model.scale = 4" in text
        assert "train.lr0 = 0.0002" in text
        assert "data.checkpoint_dir = runs" in text

    def test_comments_and_blanks_ignored(self):
        text = "# a comment\n\nmodel.scale = 2\n  # indented comment\n"
        assert parse_config(text).model.scale == 2

    def test_unknown_key_named_in_error(self):
        with pytest.raises(ValueError, match="model.bogus"):
            parse_config("model.bogus = 1\n")

    def test_unknown_section_named_in_error(self):
        with pytest.raises(ValueError, match="optimizer"):
            parse_config("optimizer.lr = 1\n")

    def test_bad_value_reports_line_number(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_config("model.scale = 4\nmodel.num_blocks = six\n")

    def test_missing_equals_reports_line_number(self):
        with pytest.raises(ValueError, match="line 1"):
            parse_config("model.scale 4\n")

    @pytest.mark.parametrize(
        "text,value",
        [("true", True), ("1", True), ("yes", True), ("false", False), ("0", False)],
    )
    def test_bool_spellings(self, text, value):
        rc = parse_config(f"train.augment = {text}\n")
        assert rc.train.augment is value

    def test_invalid_bool_rejected(self):
        with pytest.raises(ValueError):
            parse_config("train.augment = maybe\n")

    def test_override_requires_key_value_shape(self):
        with pytest.raises(ValueError):
            apply_overrides(RunConfig(), ["model.scale"])

    def test_values_validated_on_build(self):
        with pytest.raises(ValueError):
            parse_config("model.scale = 7\n")


class TestParamsCommand:
    def test_total_matches_library_count(self, capsys):
        assert main(["params"]) == 0
        out = capsys.readouterr().out
        total = count_params(init_params(ModelConfig(), seed=0))
        assert out.strip().split("\n")[-1].split() == ["total", str(total)]

    def test_set_override_changes_count(self, capsys):
        assert main(["params", "--set", "model.num_blocks=1"]) == 0
        out = capsys.readouterr().out
        assert "block0" in out and "block1" not in out

    def test_bad_override_exits_nonzero(self, capsys):
        assert main(["params", "--set", "model.bogus=1"]) == 1
        assert "model.bogus" in capsys.readouterr().err


class TestTrainCommand:
    def test_missing_manifest_names_the_field(self, capsys):
        assert main(["train"]) == 1
        assert "data.train_manifest" in capsys.readouterr().err

    def test_tiny_training_run(self, image_dir, tmp_path, capsys):
        out_dir = tmp_path / "run"
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(format_config(tiny_run_config(image_dir, out_dir)))
        assert main(["train", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "parameters" in out and "final epoch mean L1" in out
        assert (out_dir / "loss.csv").exists()
        assert (out_dir / "last.ckpt").exists()
        saved = parse_config((out_dir / "config.cfg").read_text())
        assert saved == tiny_run_config(image_dir, out_dir)

    def test_epochs_flag_overrides_config(self, image_dir, tmp_path, capsys):
        out_dir = tmp_path / "run"
        cfg_path = tmp_path / "run.cfg"
        cfg_path.write_text(format_config(tiny_run_config(image_dir, out_dir)))
        assert main(["train", "--config", str(cfg_path), "--epochs", "2"]) == 0
        lines = (out_dir / "loss.csv").read_text().strip().split("\n")
        assert len(lines) == 1 + 2 * 2  # header + 2 epochs x 2 iters


class TestEvalCommand:
    def test_bicubic_baseline(self, image_dir, tmp_path, capsys):
        rdir = tmp_path / "reports"
        code = main(
            [
                "eval",
                "--manifest", str(image_dir / "eval.txt"),
                "--model", "bicubic",
                "--scale", "2",
                "--dataset", "evalset",
                "--report-dir", str(rdir),
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "AVG" in out and "evalset" in out
        csv_text = (rdir / "evalset_x2_bicubic.csv").read_text()
        assert csv_text.startswith("image,psnr_db,ssim\n")
        assert (rdir / "evalset_x2_bicubic.txt").exists()

    def test_requires_checkpoint_or_baseline(self, image_dir, capsys):
        assert main(["eval", "--manifest", str(image_dir / "eval.txt")]) == 1
        assert "--checkpoint" in capsys.readouterr().err

    def test_baseline_requires_scale(self, image_dir, capsys):
        code = main(
            ["eval", "--manifest", str(image_dir / "eval.txt"), "--model", "bicubic"]
        )
        assert code == 1
        assert "--scale" in capsys.readouterr().err

    def test_checkpoint_scale_mismatch(self, image_dir, tmp_path, capsys):
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, TINY, init_params(TINY, seed=0))
        code = main(
            [
                "eval",
                "--manifest", str(image_dir / "eval.txt"),
                "--checkpoint", str(ckpt),
                "--scale", "4",
            ]
        )
        assert code == 1
        assert "x2" in capsys.readouterr().err

    def test_checkpoint_eval_runs(self, image_dir, tmp_path, capsys):
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, TINY, init_params(TINY, seed=0))
        code = main(
            ["eval", "--manifest", str(image_dir / "eval.txt"), "--checkpoint", str(ckpt)]
        )
        assert code == 0
        assert "model=mbmfn" in capsys.readouterr().out


class TestInferCommand:
    def test_upscales_and_is_deterministic(self, tmp_path, capsys):
        ckpt = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, TINY, init_params(TINY, seed=1))
        src = tmp_path / "in.png"
        save_image(ImagePlane(synthetic_rgb(20, 16, seed=2), "rgb"), src)
        out1, out2 = tmp_path / "a.png", tmp_path / "b.png"
        for out in (out1, out2):
            code = main(
                ["infer", "--checkpoint", str(ckpt), "--input", str(src), "--output", str(out)]
            )
            assert code == 0
        result = load_image(out1)
        assert result.data.shape == (40, 32, 3)
        assert out1.read_bytes() == out2.read_bytes()
        assert "40x32" in capsys.readouterr().out

    def test_missing_checkpoint_is_an_error(self, tmp_path, capsys):
        src = tmp_path / "in.png"
        save_image(ImagePlane(synthetic_rgb(16, 16, seed=3), "rgb"), src)
        code = main(
            ["infer", "--checkpoint", str(tmp_path / "no.ckpt"),
             "--input", str(src), "--output", str(tmp_path / "o.png")]
        )
        assert code == 1


class TestAblateCommand:
    SMALL = ["--set", "model.trunk_channels=8", "--set", "model.distill_channels=6",
             "--set", "model.num_blocks=1"]

    @pytest.mark.parametrize("axis", ["wiring", "attention", "upsampler"])
    def test_axis_sweeps_six_variants(self, axis, capsys):
        assert main(["ablate", "--axis", axis] + self.SMALL) == 0
        out = capsys.readouterr().out
        rows = [l for l in out.strip().split("\n")[1:] if "ok" in l]
        assert len(rows) == 6
        assert "FAILED" not in out

    def test_variant_labels_cover_the_grid(self):
        base = ModelConfig()
        t1 = [label for label, _ in _ablation_variants("wiring", base)]
        assert t1 == ["BRW", "ARW", "AAW", "BRW+basic", "ARW+basic", "AAW+basic"]
        t2 = [label for label, _ in _ablation_variants("attention", base)]
        assert t2 == ["att-none", "att-SE", "att-CA", "att-RCA", "att-CCA", "att-LERCA"]
        t3 = [label for label, _ in _ablation_variants("upsampler", base)]
        assert t3 == [
            "nearest-direct",
            "nearest-direct-att",
            "stepwise-shared",
            "stepwise-shared-att",
            "stepwise-unshared-att",
            "subpixel",
        ]

    def test_variant_param_counts_differ_across_attention(self, capsys):
        assert main(["ablate", "--axis", "attention"] + self.SMALL) == 0
        out = capsys.readouterr().out
        counts = {}
        for line in out.strip().split("\n")[1:]:
            parts = line.split()
            if len(parts) >= 3 and parts[0].startswith("att-"):
                counts[parts[0]] = int(parts[1])
        assert counts["att-none"] < counts["att-SE"] < counts["att-LERCA"]
        assert counts["att-SE"] == counts["att-CA"] == counts["att-RCA"] == counts["att-CCA"]
