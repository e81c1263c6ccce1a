"""End-to-end runs of the command line pipeline."""

import csv
from dataclasses import replace

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from tbad_synth.cli import cli
from tbad_synth.config import RunConfig
from tbad_synth.metrics import load_encoder, pair_msssim
from tbad_synth.numerics import load_tensor, make_rng
from tbad_synth.phantom import CLASS_IDS
from tbad_synth.sampler import sample_images
from tbad_synth.schedule import schedule_from_config
from tbad_synth.trainer import load_checkpoint

STAGE_COMMANDS = [
    ["gen-data"],
    ["train-base"],
    ["finetune-lora"],
    ["sample"],
    ["evaluate"],
    ["embed"],
    ["segcheck", "--augment"],
    ["report"],
]


def run_stages(runner, base_args, commands=STAGE_COMMANDS):
    for command in commands:
        result = runner.invoke(cli, base_args + command)
        assert result.exit_code == 0, f"{command[0]} failed:\n{result.output}"


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.mark.integration
class TestTinyPipeline:
    """Every stage on the 100-phantom 32x32 configuration."""

    def test_all_stages(self, config_file, tiny_run_config):
        runner = CliRunner()
        run_stages(runner, ["--config", str(config_file)])
        root = tiny_run_config.run_dir

        for stage in ("data", "base", "lora", "samples", "evaluate", "embed", "segcheck",
                      "report"):
            assert (root / stage / "manifest.yaml").exists()

        curve = read_csv(root / "base" / "loss_curve.csv")
        assert len(curve) == tiny_run_config.train.epochs
        for stage in ("base", "lora"):
            notes = yaml.safe_load((root / stage / "manifest.yaml").read_text())["notes"]
            assert notes["fp16_overflows"] == 0

        for c in range(1, 6):
            sidecar = read_csv(root / "samples" / f"class{c}" / "samples.csv")
            assert len(sidecar) == tiny_run_config.eval.samples_per_class
        samples = yaml.safe_load((root / "samples" / "manifest.yaml").read_text())
        assert samples["notes"]["class3"]["adapters"] is True
        assert samples["notes"]["class1"]["adapters"] is False

        embedding = read_csv(root / "embed" / "embedding.csv")
        assert {row["set"] for row in embedding} == {"real", "synth"}
        assert len(list((root / "segcheck" / "overlays").glob("*.ppm"))) == 5 * 4
        assert read_csv(root / "segcheck" / "dice.csv")[0]["dice_augmented"] != ""
        segnotes = yaml.safe_load((root / "segcheck" / "manifest.yaml").read_text())["notes"]
        assert segnotes["dice_empty_pairs"] >= 0

        text = (root / "report" / "report.txt").read_text()
        assert "Synthetic" in text
        assert (root / "report" / "report.csv").exists()

        status = runner.invoke(cli, ["--config", str(config_file), "status"])
        assert status.exit_code == 0
        assert "Artifacts match their manifests" in status.output

    def test_sample_without_adapters(self, config_file, tiny_run_config):
        runner = CliRunner()
        run_stages(runner, ["--config", str(config_file)], STAGE_COMMANDS[:3])
        result = runner.invoke(
            cli, ["--config", str(config_file), "sample", "--no-lora", "--class", "3", "--n", "2"]
        )
        assert result.exit_code == 0
        samples = yaml.safe_load(
            (tiny_run_config.run_dir / "samples" / "manifest.yaml").read_text()
        )
        assert samples["notes"]["class3"]["n"] == 2
        assert samples["notes"]["class3"]["adapters"] is False
        assert "class1" not in samples["notes"]
        assert not any("lora/" in key for key in samples["inputs"])

    def test_merged_adapters_sample_like_applied_ones(self, config_file, tiny_run_config):
        runner = CliRunner()
        args = ["--config", str(config_file), "--precision", "fp64"]
        run_stages(runner, args, STAGE_COMMANDS[:3])
        images = tiny_run_config.run_dir / "samples" / "class3" / "images.tns"

        run_stages(runner, args, [["sample", "--class", "3"]])
        applied = load_tensor(images)
        run_stages(runner, args, [["sample", "--class", "3", "--merge-lora"]])
        merged = load_tensor(images)

        assert np.max(np.abs(applied - merged)) < 1e-4
        notes = yaml.safe_load(
            (tiny_run_config.run_dir / "samples" / "manifest.yaml").read_text()
        )["notes"]["class3"]
        assert notes["adapters"] is True and notes["merged"] is True

    def test_fp64_rerun_from_manifest_is_bit_exact(self, config_file, tiny_run_config):
        runner = CliRunner()
        through_evaluate = STAGE_COMMANDS[:5]
        run_stages(runner, ["--config", str(config_file), "--precision", "fp64",
                            "--run-id", "first"], through_evaluate)
        first = tiny_run_config.run_dir.parent / "first"
        manifest = first / "evaluate" / "manifest.yaml"
        assert yaml.safe_load(manifest.read_text())["config"]["precision"] == "fp64"

        run_stages(runner, ["--config", str(manifest), "--run-id", "second"], through_evaluate)
        second = tiny_run_config.run_dir.parent / "second"

        for rel in ("evaluate/metrics.csv", "base/loss_curve.csv"):
            assert (first / rel).read_bytes() == (second / rel).read_bytes()


@pytest.mark.integration
@pytest.mark.slow
class TestSmokeRun:
    """The 200-phantom 64x64 desk-scale run."""

    def test_smoke(self, temp_dir):
        runner = CliRunner()
        base_args = ["--out", str(temp_dir), "--run-id", "smoke", "--smoke",
                     "--config", str(temp_dir / "absent.yaml")]
        run_stages(runner, base_args + ["--set", "eval.samples_per_class=100"],
                   STAGE_COMMANDS[:5] + [["segcheck"], ["report"]])
        root = temp_dir / "smoke"

        curve = read_csv(root / "base" / "loss_curve.csv")
        assert float(curve[-1]["loss"]) <= 0.8 * float(curve[0]["loss"])

        metrics = {(r["metric"], r["key"]): r["value"]
                   for r in read_csv(root / "evaluate" / "metrics.csv")}
        assert float(metrics[("fid", "")]) < float(metrics[("fid_noise", "")])
        for c in (1, 2, 4, 5):
            assert float(metrics[("accuracy", str(c))]) >= 0.6
        synth4 = float(metrics[("msssim_synth", "4")])
        assert synth4 < 0.95
        assert abs(synth4 - float(metrics[("msssim_real", "4")])) <= 0.15

        detection = {int(r["class"]): r for r in read_csv(root / "segcheck" / "probe.csv")}
        assert float(detection[2]["FL"]) >= 0.6
        assert float(detection[4]["FL"]) >= 0.6
        assert float(detection[5]["any_lumen"]) <= 0.1

        rows = read_csv(root / "report" / "report.csv")
        assert rows[1]["row"] == "Synthetic"
        assert all(rows[1][f"C{c}"] != "n/a" for c in range(1, 6))

        base = load_checkpoint(root / "base" / "model.ckpt")
        encoder = load_encoder(root / "evaluate" / "encoder")
        cfg = RunConfig.smoke()
        sched = schedule_from_config(cfg.schedule)

        diverse = sample_images(
            base, sched, replace(cfg.sampler, method="euler_a", token=4, seed=9), 16, cfg.data.size
        )
        spread = pair_msssim(list(diverse.images), list(diverse.images), 50, make_rng(9, "pairs"))
        assert spread.mean < 0.95

        for c in CLASS_IDS:
            preds = []
            for steps in (20, 26):
                scfg = replace(cfg.sampler, method="euler", steps=steps, token=c, seed=cfg.seed)
                images = sample_images(base, sched, scfg, 100, cfg.data.size, workers=4).images
                preds.append(encoder.predict(images))
            assert np.mean(preds[0] == preds[1]) >= 0.8
