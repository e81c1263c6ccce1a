"""Unit tests for CLI module."""

import pytest
import yaml
from click.testing import CliRunner

from tbad_synth import __version__
from tbad_synth.cli import _parse_override, cli, config
from tbad_synth.errors import (
    ArtifactError,
    CorruptFileError,
    LeakageError,
    NumericalError,
    TrainingError,
    ValidationError,
)


@pytest.fixture
def runner():
    return CliRunner()


class TestCLI:
    """Test the command group and its global options."""

    def test_cli_group_exists(self, runner):
        assert callable(cli)
        result = runner.invoke(cli, ["--help"])

        assert result.exit_code == 0
        assert "class-conditioned diffusion synthesis" in result.output
        for command in ("gen-data", "train-base", "finetune-lora", "sample", "evaluate",
                        "embed", "segcheck", "report", "status"):
            assert command in result.output

    def test_config_group_exists(self, runner):
        assert callable(config)
        result = runner.invoke(cli, ["config", "--help"])

        assert result.exit_code == 0
        assert "Manage configuration settings" in result.output

    def test_version(self, runner):
        result = runner.invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert __version__ in result.output

    def test_config_show(self, runner, config_file):
        result = runner.invoke(cli, ["--config", str(config_file), "config", "show"])

        assert result.exit_code == 0
        assert "tbad-synth Configuration" in result.output
        assert "data.total" in result.output
        assert "tiny" in result.output

    def test_set_overrides_file(self, runner, config_file):
        result = runner.invoke(
            cli, ["--config", str(config_file), "--set", "train.epochs=17", "config", "show"]
        )
        assert result.exit_code == 0
        assert "17" in result.output

    def test_run_id_and_out(self, runner, temp_dir):
        result = runner.invoke(
            cli, ["--config", str(temp_dir / "none.yaml"), "--out", str(temp_dir),
                  "--run-id", "abc", "status"]
        )
        assert result.exit_code == 0
        assert "not found; using defaults" in result.output
        assert "abc" in result.output
        assert "Artifacts match their manifests" in result.output


class TestOverrides:
    def test_parse_override(self):
        assert _parse_override("train.lr=1e-3") == ("train.lr", 1e-3)
        assert _parse_override("seg.widths=[4, 4, 4]") == ("seg.widths", [4, 4, 4])
        assert _parse_override("sampler.method=euler_a") == ("sampler.method", "euler_a")

    def test_missing_equals(self, runner, config_file):
        result = runner.invoke(cli, ["--config", str(config_file), "--set", "train.lr",
                                     "config", "show"])
        assert result.exit_code == 2
        assert "KEY=VALUE" in result.output

    def test_unknown_key(self, runner, config_file):
        result = runner.invoke(cli, ["--config", str(config_file), "--set", "train.nope=1",
                                     "config", "show"])
        assert result.exit_code == 2
        assert "[invalid-input]" in result.output
        assert "unknown config key" in result.output

    def test_bad_thread_cap(self, runner, config_file, monkeypatch):
        monkeypatch.setenv("ADL_THREADS", "many")
        result = runner.invoke(cli, ["--config", str(config_file), "config", "show"])
        assert result.exit_code == 2
        assert "ADL_THREADS" in result.output

    def test_bad_option_value(self, runner, config_file):
        result = runner.invoke(cli, ["--config", str(config_file), "sample", "--guidance", "-1"])
        assert result.exit_code == 2


class TestConfigInit:
    def test_writes_prompted_values(self, runner, temp_dir):
        path = temp_dir / "written.yaml"
        answers = "5\nout\nfp64\n100\n32\n3\n2\n"
        result = runner.invoke(cli, ["--config", str(path), "config", "init"], input=answers)

        assert result.exit_code == 0
        assert "not found" not in result.output
        data = yaml.safe_load(path.read_text())
        assert data["seed"] == 5
        assert data["precision"] == "fp64"
        assert data["data"]["total"] == 100
        assert data["train"]["epochs"] == 3
        assert data["parallel_workers"] == 2


class TestStageErrors:
    """Missing upstream artifacts and error categories."""

    @pytest.mark.parametrize(
        "command,producer",
        [
            ("train-base", "gen-data"),
            ("finetune-lora", "train-base"),
            ("sample", "train-base"),
            ("evaluate", "sample"),
            ("embed", "evaluate"),
            ("segcheck", "sample"),
            ("report", "evaluate"),
        ],
    )
    def test_names_the_missing_stage(self, runner, config_file, command, producer):
        result = runner.invoke(cli, ["--config", str(config_file), command])

        assert result.exit_code == 3
        assert "[missing-artifact]" in result.output
        assert f"run `tbad-synth {producer}` first" in result.output

    @pytest.mark.parametrize(
        "error,code,category",
        [
            (ValidationError, 2, "invalid-input"),
            (ArtifactError, 3, "missing-artifact"),
            (CorruptFileError, 4, "corrupt-file"),
            (TrainingError, 5, "training-failed"),
            (NumericalError, 6, "numerical"),
            (LeakageError, 7, "data-leakage"),
        ],
    )
    def test_exit_codes(self, runner, config_file, mocker, error, code, category):
        mocker.patch("tbad_synth.cli.build_dataset", side_effect=error("boom"))
        result = runner.invoke(cli, ["--config", str(config_file), "gen-data"])

        assert result.exit_code == code
        assert f"[{category}] boom" in result.output
