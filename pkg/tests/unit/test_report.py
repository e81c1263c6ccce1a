"""Unit tests for report module."""

import csv

import pytest

from tbad_synth.config import RunConfig
from tbad_synth.report import (
    MISSING,
    MetricReport,
    deviation_footnotes,
    fmt,
    read_dice_csv,
    read_metrics_csv,
    render_text,
    warn_gaps,
    write_metrics_csv,
    write_report_csv,
)


@pytest.fixture
def published():
    """A report populated with the published headline numbers."""
    cfg = RunConfig()
    cfg.data.size = 512
    return MetricReport(
        real_msssim={1: 0.30, 2: 0.32, 3: 0.33, 4: 0.31, 5: 0.31},
        synth_msssim={1: 0.39, 2: 0.37, 3: 0.37, 4: 0.38, 5: 0.35},
        fid=77.82,
        n_fid=250,
        dice={"TL": 0.91, "FL": 0.84, "FLT": 0.52},
        config=cfg.to_dict(),
    )


class TestRendering:
    """Test the text and CSV renderings."""

    def test_text_contains_every_cell(self, published):
        text = render_text(published)
        for value in ("0.30", "0.32", "0.33", "0.39", "0.37", "0.35", "77.82", "250", "0.52"):
            assert value in text
        assert "Synthetic" in text
        assert "[1]" in text

    def test_csv_matches_table(self, published, temp_dir):
        main, dice_path = write_report_csv(published, temp_dir / "report.csv")
        with open(main) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["row", "C1", "C2", "C3", "C4", "C5", "FID", "n"]
        assert rows[1] == ["Real", "0.30", "0.32", "0.33", "0.31", "0.31", "-", "-"]
        assert rows[2] == ["Synthetic", "0.39", "0.37", "0.37", "0.38", "0.35", "77.82", "250"]
        with open(dice_path) as f:
            dice_rows = list(csv.reader(f))
        assert dice_rows[1] == ["Real test", "0.91", "0.84", "0.52"]

    def test_missing_cells(self, temp_dir):
        report = MetricReport(real_msssim={1: 0.3})
        rows = report.table_rows()
        assert rows[0][2] == MISSING
        assert rows[1][6:] == [MISSING, MISSING]
        assert report.dice_rows() == [["Real test", MISSING, MISSING, MISSING]]
        assert "Dice" in warn_gaps(report)

    def test_augmented_dice_row(self, published):
        published.dice_augmented = {"TL": 0.9, "FL": 0.8, "FLT": float("nan")}
        assert published.dice_rows()[1] == ["Real + synthetic", "0.90", "0.80", MISSING]

    def test_fmt(self):
        assert fmt(None) == MISSING
        assert fmt(float("nan")) == MISSING
        assert fmt(0.305, 3) == "0.305"


class TestFootnotes:
    def test_published_setup(self, published):
        notes = deviation_footnotes(published)
        assert any("Inception" in n for n in notes)
        assert not any("n=" in n for n in notes)

    @pytest.mark.parametrize("guidance,shown", [(4.0, "g=4 "), (2.5, "g=2.5 "), (0.0, "g=0 ")])
    def test_guidance_is_always_a_configuration_choice(self, guidance, shown):
        cfg = RunConfig()
        cfg.sampler.guidance = guidance
        notes = deviation_footnotes(MetricReport(config=cfg.to_dict()))
        guidance_notes = [n for n in notes if "Guidance" in n]
        assert len(guidance_notes) == 1
        assert shown in guidance_notes[0]
        assert "configuration choice" in guidance_notes[0]
        assert "published" not in guidance_notes[0]

    def test_desk_run(self):
        cfg = RunConfig()
        cfg.sampler.guidance = 2.0
        report = MetricReport(n_fid=40, fid_noise=300.0, config=cfg.to_dict())
        text = " ".join(deviation_footnotes(report))
        assert "64x64" in text
        assert "g=2 is a configuration choice" in text
        assert "n=40" in text
        assert "300.00" in text


class TestMetricStore:
    def test_roundtrip_keeps_full_precision(self, temp_dir):
        report = MetricReport(
            real_msssim={1: 0.1234567891234, 3: None},
            synth_msssim={2: 0.5},
            fid=12.3456789,
            n_fid=40,
            accuracy={4: 0.75},
        )
        path = write_metrics_csv(report, temp_dir / "metrics.csv")
        back = read_metrics_csv(path)
        assert back.real_msssim == {1: 0.1234567891234, 3: None}
        assert back.synth_msssim == {2: 0.5}
        assert back.fid == 12.3456789
        assert back.n_fid == 40
        assert back.fid_noise is None
        assert back.accuracy == {4: 0.75}

    def test_dice_csv(self, temp_dir):
        path = temp_dir / "dice.csv"
        path.write_text("label,dice,dice_augmented\nTL,0.9,0.95\nFL,0.8,\nFLT,nan,\n")
        report = read_dice_csv(path, MetricReport())
        assert report.dice["TL"] == 0.9
        assert report.dice_augmented == {"TL": 0.95}
        assert fmt(report.dice["FLT"]) == MISSING
