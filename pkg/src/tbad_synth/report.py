"""Evaluation report: MS-SSIM per class for real and synthetic data, FID, Dice appendix."""

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from rich.console import Console
from rich.table import Table

from .phantom import CLASS_IDS, LABEL_NAMES

console = Console()

MISSING = "n/a"
NOT_APPLICABLE = "-"
PUBLISHED_FID_N = 250
PUBLISHED_SIZE = 512

LUMEN_NAMES = [LABEL_NAMES[k] for k in (1, 2, 3)]


def fmt(value: Optional[float], digits: int = 2) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return MISSING
    return f"{value:.{digits}f}"


@dataclass
class MetricReport:
    """Every number the report shows, with ``None`` for metrics not computed."""

    real_msssim: Dict[int, Optional[float]] = field(default_factory=dict)
    synth_msssim: Dict[int, Optional[float]] = field(default_factory=dict)
    fid: Optional[float] = None
    n_fid: Optional[int] = None
    fid_noise: Optional[float] = None
    accuracy: Dict[int, Optional[float]] = field(default_factory=dict)
    dice: Dict[str, Optional[float]] = field(default_factory=dict)
    dice_augmented: Dict[str, Optional[float]] = field(default_factory=dict)
    config: Dict = field(default_factory=dict)

    def gaps(self) -> List[str]:
        missing = []
        for label, values in (("Real", self.real_msssim), ("Synthetic", self.synth_msssim)):
            missing += [f"{label} C{c}" for c in CLASS_IDS if values.get(c) is None]
        if self.fid is None:
            missing.append("FID")
        if not any(v is not None for v in self.dice.values()):
            missing.append("Dice")
        return missing

    def table_rows(self) -> List[List[str]]:
        """Cells of the main table, shared by the text and CSV renderings."""
        real = [fmt(self.real_msssim.get(c)) for c in CLASS_IDS]
        synth = [fmt(self.synth_msssim.get(c)) for c in CLASS_IDS]
        n_fid = str(self.n_fid) if self.n_fid is not None else MISSING
        return [
            ["Real", *real, NOT_APPLICABLE, NOT_APPLICABLE],
            ["Synthetic", *synth, fmt(self.fid), n_fid],
        ]

    def dice_rows(self) -> List[List[str]]:
        rows = [["Real test", *[fmt(self.dice.get(n)) for n in LUMEN_NAMES]]]
        if self.dice_augmented:
            rows.append(
                ["Real + synthetic", *[fmt(self.dice_augmented.get(n)) for n in LUMEN_NAMES]]
            )
        return rows


TABLE_HEADER = ["", *[f"C{c}" for c in CLASS_IDS], "FID", "n"]
DICE_HEADER = ["Segmenter trained on", *LUMEN_NAMES]


def deviation_footnotes(report: MetricReport) -> List[str]:
    """Where this run departs from the published setup."""
    cfg = report.config or {}
    size = (cfg.get("data") or {}).get("size")
    guidance = (cfg.get("sampler") or {}).get("guidance")
    notes = [
        "FID features come from a 64-d phantom-trained classifier substituted for Inception-v3.",
    ]
    if size is not None:
        notes.append(
            f"Images are {size}x{size} phantoms, not {PUBLISHED_SIZE}x{PUBLISHED_SIZE} CTA slices."
        )
    if guidance is not None:
        notes.append(
            f"Guidance g={float(guidance):g} is a configuration choice; "
            "the source study does not report one."
        )
    if report.n_fid is not None and report.n_fid != PUBLISHED_FID_N:
        notes.append(f"FID uses n={report.n_fid} images per set (published n={PUBLISHED_FID_N}).")
    if report.fid_noise is not None:
        notes.append(f"FID of pure noise against the same real set: {fmt(report.fid_noise)}.")
    return notes


def _table(title: str, header: List[str]) -> Table:
    table = Table(title=title)
    table.add_column(header[0], style="cyan")
    for name in header[1:]:
        table.add_column(name, style="green", justify="right")
    return table


def build_tables(report: MetricReport) -> Tuple[Table, Table]:
    table = _table("MS-SSIM per class and FID", TABLE_HEADER)
    for row in report.table_rows():
        table.add_row(*row)

    dice = _table("Segmentation Dice on real test phantoms", DICE_HEADER)
    for row in report.dice_rows():
        dice.add_row(*row)
    return table, dice


def render_text(report: MetricReport, width: int = 100) -> str:
    """Plain-text rendering of both tables and the footnotes."""
    buffer = io.StringIO()
    out = Console(file=buffer, width=width, record=True, color_system=None)
    for table in build_tables(report):
        out.print(table)
    for i, note in enumerate(deviation_footnotes(report), start=1):
        out.print(f"[{i}] {note}", markup=False)
    return out.export_text()


def write_report_csv(report: MetricReport, path: Path) -> List[Path]:
    """``report.csv`` with the main table and ``report_dice.csv`` with the appendix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dice_path = path.with_name(path.stem + "_dice.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", *TABLE_HEADER[1:]])
        writer.writerows(report.table_rows())
    with open(dice_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", *LUMEN_NAMES])
        writer.writerows(report.dice_rows())
    return [path, dice_path]


# Metric store ----------------------------------------------------------------

METRIC_FIELDS = ["metric", "key", "value"]


def _metric_rows(report: MetricReport):
    for c, v in sorted(report.real_msssim.items()):
        yield "msssim_real", c, v
    for c, v in sorted(report.synth_msssim.items()):
        yield "msssim_synth", c, v
    for c, v in sorted(report.accuracy.items()):
        yield "accuracy", c, v
    yield "fid", "", report.fid
    yield "n_fid", "", report.n_fid
    yield "fid_noise", "", report.fid_noise


def write_metrics_csv(report: MetricReport, path: Path) -> Path:
    """Full-precision ``metric,key,value`` rows; the evaluate stage's output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_FIELDS)
        for metric, key, value in _metric_rows(report):
            if value is None:
                text = ""
            elif metric == "n_fid":
                text = str(int(value))
            else:
                text = repr(float(value))
            writer.writerow([metric, key, text])
    return path


def _value(text: str) -> Optional[float]:
    return None if text in ("", MISSING) else float(text)


def read_metrics_csv(path: Path, report: Optional[MetricReport] = None) -> MetricReport:
    report = report or MetricReport()
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            metric, key, value = row["metric"], row["key"], _value(row["value"])
            if metric == "msssim_real":
                report.real_msssim[int(key)] = value
            elif metric == "msssim_synth":
                report.synth_msssim[int(key)] = value
            elif metric == "accuracy":
                report.accuracy[int(key)] = value
            elif metric == "fid":
                report.fid = value
            elif metric == "n_fid":
                report.n_fid = None if value is None else int(value)
            elif metric == "fid_noise":
                report.fid_noise = value
    return report


def read_dice_csv(path: Path, report: MetricReport) -> MetricReport:
    """Fill the Dice appendix from the segmentation probe's ``dice.csv``."""
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            report.dice[row["label"]] = _value(row["dice"])
            if row.get("dice_augmented"):
                report.dice_augmented[row["label"]] = _value(row["dice_augmented"])
    return report


def warn_gaps(report: MetricReport) -> List[str]:
    gaps = report.gaps()
    if gaps:
        console.print(
            f"⚠️  Report has gaps ({', '.join(gaps)}); missing cells show '{MISSING}'",
            style="yellow",
        )
    return gaps
