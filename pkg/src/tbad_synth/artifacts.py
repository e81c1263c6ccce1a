"""Run directories, stage manifests and artifact files.

Each pipeline stage writes into ``<out>/<run-id>/<stage>/`` and finishes with
a ``manifest.yaml`` holding the full config echo, seeds, hashes of the files
it read and wrote, and library versions.
"""

import csv
import hashlib
import platform
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from PIL import Image
from rich.console import Console

from . import __version__
from .config import RunConfig
from .errors import ArtifactError, LeakageError, ValidationError
from .numerics import load_tensor, save_tensor
from .phantom import SPLITS, DatasetSplit, PhantomSample, read_manifest, write_manifest

console = Console()

MANIFEST = "manifest.yaml"

# Stage name -> subcommand that produces it
STAGES = {
    "data": "gen-data",
    "base": "train-base",
    "lora": "finetune-lora",
    "samples": "sample",
    "evaluate": "evaluate",
    "embed": "embed",
    "segcheck": "segcheck",
    "report": "report",
}

# Only these stages may read the held-out test split
TEST_READERS = frozenset({"evaluate", "embed", "segcheck"})


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def library_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version(), "tbad_synth": __version__}
    for name in ("numpy", "scipy", "pillow", "click", "pyyaml", "rich"):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


@dataclass
class StageManifest:
    """What one stage read, wrote and ran with."""

    stage: str
    run_id: str
    config: Dict
    seeds: Dict[str, int] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=library_versions)
    notes: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "stage": self.stage,
            "run_id": self.run_id,
            "seeds": dict(self.seeds),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "versions": dict(self.versions),
            "notes": dict(self.notes),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "StageManifest":
        return cls(
            stage=data["stage"],
            run_id=data.get("run_id", ""),
            config=data.get("config") or {},
            seeds=data.get("seeds") or {},
            inputs=data.get("inputs") or {},
            outputs=data.get("outputs") or {},
            versions=data.get("versions") or {},
            notes=data.get("notes") or {},
        )


class RunDir:
    """One run directory; stages are subdirectories of it."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.run_dir

    def stage_dir(self, stage: str, create: bool = False) -> Path:
        if stage not in STAGES:
            raise ValidationError(f"unknown stage '{stage}'")
        path = self.root / stage
        if create:
            path.mkdir(parents=True, exist_ok=True)
        return path

    def has(self, stage: str) -> bool:
        return (self.root / stage / MANIFEST).exists()

    def require(self, stage: str, consumer: str) -> Path:
        """Stage directory of a finished upstream stage, else a 'run X first' error."""
        if not self.has(stage):
            raise ArtifactError(
                f"{consumer} needs the '{stage}' artifacts in {self.root}; "
                f"run `tbad-synth {STAGES[stage]}` first"
            )
        return self.root / stage

    def relative(self, path: Path) -> str:
        return Path(path).resolve().relative_to(self.root.resolve()).as_posix()

    def begin(self, stage: str) -> StageManifest:
        self.stage_dir(stage, create=True)
        return StageManifest(
            stage=stage,
            run_id=self.cfg.effective_run_id,
            config=self.cfg.to_dict(),
            seeds={"seed": self.cfg.seed},
        )

    def record_input(self, manifest: StageManifest, path: Path) -> None:
        manifest.inputs[self.relative(path)] = sha256_file(path)

    def finish(self, manifest: StageManifest, outputs: Iterable[Path]) -> Path:
        """Hash the outputs and write the stage manifest last."""
        for path in outputs:
            manifest.outputs[self.relative(path)] = sha256_file(path)
        path = self.stage_dir(manifest.stage) / MANIFEST
        with open(path, "w") as f:
            yaml.safe_dump(manifest.to_dict(), f, default_flow_style=False, sort_keys=False)
        console.print(
            f"📁 {manifest.stage}: {len(manifest.outputs)} file(s) recorded in {self.relative(path)}",
            style="dim",
        )
        return path

    def manifest(self, stage: str) -> StageManifest:
        path = self.root / stage / MANIFEST
        if not path.exists():
            raise ArtifactError(
                f"no manifest for stage '{stage}'; run `tbad-synth {STAGES[stage]}` first"
            )
        with open(path) as f:
            return StageManifest.from_dict(yaml.safe_load(f) or {})

    def verify(self) -> List[str]:
        """Integrity sweep: every file a manifest names exists with the recorded hash."""
        problems = []
        for stage in STAGES:
            if not self.has(stage):
                continue
            m = self.manifest(stage)
            for rel, digest in {**m.inputs, **m.outputs}.items():
                path = self.root / rel
                if not path.exists():
                    problems.append(f"{stage}: missing {rel}")
                elif sha256_file(path) != digest:
                    problems.append(f"{stage}: hash mismatch for {rel}")
        return problems


def check_split_access(stage: str, splits: Sequence[str]) -> None:
    if "test" in splits and stage not in TEST_READERS:
        raise LeakageError(
            f"stage '{stage}' may not read the test split; "
            f"only {', '.join(sorted(TEST_READERS))} can"
        )


# Dataset storage -------------------------------------------------------------


def write_dataset(run: RunDir, dataset: DatasetSplit, previews: bool = True) -> List[Path]:
    """Split manifest, image and mask tensors per split, optional PGM previews."""
    out = run.stage_dir("data", create=True)
    written = [out / "manifest.csv"]
    write_manifest(written[0], dataset)
    for name in SPLITS:
        samples = dataset.split(name)
        if not samples:
            continue
        images = np.stack([s.image for s in samples]).astype(np.float32)
        masks = np.stack([s.mask for s in samples]).astype(np.float32)
        save_tensor(out / f"{name}_images.tns", images, "fp32")
        save_tensor(out / f"{name}_masks.tns", masks, "fp32")
        written += [out / f"{name}_images.tns", out / f"{name}_masks.tns"]
    if previews:
        for name in SPLITS:
            for s in dataset.split(name):
                stem = out / "images" / name / f"c{s.class_id}_{s.seed}"
                written.append(write_pgm(stem.with_suffix(".pgm"), s.image))
                written.append(write_mask_pgm(stem.with_name(stem.name + "_mask.pgm"), s.mask))
    return written


def load_dataset(
    run: RunDir, stage: str, splits: Sequence[str], manifest: Optional[StageManifest] = None
) -> DatasetSplit:
    """Load the requested splits from the data stage; other splits come back empty."""
    check_split_access(stage, splits)
    root = run.require("data", stage)
    rows = read_manifest(root / "manifest.csv")
    parts: Dict[str, List[PhantomSample]] = {name: [] for name in SPLITS}
    counts: Dict[int, int] = {}
    for _, class_id, _ in rows:
        counts[class_id] = counts.get(class_id, 0) + 1
    for name in splits:
        meta = [(seed, class_id) for seed, class_id, split in rows if split == name]
        if not meta:
            continue
        paths = [root / f"{name}_images.tns", root / f"{name}_masks.tns"]
        images, masks = (load_tensor(p) for p in paths)
        if len(images) != len(meta) or len(masks) != len(meta):
            raise ArtifactError(f"{name} tensors do not match manifest.csv; rerun gen-data")
        if manifest is not None:
            for p in paths:
                run.record_input(manifest, p)
        parts[name] = [
            PhantomSample(
                image=img.astype(np.float64), mask=m.astype(np.uint8), class_id=c, seed=s
            )
            for (s, c), img, m in zip(meta, images, masks)
        ]
    return DatasetSplit(train=parts["train"], val=parts["val"], test=parts["test"], counts=counts)


# Image and table writers -----------------------------------------------------


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: Path, image: np.ndarray) -> Path:
    """8-bit binary PGM of an image in [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(image)).save(path, format="PPM")
    return path


def write_mask_pgm(path: Path, mask: np.ndarray) -> Path:
    """Label mask as PGM with grey level label * 64."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask, dtype=np.uint8) * 64).astype(np.uint8)).save(
        path, format="PPM"
    )
    return path


def write_ppm(path: Path, rgb: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, format="PPM")
    return path


def read_pgm(path: Path) -> np.ndarray:
    """PGM back to floats in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


SIDECAR_FIELDS = ["index", "seed", "method", "steps", "g", "pos", "neg"]


def write_sample_sidecar(path: Path, rows: Sequence[Dict[str, object]]) -> Path:
    """One ``index,seed,method,steps,g,pos,neg`` row per generated image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SIDECAR_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_sample_sidecar(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def sample_dir(run: RunDir, class_id: int) -> Path:
    return run.stage_dir("samples") / f"class{class_id}"


def load_samples(run: RunDir, class_id: int) -> Optional[Tuple[np.ndarray, Path]]:
    """Sampled images of one class, or None when that class was never sampled."""
    path = sample_dir(run, class_id) / "images.tns"
    if not path.exists():
        return None
    return load_tensor(path), path
