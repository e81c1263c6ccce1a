"""Procedural TBAD CTA-slice phantoms and the five-class dataset split."""

import concurrent.futures
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from scipy import ndimage

from .config import DataConfig
from .errors import ValidationError
from .numerics import make_rng

console = Console()

CLASS_IDS = (1, 2, 3, 4, 5)
NULL_TOKEN = 0
LABEL_NAMES = {0: "background", 1: "TL", 2: "FL", 3: "FLT"}

# Text prompt each class token stands for
CLASS_PROMPTS = {
    1: "CTA slice of the descending aorta with true lumen",
    2: "CTA slice of the descending aorta with false lumen",
    3: "CTA slice of the descending aorta with false lumen thrombosis",
    4: "CTA slice of the descending aorta with true and false lumen",
    5: "CTA slice without true lumen, false lumen or thrombosis",
}

# Labels each class must (and may) contain
CLASS_LABELS = {1: {1}, 2: {2}, 3: {3}, 4: {1, 2}, 5: set()}
ALLOWED_LABELS = {1: {1}, 2: {2}, 3: {2, 3}, 4: {1, 2}, 5: set()}

INTENSITY = {
    "air": 0.02,
    "body": 0.28,
    "skin": 0.5,
    "spine": 0.72,
    "wall": 0.45,
    "unenhanced": 0.38,
    "TL": 0.92,
    "FL": 0.82,
    "FLT": 0.40,
}

SPLITS = ("train", "val", "test")


@dataclass
class PhantomSample:
    """A grayscale slice with its TL/FL/FLT label mask."""

    image: np.ndarray
    mask: np.ndarray
    class_id: int
    seed: int
    geometry: Dict[str, float] = field(default_factory=dict)


@dataclass
class DatasetSplit:
    """Train/val/test phantoms, disjoint by seed."""

    train: List[PhantomSample]
    val: List[PhantomSample]
    test: List[PhantomSample]
    counts: Dict[int, int]

    def split(self, name: str) -> List[PhantomSample]:
        if name not in SPLITS:
            raise ValidationError(f"unknown split '{name}'")
        return getattr(self, name)

    def manifest_rows(self) -> List[Tuple[int, int, str]]:
        rows = []
        for name in SPLITS:
            rows.extend((s.seed, s.class_id, name) for s in self.split(name))
        return rows


def class_token(class_id: int) -> int:
    """Conditioning token for a class; token 0 is the null token."""
    if class_id not in CLASS_IDS:
        raise ValidationError(f"class_id must be in 1..5, got {class_id}")
    return int(class_id)


def _ellipse(xx, yy, cx, cy, a, b, phi):
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _ellipse_radius(a: float, b: float, phi: float, direction: float) -> float:
    """Distance from an ellipse's center to its boundary along ``direction``."""
    rel = direction - phi
    return float(1.0 / np.sqrt((np.cos(rel) / a) ** 2 + (np.sin(rel) / b) ** 2))


def _largest_component(region: np.ndarray) -> np.ndarray:
    labelled, n = ndimage.label(region)
    if n <= 1:
        return region
    sizes = ndimage.sum(region, labelled, index=np.arange(1, n + 1))
    return labelled == (int(np.argmax(sizes)) + 1)


def gen_phantom(
    seed: int, class_id: int, size: int = 64, noise_std: float = 0.03
) -> PhantomSample:
    """Render one phantom slice; deterministic per ``(seed, class_id, size)``.

    The aorta is an ellipse; a dissection flap carves a round true lumen out of
    one side, leaving the false lumen as a crescent. Thrombus is the dim cap of
    the false lumen opposite the true lumen.
    """
    class_token(class_id)
    if size < 32:
        raise ValidationError(f"phantom size must be >= 32, got {size}")

    rng = make_rng(seed, "phantom", class_id, size)
    s = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    cx = size / 2 + rng.uniform(-1.5, 1.5) * s
    cy = size / 2 + rng.uniform(-1.5, 1.5) * s
    body_a = size * rng.uniform(0.40, 0.44)
    body_b = size * rng.uniform(0.32, 0.36)
    body = _ellipse(xx, yy, cx, cy, body_a, body_b, 0.0)
    inner = _ellipse(xx, yy, cx, cy, body_a - 1.5 * s, body_b - 1.5 * s, 0.0)

    spine = _ellipse(
        xx, yy, cx + 0.12 * size, cy + 0.2 * size, 0.075 * size, 0.065 * size, 0.0
    )

    ax = cx - 0.13 * size + rng.uniform(-1.5, 1.5) * s
    ay = cy - 0.02 * size + rng.uniform(-1.5, 1.5) * s
    a = size * rng.uniform(0.15, 0.18)
    b = size * rng.uniform(0.13, 0.16)
    phi = rng.uniform(0.0, np.pi)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    r_t = size * rng.uniform(0.08, 0.095)
    d = _ellipse_radius(a, b, phi, theta) - 0.4 * r_t
    tx, ty = ax + d * np.cos(theta), ay + d * np.sin(theta)
    flap_w = max(1.0, 1.2 * s)
    cut = -0.2 * _ellipse_radius(a, b, phi, theta + np.pi)

    aorta = _ellipse(xx, yy, ax, ay, a, b, phi)
    r_disk = np.hypot(xx - tx, yy - ty)
    disk = r_disk <= r_t
    flap = (r_disk > r_t) & (r_disk <= r_t + flap_w) & aorta
    along = (xx - ax) * np.cos(theta) + (yy - ay) * np.sin(theta)
    false_lumen = aorta & ~disk & ~flap

    mask = np.zeros((size, size), dtype=np.uint8)
    if class_id == 1:
        vessel = disk
        mask[disk] = 1
    elif class_id in (2, 3):
        vessel = aorta | disk
        mask[false_lumen] = 2
        if class_id == 3:
            mask[false_lumen & (along < cut)] = 3
    elif class_id == 4:
        vessel = aorta | disk
        mask[false_lumen] = 2
        mask[disk] = 1
    else:
        vessel = aorta

    for label in (1, 2, 3):
        region = mask == label
        if region.any():
            keep = _largest_component(region)
            mask[region & ~keep] = 0

    image = np.full((size, size), INTENSITY["air"])
    image[body] = INTENSITY["skin"]
    image[inner] = INTENSITY["body"]
    image[spine] = INTENSITY["spine"]
    wall = ndimage.binary_dilation(vessel, iterations=max(1, int(round(1.2 * s))))
    image[wall] = INTENSITY["wall"]
    image[vessel] = INTENSITY["unenhanced"] if class_id == 5 else INTENSITY["wall"]
    for label, name in ((1, "TL"), (2, "FL"), (3, "FLT")):
        image[mask == label] = INTENSITY[name]

    image = image + noise_std * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)

    geometry = {
        "aorta_cx": float(ax),
        "aorta_cy": float(ay),
        "aorta_a": float(a),
        "aorta_b": float(b),
        "aorta_phi": float(phi),
        "theta": float(theta),
        "tl_cx": float(tx),
        "tl_cy": float(ty),
        "tl_r": float(r_t),
        "thrombus_cut": float(cut),
    }
    return PhantomSample(
        image=image, mask=mask, class_id=class_id, seed=int(seed), geometry=geometry
    )


def class_counts(
    total: int, proportions: Sequence[float], min_per_class: int = 20
) -> Dict[int, int]:
    """Rescale class proportions to ``total`` with a per-class floor.

    The surplus created by the floor is taken from the largest class.
    """
    if total < 100:
        raise ValidationError(f"dataset total must be >= 100, got {total}")
    if len(proportions) != len(CLASS_IDS):
        raise ValidationError("proportions must list exactly five classes")
    weights = np.asarray(proportions, dtype=np.float64)
    if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
        raise ValidationError("every class proportion must be positive, got an empty class")
    weights = weights / weights.sum()
    counts = np.maximum(min_per_class, np.rint(weights * total)).astype(int)
    largest = int(np.argmax(weights))
    counts[largest] -= int(counts.sum()) - total
    if counts[largest] < max(1, min_per_class) or counts[largest] < counts.max():
        raise ValidationError(
            f"total={total} cannot honour min_per_class={min_per_class} for all classes"
        )
    return {c: int(n) for c, n in zip(CLASS_IDS, counts)}


def _sample_seed(seed: int, class_id: int, index: int) -> int:
    return seed * 10_000_000 + class_id * 1_000_000 + index


def build_dataset(cfg: DataConfig, seed: int = 0, workers: int = 1) -> DatasetSplit:
    """Generate phantoms per class and split them 80/10/10 within each class."""
    counts = class_counts(cfg.total, cfg.proportions, cfg.min_per_class)
    if max(counts.values()) >= 1_000_000:
        raise ValidationError("at most 999999 phantoms per class are supported")
    fractions = np.asarray(cfg.split, dtype=np.float64)
    if fractions.shape != (3,) or np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValidationError("split fractions must be three non-negative values summing to 1")

    assignments: List[Tuple[int, int, str]] = []
    for class_id in CLASS_IDS:
        n = counts[class_id]
        order = make_rng(seed, "dataset/split", class_id).permutation(n)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        for rank, index in enumerate(order):
            name = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            assignments.append((_sample_seed(seed, class_id, int(index)), class_id, name))
    assignments.sort(key=lambda row: (SPLITS.index(row[2]), row[1], row[0]))

    def render(row: Tuple[int, int, str]) -> PhantomSample:
        return gen_phantom(row[0], row[1], cfg.size, cfg.noise_std)

    samples: List[PhantomSample] = []
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        console=console,
    ) as progress:
        task = progress.add_task("Rendering phantoms...", total=len(assignments))
        with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for sample in pool.map(render, assignments):
                samples.append(sample)
                progress.advance(task)

    parts: Dict[str, List[PhantomSample]] = {name: [] for name in SPLITS}
    for row, sample in zip(assignments, samples):
        parts[row[2]].append(sample)
    return DatasetSplit(train=parts["train"], val=parts["val"], test=parts["test"], counts=counts)


def write_manifest(path: Path, split: DatasetSplit) -> None:
    """Write the ``seed,class,split`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "class", "split"])
        writer.writerows(split.manifest_rows())


def read_manifest(path: Path) -> List[Tuple[int, int, str]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [(int(r["seed"]), int(r["class"]), r["split"]) for r in reader]


def stack(samples: Sequence[PhantomSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Images (N,H,W), masks (N,H,W) and class ids (N,) of a sample list."""
    if not samples:
        raise ValidationError("cannot stack an empty sample list")
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    classes = np.array([s.class_id for s in samples], dtype=np.int64)
    return images, masks, classes


def unstack(
    images: np.ndarray,
    masks: np.ndarray,
    classes: np.ndarray,
    seeds: Optional[Sequence[int]] = None,
) -> List[PhantomSample]:
    seeds = seeds if seeds is not None else [-1] * len(images)
    return [
        PhantomSample(image=img, mask=m.astype(np.uint8), class_id=int(c), seed=int(sd))
        for img, m, c, sd in zip(images, masks, classes, seeds)
    ]
