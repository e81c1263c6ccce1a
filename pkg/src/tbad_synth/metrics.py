"""Image-quality metrics: SSIM/MS-SSIM, feature-space FID and Dice."""

import concurrent.futures
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from rich.console import Console
from scipy import linalg
from scipy.signal import correlate2d

from .config import EvalConfig
from .errors import ArtifactError, NumericalError, TrainingError, ValidationError
from .layers import (
    avg_pool,
    avg_pool_backward,
    conv_backward,
    conv_forward,
    cross_entropy,
    dense_backward,
    dense_forward,
    he_normal,
    silu,
    silu_backward,
)
from .numerics import load_tensor, make_rng, save_tensor
from .phantom import CLASS_IDS, DatasetSplit, stack
from .trainer import OptState, adamw_step

console = Console()

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
FEATURE_DIM = 64
COV_SHRINKAGE = 1e-6
EIG_TOLERANCE = 1e-6


@dataclass(frozen=True)
class SsimParams:
    """Gaussian-window SSIM constants."""

    win_size: int = 11
    win_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    weights: Tuple[float, ...] = MS_SSIM_WEIGHTS

    def window(self) -> np.ndarray:
        coords = np.arange(self.win_size, dtype=np.float64) - self.win_size // 2
        g = np.exp(-(coords**2) / (2.0 * self.win_sigma**2))
        g /= g.sum()
        return np.outer(g, g)


DEFAULT_SSIM = SsimParams()


def _check_pair(a: np.ndarray, b: np.ndarray, p: SsimParams) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < p.win_size:
        raise ValidationError(
            f"SSIM needs 2-D images of at least {p.win_size}x{p.win_size}, got {a.shape}"
        )
    return a, b


def ssim_components(
    a: np.ndarray, b: np.ndarray, p: SsimParams = DEFAULT_SSIM
) -> Tuple[float, float]:
    """Mean SSIM and mean contrast-structure term over all valid windows."""
    win = p.window()
    c1 = (p.k1 * p.data_range) ** 2
    c2 = (p.k2 * p.data_range) ** 2

    def filt(x: np.ndarray) -> np.ndarray:
        return correlate2d(x, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    cs_map = (2.0 * cov + c2) / (var_a + var_b + c2)
    ssim_map = (2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1) * cs_map
    return float(ssim_map.mean()), float(cs_map.mean())


def ssim(a: np.ndarray, b: np.ndarray, p: SsimParams = DEFAULT_SSIM) -> float:
    """Luminance x contrast x structure with Gaussian-windowed local statistics."""
    a, b = _check_pair(a, b, p)
    return ssim_components(a, b, p)[0]


def ms_ssim_levels(shape: Tuple[int, int], p: SsimParams = DEFAULT_SSIM) -> int:
    """Number of scales such that the coarsest is still at least one window wide."""
    size = min(shape)
    if size < p.win_size:
        raise ValidationError(f"MS-SSIM needs images of at least {p.win_size}px, got {shape}")
    levels = 1
    while levels < len(p.weights) and size // 2 >= p.win_size:
        size //= 2
        levels += 1
    return levels


@dataclass
class MsSsimResult:
    value: float
    levels: int
    weights: Tuple[float, ...]
    cs: List[float]
    ssim: List[float]


def _halve(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    return avg_pool(x[None, None, :h, :w], 2)[0, 0]


def ms_ssim_detail(a: np.ndarray, b: np.ndarray, p: SsimParams = DEFAULT_SSIM) -> MsSsimResult:
    """MS-SSIM with the per-scale terms it was built from.

    Weights are truncated to the usable scale count and renormalized;
    negative contrast-structure terms are clamped to 0 before weighting.
    """
    a, b = _check_pair(a, b, p)
    levels = ms_ssim_levels(a.shape, p)
    weights = np.asarray(p.weights[:levels], dtype=np.float64)
    weights = weights / weights.sum()
    cs_terms, ssim_terms = [], []
    for i in range(levels):
        s, cs = ssim_components(a, b, p)
        ssim_terms.append(s)
        cs_terms.append(cs)
        if i < levels - 1:
            a, b = _halve(a), _halve(b)
    factors = np.maximum([*cs_terms[:-1], ssim_terms[-1]], 0.0)
    value = float(np.prod(factors**weights))
    return MsSsimResult(value, levels, tuple(weights), cs_terms, ssim_terms)


def ms_ssim(a: np.ndarray, b: np.ndarray, p: SsimParams = DEFAULT_SSIM) -> float:
    return ms_ssim_detail(a, b, p).value


@dataclass
class PairScore:
    mean: float
    std: float
    n_pairs: int


def pair_msssim(
    set_a: Sequence[np.ndarray],
    set_b: Sequence[np.ndarray],
    n_pairs: int,
    rng: np.random.Generator,
    pairing: str = "random",
    workers: int = 1,
    p: SsimParams = DEFAULT_SSIM,
) -> PairScore:
    """Mean MS-SSIM over random pairs.

    When ``set_b`` is ``set_a`` the pairs are drawn within the set with two
    distinct members (intra-set diversity). ``pairing="identical"`` pairs
    index i with index i.
    """
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValidationError("pair_msssim needs two non-empty image sets")
    if n_pairs < 1:
        raise ValidationError(f"n_pairs must be >= 1, got {n_pairs}")
    if pairing == "identical":
        if len(set_a) != len(set_b):
            raise ValidationError("identical pairing needs sets of equal length")
        ia = rng.integers(0, len(set_a), size=n_pairs)
        ib = ia
    elif pairing == "random":
        ia = rng.integers(0, len(set_a), size=n_pairs)
        if set_b is set_a:
            if len(set_a) < 2:
                raise ValidationError("intra-set pairs need at least two images")
            ib = (ia + rng.integers(1, len(set_a), size=n_pairs)) % len(set_a)
        else:
            ib = rng.integers(0, len(set_b), size=n_pairs)
    else:
        raise ValidationError(f"unknown pairing '{pairing}'")

    def score(pair: Tuple[int, int]) -> float:
        return ms_ssim(set_a[pair[0]], set_b[pair[1]], p)

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        scores = np.asarray(list(pool.map(score, zip(ia.tolist(), ib.tolist()))))
    return PairScore(mean=float(scores.mean()), std=float(scores.std()), n_pairs=n_pairs)


@dataclass
class FeatureEncoder:
    """Small conv classifier over classes 1..5; the 64-d penultimate layer is the feature map."""

    weights: Dict[str, np.ndarray]
    size: int
    accuracy: float = 0.0
    history: List[float] = field(default_factory=list)

    def _forward(self, images: np.ndarray):
        w = self.weights
        x = (np.asarray(images, dtype=np.float64) - 0.5)[:, None]
        u1, c1 = conv_forward(x, w["conv1.weight"], w["conv1.bias"])
        p1 = avg_pool(silu(u1), 4)
        u2, c2 = conv_forward(p1, w["conv2.weight"], w["conv2.bias"])
        p2 = avg_pool(silu(u2), 4)
        flat = p2.reshape(p2.shape[0], -1)
        h_pre, _ = dense_forward(flat, w["fc1.weight"], w["fc1.bias"])
        h = silu(h_pre)
        logits, _ = dense_forward(h, w["fc2.weight"], w["fc2.bias"])
        cache = (u1, c1, u2, c2, p2.shape, flat, h_pre, h)
        return logits, h, cache

    def _backward(self, dlogits: np.ndarray, cache) -> Dict[str, np.ndarray]:
        w = self.weights
        u1, c1, u2, c2, p2_shape, flat, h_pre, h = cache
        g4 = dense_backward(dlogits, h, w["fc2.weight"])
        g3 = dense_backward(silu_backward(g4["x"], h_pre), flat, w["fc1.weight"])
        dp2 = g3["x"].reshape(p2_shape)
        du2 = silu_backward(avg_pool_backward(dp2, 4), u2)
        g2 = conv_backward(du2, c2, w["conv2.weight"])
        du1 = silu_backward(avg_pool_backward(g2["x"], 4), u1)
        g1 = conv_backward(du1, c1, w["conv1.weight"], need_input_grad=False)
        grads = {}
        for name, g in (("conv1", g1), ("conv2", g2), ("fc1", g3), ("fc2", g4)):
            grads[f"{name}.weight"] = g["W"]
            grads[f"{name}.bias"] = g["b"]
        return grads

    def features(self, images: np.ndarray, chunk: int = 128) -> np.ndarray:
        """phi(images): (n, 64) penultimate activations."""
        images = np.asarray(images)
        if images.ndim != 3 or images.shape[1:] != (self.size, self.size):
            raise ValidationError(
                f"encoder expects (n, {self.size}, {self.size}) images, got {images.shape}"
            )
        parts = [self._forward(images[i : i + chunk])[1] for i in range(0, len(images), chunk)]
        return np.concatenate(parts)

    def predict(self, images: np.ndarray, chunk: int = 128) -> np.ndarray:
        """Predicted class ids in 1..5."""
        images = np.asarray(images)
        parts = [
            np.argmax(self._forward(images[i : i + chunk])[0], axis=1)
            for i in range(0, len(images), chunk)
        ]
        return np.concatenate(parts) + 1


def _init_encoder(rng: np.random.Generator, size: int) -> Dict[str, np.ndarray]:
    if size % 16:
        raise ValidationError(f"feature encoder needs image size divisible by 16, got {size}")
    flat = 16 * (size // 16) ** 2
    shapes = {
        "conv1": (8, 9),
        "conv2": (16, 8 * 9),
        "fc1": (FEATURE_DIM, flat),
        "fc2": (len(CLASS_IDS), FEATURE_DIM),
    }
    weights = {}
    for name, shape in shapes.items():
        weights[f"{name}.weight"] = he_normal(rng, shape)
        weights[f"{name}.bias"] = np.zeros(shape[0])
    return weights


def balanced_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean per-class recall over the classes present in ``truth``."""
    recalls = [float(np.mean(pred[truth == c] == c)) for c in np.unique(truth)]
    return float(np.mean(recalls))


def train_feature_encoder(dataset: DatasetSplit, cfg: EvalConfig, seed: int = 0) -> FeatureEncoder:
    """Fit the encoder on the train split; held-out accuracy is measured on val."""
    images, _, classes = stack(dataset.train)
    size = images.shape[-1]
    enc = FeatureEncoder(weights=_init_encoder(make_rng(seed, "encoder", "init"), size), size=size)
    labels = classes - 1
    counts = np.bincount(labels, minlength=len(CLASS_IDS)).astype(np.float64)
    class_weights = np.where(counts > 0, counts.sum() / np.maximum(counts, 1.0), 0.0)
    state = OptState(weight_decay=0.0)

    for epoch in range(cfg.encoder_epochs):
        order = make_rng(seed, "encoder", "shuffle", epoch).permutation(len(images))
        losses = []
        for start in range(0, len(order), cfg.encoder_batch):
            idx = order[start : start + cfg.encoder_batch]
            logits, _, cache = enc._forward(images[idx])
            loss, dlogits = cross_entropy(logits, labels[idx], class_weights)
            adamw_step(state, enc.weights, enc._backward(dlogits, cache), cfg.encoder_lr)
            losses.append(loss)
        enc.history.append(float(np.mean(losses)))

    held_out = dataset.val or dataset.train
    v_images, _, v_classes = stack(held_out)
    enc.accuracy = balanced_accuracy(enc.predict(v_images), v_classes)
    if enc.accuracy < cfg.min_encoder_accuracy:
        raise TrainingError(
            f"feature encoder reached only {enc.accuracy:.2f} held-out accuracy "
            f"(need {cfg.min_encoder_accuracy:.2f}); features are unusable for FID"
        )
    console.print(
        f"✅ Feature encoder trained: held-out accuracy {enc.accuracy:.3f}", style="green"
    )
    return enc


def save_encoder(enc: FeatureEncoder, directory: Path) -> List[Path]:
    """One fp64 TNS1 file per weight plus ``encoder.yaml`` with size and accuracy."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, w in sorted(enc.weights.items()):
        path = directory / f"{name}.tns"
        save_tensor(path, w, "fp64")
        written.append(path)
    meta = {"size": enc.size, "accuracy": float(enc.accuracy), "weights": sorted(enc.weights)}
    with open(directory / "encoder.yaml", "w") as f:
        yaml.safe_dump(meta, f, sort_keys=False)
    return written + [directory / "encoder.yaml"]


def load_encoder(directory: Path) -> FeatureEncoder:
    directory = Path(directory)
    if not (directory / "encoder.yaml").exists():
        raise ArtifactError(f"no feature encoder in {directory}; run `tbad-synth evaluate` first")
    with open(directory / "encoder.yaml") as f:
        meta = yaml.safe_load(f)
    weights = {name: load_tensor(directory / f"{name}.tns") for name in meta["weights"]}
    return FeatureEncoder(weights=weights, size=int(meta["size"]), accuracy=meta["accuracy"])


def _psd_sqrt(cov: np.ndarray, what: str) -> Tuple[np.ndarray, np.ndarray]:
    """Eigen square root of a symmetric matrix; returns (sqrt matrix, sqrt eigenvalues)."""
    vals, vecs = linalg.eigh((cov + cov.T) / 2.0)
    if vals.min() < -EIG_TOLERANCE:
        raise NumericalError(
            f"{what} has eigenvalue {vals.min():.3g} < -{EIG_TOLERANCE:g}; not a covariance"
        )
    roots = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * roots) @ vecs.T, roots


def frechet_distance(
    mu1: np.ndarray, cov1: np.ndarray, mu2: np.ndarray, cov2: np.ndarray
) -> float:
    """||mu1 - mu2||^2 + Tr(cov1 + cov2 - 2 (cov1^1/2 cov2 cov1^1/2)^1/2)."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    d = mu1.shape[0]
    if mu2.shape != (d,) or cov1.shape != (d, d) or cov2.shape != (d, d):
        raise ValidationError(
            f"mismatched Gaussian shapes: {mu1.shape}, {cov1.shape}, {mu2.shape}, {cov2.shape}"
        )
    root1, _ = _psd_sqrt(cov1, "cov1")
    _psd_sqrt(cov2, "cov2")
    _, covmean_roots = _psd_sqrt(root1 @ cov2 @ root1, "cov1^1/2 cov2 cov1^1/2")
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * covmean_roots.sum())
    return max(value, 0.0)


def gaussian_stats(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and shrunk covariance of feature rows."""
    mu = features.mean(axis=0)
    cov = np.cov(features, rowvar=False) + COV_SHRINKAGE * np.eye(features.shape[1])
    return mu, cov


def fid(
    real_images: np.ndarray,
    synth_images: np.ndarray,
    enc: FeatureEncoder,
    n: int = 250,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Frechet distance between encoder features of ``n`` real and ``n`` synthetic images."""
    if n < 2:
        raise ValidationError(f"FID needs n >= 2, got {n}")
    if n > len(real_images) or n > len(synth_images):
        raise ValidationError(
            f"FID n={n} exceeds set sizes ({len(real_images)} real, {len(synth_images)} synthetic)"
        )
    if n <= FEATURE_DIM:
        console.print(
            f"⚠️  FID with n={n} <= feature dim {FEATURE_DIM}: covariance is rank-deficient",
            style="yellow",
        )
    rng = rng if rng is not None else make_rng(0, "fid")

    def subset(images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        if n == len(images):
            return images
        return images[np.sort(rng.choice(len(images), n, replace=False))]

    mu1, cov1 = gaussian_stats(enc.features(subset(real_images)))
    mu2, cov2 = gaussian_stats(enc.features(subset(synth_images)))
    return frechet_distance(mu1, cov1, mu2, cov2)


@dataclass
class DiceStats:
    """Counts pairs where both masks lacked the label (scored 1.0)."""

    empty_pairs: int = 0


def dice(
    pred_mask: np.ndarray, gt_mask: np.ndarray, label: int, stats: Optional[DiceStats] = None
) -> float:
    """2|A n B| / (|A| + |B|) for one label; 1.0 when the label is absent from both."""
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValidationError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    a = pred_mask == label
    b = gt_mask == label
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        if stats is not None:
            stats.empty_pairs += 1
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def classifier_accuracy(enc: FeatureEncoder, images: np.ndarray, class_id: int) -> float:
    """Fraction of ``images`` the encoder assigns to ``class_id``."""
    return float(np.mean(enc.predict(images) == class_id))
