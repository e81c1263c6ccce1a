"""Segmentation probe: a small encoder-decoder trained on real phantoms.

It scores held-out real phantoms with Dice and checks whether synthetic
images of each class show the lumen structures that class should contain.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console

from .config import SegConfig
from .errors import TrainingError, ValidationError
from .layers import (
    avg_pool,
    avg_pool_backward,
    conv_backward,
    conv_forward,
    cross_entropy,
    he_normal,
    silu,
    silu_backward,
    softmax,
    upsample,
    upsample_backward,
)
from .metrics import DiceStats, dice
from .numerics import make_rng
from .phantom import (
    ALLOWED_LABELS,
    CLASS_IDS,
    CLASS_LABELS,
    LABEL_NAMES,
    DatasetSplit,
    PhantomSample,
    stack,
    unstack,
)
from .trainer import OptState, adamw_step

console = Console()

N_LABELS = 4
LUMEN_LABELS = (1, 2, 3)

# Overlay colours: TL green, FL red, FLT blue
OVERLAY_COLORS = {1: (0, 255, 0), 2: (255, 0, 0), 3: (0, 0, 255)}


@dataclass
class SegParams:
    """Three-level encoder-decoder with skip connections."""

    weights: Dict[str, np.ndarray]
    widths: Tuple[int, int, int]


def _layer_shapes(widths: Tuple[int, int, int]) -> Dict[str, Tuple[int, int]]:
    w1, w2, w3 = widths
    return {
        "enc1": (w1, 1 * 9),
        "enc2": (w2, w1 * 9),
        "mid": (w3, w2 * 9),
        "dec2": (w2, (w3 + w2) * 9),
        "dec1": (w1, (w2 + w1) * 9),
        "head": (N_LABELS, w1 * 9),
    }


def init_segnet(rng: np.random.Generator, widths: Sequence[int]) -> SegParams:
    widths = tuple(int(w) for w in widths)
    if len(widths) != 3 or min(widths) < 1:
        raise ValidationError(f"segmentation widths must be three positive ints, got {widths}")
    weights = {}
    for name, shape in _layer_shapes(widths).items():
        weights[f"{name}.weight"] = he_normal(rng, shape)
        weights[f"{name}.bias"] = np.zeros(shape[0])
    return SegParams(weights=weights, widths=widths)


def _forward(p: SegParams, images: np.ndarray):
    w = p.weights
    x = (np.asarray(images, dtype=np.float64) - 0.5)[:, None]
    if x.shape[-1] % 4 or x.shape[-2] % 4:
        raise ValidationError(f"segmentation input must be divisible by 4, got {x.shape[-2:]}")
    cache = {}

    def conv(name, inp):
        out, c = conv_forward(inp, w[f"{name}.weight"], w[f"{name}.bias"])
        cache[name] = c
        return out

    u_e1 = conv("enc1", x)
    e1 = silu(u_e1)
    u_e2 = conv("enc2", avg_pool(e1, 2))
    e2 = silu(u_e2)
    u_mid = conv("mid", avg_pool(e2, 2))
    mid = silu(u_mid)
    u_d2 = conv("dec2", np.concatenate([upsample(mid, 2), e2], axis=1))
    d2 = silu(u_d2)
    u_d1 = conv("dec1", np.concatenate([upsample(d2, 2), e1], axis=1))
    d1 = silu(u_d1)
    logits = conv("head", d1)
    cache.update(u_e1=u_e1, u_e2=u_e2, u_mid=u_mid, u_d2=u_d2, u_d1=u_d1)
    return logits, cache


def _backward(p: SegParams, cache: dict, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
    w = p.weights
    _, w2, w3 = p.widths
    grads: Dict[str, np.ndarray] = {}

    def conv_back(name, dy, need_input=True):
        g = conv_backward(dy, cache[name], w[f"{name}.weight"], need_input_grad=need_input)
        grads[f"{name}.weight"] = g["W"]
        grads[f"{name}.bias"] = g["b"]
        return g["x"]

    dd1 = conv_back("head", dlogits)
    dcat1 = conv_back("dec1", silu_backward(dd1, cache["u_d1"]))
    dd2 = upsample_backward(dcat1[:, :w2], 2)
    de1 = dcat1[:, w2:]
    dcat2 = conv_back("dec2", silu_backward(dd2, cache["u_d2"]))
    dmid = upsample_backward(dcat2[:, :w3], 2)
    de2 = dcat2[:, w3:]
    dp2 = conv_back("mid", silu_backward(dmid, cache["u_mid"]))
    de2 = de2 + avg_pool_backward(dp2, 2)
    dp1 = conv_back("enc2", silu_backward(de2, cache["u_e2"]))
    de1 = de1 + avg_pool_backward(dp1, 2)
    conv_back("enc1", silu_backward(de1, cache["u_e1"]), need_input=False)
    return grads


def predict_proba(p: SegParams, images: np.ndarray) -> np.ndarray:
    """Per-pixel class distribution, shape (n, 4, H, W)."""
    logits, _ = _forward(p, images)
    return softmax(logits, axis=1)


def segment(p: SegParams, image: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Per-pixel argmax labels in {0, 1, 2, 3}; accepts (H, W) or (n, H, W)."""
    image = np.asarray(image)
    single = image.ndim == 2
    batch = image[None] if single else image
    parts = [
        np.argmax(_forward(p, batch[i : i + chunk])[0], axis=1).astype(np.uint8)
        for i in range(0, len(batch), chunk)
    ]
    masks = np.concatenate(parts)
    return masks[0] if single else masks


def _label_weights(masks: np.ndarray) -> np.ndarray:
    counts = np.bincount(masks.ravel(), minlength=N_LABELS).astype(np.float64)
    weights = np.where(counts > 0, counts.sum() / (N_LABELS * np.maximum(counts, 1.0)), 0.0)
    return np.sqrt(weights)


def per_label_dice(
    pred: np.ndarray, gt: np.ndarray, stats: Optional[DiceStats] = None
) -> Dict[int, float]:
    """Mean Dice per lumen label over images whose ground truth contains the label.

    Labels absent from every ground-truth mask report NaN. Pairs where both masks lack
    the label score 1.0 and are counted in ``stats`` but stay out of the mean.
    """
    stats = stats if stats is not None else DiceStats()
    out: Dict[int, float] = {}
    for label in LUMEN_LABELS:
        scores = []
        for pm, gm in zip(pred, gt):
            score = dice(pm, gm, label, stats)
            if np.any(gm == label):
                scores.append(score)
        out[label] = float(np.mean(scores)) if scores else float("nan")
    return out


@dataclass
class SegResult:
    params: SegParams
    dice: Dict[int, float]
    history: List[float] = field(default_factory=list)
    n_train: int = 0
    empty_pairs: int = 0


def train_segnet(
    dataset: DatasetSplit,
    cfg: SegConfig,
    seed: int = 0,
    extra: Optional[Sequence[PhantomSample]] = None,
) -> SegResult:
    """Per-pixel cross-entropy training on the real train split; Dice per label on test.

    ``extra`` appends pseudo-labelled synthetic phantoms to the training set.
    """
    test_samples = dataset.test
    samples = list(dataset.train) + list(extra or [])
    if not samples:
        raise ValidationError("train_segnet needs training phantoms")
    images, masks, _ = stack(samples)
    params = init_segnet(make_rng(seed, "segnet", "init"), cfg.widths)
    weights = _label_weights(masks)
    state = OptState(weight_decay=0.0)
    history: List[float] = []
    initial: Optional[float] = None
    over = 0

    for epoch in range(cfg.epochs):
        order = make_rng(seed, "segnet", "shuffle", epoch).permutation(len(images))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits, cache = _forward(params, images[idx])
            n, _, h, w = logits.shape
            flat = logits.transpose(0, 2, 3, 1).reshape(-1, N_LABELS)
            loss, dflat = cross_entropy(flat, masks[idx].reshape(-1).astype(np.int64), weights)
            if not np.isfinite(loss):
                raise TrainingError(f"segmentation loss became non-finite in epoch {epoch + 1}")
            dlogits = dflat.reshape(n, h, w, N_LABELS).transpose(0, 3, 1, 2)
            adamw_step(state, params.weights, _backward(params, cache, dlogits), cfg.lr)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        initial = history[0] if initial is None else initial
        over = over + 1 if history[-1] > 10.0 * initial else 0
        if over >= 3:
            raise TrainingError(
                f"segmentation training diverged: loss {history[-1]:.4g} vs initial {initial:.4g}"
            )

    scores: Dict[int, float] = {label: float("nan") for label in LUMEN_LABELS}
    stats = DiceStats()
    if test_samples:
        t_images, t_masks, _ = stack(test_samples)
        scores = per_label_dice(segment(params, t_images), t_masks, stats)
    summary = ", ".join(f"{LABEL_NAMES[k]} {v:.3f}" for k, v in scores.items())
    console.print(f"✅ Segmentation probe trained: Dice {summary}", style="green")
    if stats.empty_pairs:
        console.print(
            f"ℹ️  Dice: {stats.empty_pairs} test mask pair(s) lacked a label on both sides; "
            "scored 1.0 and left out of the means",
            style="dim",
        )
    return SegResult(
        params=params,
        dice=scores,
        history=history,
        n_train=len(samples),
        empty_pairs=stats.empty_pairs,
    )


@dataclass
class ClassDetection:
    """Detection fractions for one requested class."""

    class_id: int
    n: int
    detected: Dict[int, float]
    consistent: float
    any_lumen: float


@dataclass
class ProbeReport:
    detect_px: int
    classes: List[ClassDetection]

    def rows(self) -> List[Dict[str, object]]:
        out = []
        for c in self.classes:
            row = {"class": c.class_id, "n": c.n}
            row.update({LABEL_NAMES[k]: v for k, v in c.detected.items()})
            row.update({"consistent": c.consistent, "any_lumen": c.any_lumen})
            out.append(row)
        return out


def detected_labels(mask: np.ndarray, detect_px: int) -> set:
    return {label for label in LUMEN_LABELS if int(np.sum(mask == label)) >= detect_px}


def utility_probe(
    segnet: SegParams, synth_by_class: Dict[int, np.ndarray], detect_px: int = 25
) -> ProbeReport:
    """Per class, how often each lumen label is found (>= ``detect_px`` pixels).

    A sample is consistent when every defining label of its class is found and
    nothing outside the class's allowed labels is.
    """
    if not synth_by_class:
        raise ValidationError("utility_probe needs at least one class batch")
    rows = []
    for class_id in sorted(synth_by_class):
        if class_id not in CLASS_IDS:
            raise ValidationError(f"unknown class {class_id}")
        images = np.asarray(synth_by_class[class_id])
        if images.size == 0 or len(images) == 0:
            raise ValidationError(f"class {class_id} batch is empty")
        found = [detected_labels(m, detect_px) for m in segment(segnet, images)]
        need, allowed = CLASS_LABELS[class_id], ALLOWED_LABELS[class_id]
        rows.append(
            ClassDetection(
                class_id=class_id,
                n=len(images),
                detected={lab: float(np.mean([lab in f for f in found])) for lab in LUMEN_LABELS},
                consistent=float(np.mean([need <= f and f <= allowed for f in found])),
                any_lumen=float(np.mean([bool(f) for f in found])),
            )
        )
    return ProbeReport(detect_px=detect_px, classes=rows)


def pseudo_label(
    segnet: SegParams, images: np.ndarray, class_ids: Sequence[int]
) -> List[PhantomSample]:
    """Wrap synthetic images with the segmenter's masks as training phantoms."""
    images = np.asarray(images, dtype=np.float64)
    return unstack(images, segment(segnet, images), np.asarray(class_ids))


def overlay_rgb(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Grayscale image with labelled pixels tinted; uint8 (H, W, 3)."""
    gray = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for label, color in OVERLAY_COLORS.items():
        sel = mask == label
        rgb[sel] = (1.0 - alpha) * rgb[sel] + alpha * np.asarray(color, dtype=np.float64)
    return np.rint(rgb).astype(np.uint8)
