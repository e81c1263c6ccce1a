"""Exact t-SNE of encoder features and MS-SSIM nearest-real matching."""

import concurrent.futures
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np
from rich.console import Console

from .config import TsneConfig
from .errors import ValidationError
from .metrics import ms_ssim
from .numerics import make_rng

console = Console()

PERPLEXITY_TOL = 1e-5
PERPLEXITY_ITERS = 50


@dataclass
class PerplexityResult:
    sigma: float
    probs: np.ndarray
    perplexity: float
    converged: bool


def _row_probs(sq_dists: np.ndarray, beta: float):
    logits = -(sq_dists - sq_dists.min()) * beta
    p = np.exp(logits)
    p /= p.sum()
    nz = p[p > 0]
    entropy = float(-(nz * np.log2(nz)).sum())
    return p, 2.0**entropy


def perplexity_search(
    distances_row: np.ndarray, target_perplexity: float, warn: bool = True
) -> PerplexityResult:
    """Binary search the Gaussian width so that 2^H(P_i) hits the target.

    ``distances_row`` holds squared distances to the other points (self
    excluded). Without convergence the bracket midpoint is used.
    """
    row = np.asarray(distances_row, dtype=np.float64)
    row = row[np.isfinite(row)]
    if row.size < 2:
        raise ValidationError("perplexity search needs at least two finite distances")
    if target_perplexity <= 0:
        raise ValidationError(f"perplexity must be positive, got {target_perplexity}")

    beta, lo, hi = 1.0, 0.0, np.inf
    probs, perp = _row_probs(row, beta)
    converged = False
    for _ in range(PERPLEXITY_ITERS):
        probs, perp = _row_probs(row, beta)
        if abs(perp - target_perplexity) < PERPLEXITY_TOL:
            converged = True
            break
        if perp > target_perplexity:
            lo = beta
            beta = beta * 2.0 if np.isinf(hi) else (beta + hi) / 2.0
        else:
            hi = beta
            beta = (beta + lo) / 2.0
    if not converged:
        if np.isfinite(hi):
            beta = (lo + hi) / 2.0
        probs, perp = _row_probs(row, beta)
        if warn:
            console.print(
                f"⚠️  perplexity search stopped at {perp:.4f} (target {target_perplexity:g})",
                style="yellow",
            )
    sigma = float(np.sqrt(1.0 / (2.0 * beta))) if beta > 0 else float("inf")
    return PerplexityResult(sigma=sigma, probs=probs, perplexity=perp, converged=converged)


def squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_probabilities(features: np.ndarray, perplexity: float) -> np.ndarray:
    """Row-stochastic P_{j|i} with a zero diagonal."""
    d = squared_distances(np.asarray(features, dtype=np.float64))
    n = d.shape[0]
    P = np.zeros((n, n))
    misses = 0
    for i in range(n):
        others = np.concatenate([np.arange(i), np.arange(i + 1, n)])
        res = perplexity_search(d[i, others], perplexity, warn=False)
        misses += not res.converged
        P[i, others] = res.probs
    if misses:
        console.print(
            f"⚠️  perplexity search did not converge for {misses} point(s)", style="yellow"
        )
    return P


def joint_probabilities(features: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized P = (P_{j|i} + P_{i|j}) / 2n; sums to 1."""
    P = conditional_probabilities(features, perplexity)
    return (P + P.T) / (2.0 * P.shape[0])


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), 1e-300)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne_gradient(P: np.ndarray, Y: np.ndarray):
    """KL(P || Q) and dKL/dY = 4 sum_j (p_ij - q_ij)(y_i - y_j)(1 + |y_i - y_j|^2)^-1."""
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = num / num.sum()
    PQ = (P - Q) * num
    grad = 4.0 * (PQ.sum(axis=1)[:, None] * Y - PQ @ Y)
    mask = P > 0
    kl = float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))
    return kl, grad


@dataclass
class TsneResult:
    coords: np.ndarray
    kl_initial: float
    kl_final: float
    perplexity: float
    kl_history: List[float] = field(default_factory=list)


def tsne(features: np.ndarray, cfg: TsneConfig, seed: int = 0) -> TsneResult:
    """Exact t-SNE with early exaggeration, momentum switch and adaptive gains."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 2 or n < 10:
        raise ValidationError(f"t-SNE needs at least 10 feature rows, got shape {x.shape}")
    if np.allclose(x, x[0]):
        raise ValidationError("t-SNE input is degenerate: all feature vectors are identical")

    perplexity = float(cfg.perplexity)
    limit = (n - 1) / 3.0
    if perplexity >= limit:
        perplexity = max(1.0, limit - 1.0)
        console.print(
            f"⚠️  perplexity {cfg.perplexity:g} too large for n={n}; using {perplexity:.3g}",
            style="yellow",
        )

    P = joint_probabilities(x, perplexity)
    rng = make_rng(seed, "tsne")
    Y = rng.standard_normal((n, cfg.dim)) * 1e-4
    kl_initial = kl_divergence(P, Y)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []

    for it in range(cfg.iterations):
        P_eff = P * cfg.exaggeration if it < cfg.exaggeration_iters else P
        momentum = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        kl, grad = tsne_gradient(P_eff, Y)
        same_sign = (grad > 0) == (update > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - cfg.learning_rate * gains * grad
        Y = Y + update
        Y = Y - Y.mean(axis=0)
        if it % 50 == 0 or it == cfg.iterations - 1:
            history.append(kl_divergence(P, Y))

    kl_final = kl_divergence(P, Y)
    if kl_final >= kl_initial:
        console.print(
            f"⚠️  t-SNE KL did not decrease ({kl_initial:.4f} → {kl_final:.4f})",
            style="yellow",
        )
    return TsneResult(
        coords=Y, kl_initial=kl_initial, kl_final=kl_final, perplexity=perplexity,
        kl_history=history,
    )


def nearest_real(
    synth_images: Sequence[np.ndarray],
    real_images: Sequence[np.ndarray],
    k: int = 1,
    workers: int = 1,
) -> np.ndarray:
    """For each synthetic image, the indices of its ``k`` most MS-SSIM-similar real images.

    Ties go to the lowest real index.
    """
    if len(synth_images) == 0 or len(real_images) == 0:
        raise ValidationError("nearest_real needs non-empty synthetic and real sets")
    k = max(1, min(k, len(real_images)))

    def best(img: np.ndarray) -> np.ndarray:
        scores = np.array([ms_ssim(img, real) for real in real_images])
        return np.argsort(-scores, kind="stable")[:k]

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return np.stack(list(pool.map(best, synth_images)))


def write_embedding_csv(
    path: Path,
    coords: np.ndarray,
    sets: Sequence[str],
    classes: Sequence[int],
    ids: Sequence[int] = None,
) -> None:
    """Rows ``id,set,class,x,y`` (set is ``real`` or ``synth``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = ids if ids is not None else range(len(coords))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "set", "class", "x", "y"])
        for i, s, c, (x, y) in zip(ids, sets, classes, coords[:, :2]):
            writer.writerow([i, s, c, repr(float(x)), repr(float(y))])
