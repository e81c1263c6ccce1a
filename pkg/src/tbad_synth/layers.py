"""Array layers with explicit backward passes.

Shared by the denoiser, the feature encoder and the segmentation probe. All
functions are dtype-preserving so fp64 verification runs stay in fp64.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


@dataclass
class LowRank:
    """Low-rank delta (alpha / r) * B @ A attached to a dense weight."""

    A: np.ndarray  # r x in
    B: np.ndarray  # out x r
    alpha: float

    @property
    def rank(self) -> int:
        return int(self.A.shape[0])

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def silu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return dy * (s + x * s * (1.0 - s))


def dense_forward(
    x: np.ndarray,
    W: np.ndarray,
    b: Optional[np.ndarray],
    lora: Optional[LowRank] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """y = x W^T + b (+ scale * (x A^T) B^T); returns y and the adapter input."""
    y = x @ W.T
    if b is not None:
        y = y + b
    ax = None
    if lora is not None:
        ax = x @ lora.A.T
        y = y + lora.scale * (ax @ lora.B.T)
    return y, ax


def dense_backward(
    dy: np.ndarray,
    x: np.ndarray,
    W: np.ndarray,
    lora: Optional[LowRank] = None,
    ax: Optional[np.ndarray] = None,
    need_input_grad: bool = True,
) -> dict:
    """Gradients of :func:`dense_forward` keyed ``x``, ``W``, ``b``, ``A``, ``B``."""
    grads = {"W": dy.T @ x, "b": dy.sum(axis=0)}
    dx = dy @ W if need_input_grad else None
    if lora is not None:
        grads["B"] = lora.scale * (dy.T @ ax)
        g = dy @ lora.B
        grads["A"] = lora.scale * (g.T @ x)
        if need_input_grad:
            dx = dx + lora.scale * (g @ lora.A)
    grads["x"] = dx
    return grads


def im2col(x: np.ndarray, k: int = 3) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*k*k) patches for a same-padded k x k conv."""
    B, C, H, W = x.shape
    p = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)


def col2im(cols: np.ndarray, shape: Tuple[int, int, int, int], k: int = 3) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    B, C, H, W = shape
    p = k // 2
    patches = cols.reshape(B, H, W, C, k, k)
    out = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + H, j : j + W] += patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out[:, :, p : p + H, p : p + W]


def conv_forward(
    x: np.ndarray,
    W: np.ndarray,
    b: Optional[np.ndarray],
    lora: Optional[LowRank] = None,
    k: int = 3,
) -> Tuple[np.ndarray, dict]:
    """Same-padded stride-1 conv with the kernel stored as a (out, in*k*k) matrix."""
    B, _, H, Wd = x.shape
    cols = im2col(x, k)
    y, ax = dense_forward(cols, W, b, lora)
    out = y.reshape(B, H, Wd, -1).transpose(0, 3, 1, 2)
    return out, {"cols": cols, "ax": ax, "shape": x.shape}


def conv_backward(
    dy: np.ndarray,
    cache: dict,
    W: np.ndarray,
    lora: Optional[LowRank] = None,
    k: int = 3,
    need_input_grad: bool = True,
) -> dict:
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, dy.shape[1])
    grads = dense_backward(dy_mat, cache["cols"], W, lora, cache["ax"], need_input_grad)
    if need_input_grad:
        grads["x"] = col2im(grads["x"], cache["shape"], k)
    return grads


def avg_pool(x: np.ndarray, f: int) -> np.ndarray:
    B, C, H, W = x.shape
    return x.reshape(B, C, H // f, f, W // f, f).mean(axis=(3, 5))


def avg_pool_backward(dy: np.ndarray, f: int) -> np.ndarray:
    return np.repeat(np.repeat(dy, f, axis=2), f, axis=3) / (f * f)


def upsample(x: np.ndarray, f: int) -> np.ndarray:
    return np.repeat(np.repeat(x, f, axis=2), f, axis=3)


def upsample_backward(dy: np.ndarray, f: int) -> np.ndarray:
    B, C, H, W = dy.shape
    return dy.reshape(B, C, H // f, f, W // f, f).sum(axis=(3, 5))


def nearest_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """One-hot (n_out, n_in) matrix mapping output rows to source rows."""
    src = (np.arange(n_out) * n_in) // n_out
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), src] = 1.0
    return m


def sinusoidal_embedding(t: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    """Interleaved (sin, cos) features; t = 0 maps to (0, 1, 0, 1, ...)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t * freqs[None, :]
    emb = np.empty((t.shape[0], 2 * half))
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb.astype(dtype)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(
    logits: np.ndarray, labels: np.ndarray, weights: Optional[np.ndarray] = None
) -> Tuple[float, np.ndarray]:
    """Mean (optionally class-weighted) cross-entropy over rows of ``logits``."""
    n = logits.shape[0]
    probs = softmax(logits)
    w = np.ones(n, dtype=logits.dtype) if weights is None else weights[labels].astype(logits.dtype)
    norm = w.sum()
    picked = probs[np.arange(n), labels]
    loss = float(-(w * np.log(np.maximum(picked, 1e-300))).sum() / norm)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / norm)[:, None]
    return loss, grad


def he_normal(rng: np.random.Generator, shape: Tuple[int, int], dtype=np.float64) -> np.ndarray:
    """He-scaled Gaussian for a (fan_out, fan_in) matrix."""
    fan_in = shape[1]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
