"""Conditional noise-prediction network with explicit forward/backward passes.

Architecture (all dense maps optionally carry low-rank adapters)::

    z      = [sinusoid(t), class_embedding[token]]
    m      = mlp2(silu(mlp1(z)))            -> channel shift | coarse template
    a1     = silu(conv1(x) + shift)
    eps    = conv2(a1) + nearest_upsample(template)

The convolutional path denoises locally; the template head gives every
timestep/class pair a global layout. Both are linear in their weights, so the
adapter identity W + (alpha / r) B A holds layer by layer.
"""

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .config import ArchConfig
from .errors import StaleCacheError, ValidationError
from .layers import (
    LowRank,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    he_normal,
    nearest_matrix,
    silu,
    silu_backward,
    sinusoidal_embedding,
)
from .numerics import make_rng

N_TOKENS = 6
ADAPTED_LAYERS = ("conv1", "conv2", "mlp1", "mlp2")
EMBEDDING = "class_embedding"


@dataclass
class ModelParams:
    """Base weights, optional adapters and the conditioning table."""

    arch: ArchConfig
    weights: Dict[str, np.ndarray]
    adapters: Dict[str, LowRank] = field(default_factory=dict)
    frozen_base: bool = False
    revision: int = 0

    @property
    def dtype(self) -> np.dtype:
        return self.weights[EMBEDDING].dtype

    def trainable(self) -> Dict[str, np.ndarray]:
        """Arrays the optimizer may update, keyed by gradient name."""
        out: Dict[str, np.ndarray] = {}
        if not self.frozen_base:
            out.update(self.weights)
        else:
            out[EMBEDDING] = self.weights[EMBEDDING]
        for layer, lora in self.adapters.items():
            out[f"{layer}.lora_A"] = lora.A
            out[f"{layer}.lora_B"] = lora.B
        return out

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


@dataclass
class ForwardCache:
    """Activations kept for :func:`backward`."""

    params_id: int
    revision: int
    tokens: np.ndarray
    z: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray
    ax_mlp1: Optional[np.ndarray]
    ax_mlp2: Optional[np.ndarray]
    conv1: dict
    conv2: dict
    u1: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    shape: Tuple[int, ...]


def layer_shapes(arch: ArchConfig) -> Dict[str, Tuple[int, int]]:
    """(out, in) matrix shape of every adapted layer."""
    c, g = arch.width, arch.template_grid
    return {
        "conv1": (c, 9),
        "conv2": (1, c * 9),
        "mlp1": (arch.hidden, arch.time_dim + arch.embed_dim),
        "mlp2": (c + g * g, arch.hidden),
    }


def init_params(
    rng: np.random.Generator, arch: ArchConfig, dtype: np.dtype = np.float32
) -> ModelParams:
    """He-scaled Gaussian weights, zero biases, unit-Gaussian class embeddings."""
    for name in ("width", "time_dim", "embed_dim", "hidden", "template_grid"):
        if getattr(arch, name) < 1:
            raise ValidationError(f"arch.{name} must be >= 1")
    weights: Dict[str, np.ndarray] = {}
    for layer, shape in layer_shapes(arch).items():
        weights[f"{layer}.weight"] = he_normal(rng, shape, dtype)
        weights[f"{layer}.bias"] = np.zeros(shape[0], dtype=dtype)
    weights[EMBEDDING] = rng.standard_normal((N_TOKENS, arch.embed_dim)).astype(dtype)
    return ModelParams(arch=arch, weights=weights)


def zero_params(arch: ArchConfig, dtype: np.dtype = np.float64) -> ModelParams:
    params = init_params(make_rng(0, "zero"), arch, dtype)
    for value in params.weights.values():
        value[...] = 0
    return params


def add_adapters(
    params: ModelParams,
    rng: np.random.Generator,
    rank: int = 4,
    alpha: float = 4.0,
    layers: Sequence[str] = ADAPTED_LAYERS,
) -> ModelParams:
    """Copy of ``params`` with fresh adapters (B = 0) and the base frozen."""
    if rank < 1:
        raise ValidationError(f"adapter rank must be >= 1, got {rank}")
    out = params.copy()
    shapes = layer_shapes(params.arch)
    for layer in layers:
        n_out, n_in = shapes[layer]
        out.adapters[layer] = LowRank(
            A=he_normal(rng, (rank, n_in), params.dtype),
            B=np.zeros((n_out, rank), dtype=params.dtype),
            alpha=float(alpha),
        )
    out.frozen_base = True
    return out


def merge_adapters(params: ModelParams) -> ModelParams:
    """Fold every adapter into its base weight: W <- W + (alpha / r) B A."""
    out = params.copy()
    for layer, lora in out.adapters.items():
        key = f"{layer}.weight"
        out.weights[key] = (out.weights[key] + lora.scale * (lora.B @ lora.A)).astype(
            params.dtype
        )
    out.adapters = {}
    out.frozen_base = False
    return out


def base_fingerprint(params: ModelParams) -> str:
    """SHA-256 over the base weights (not adapters)."""
    digest = hashlib.sha256()
    for name in sorted(params.weights):
        if name == EMBEDDING:
            continue
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(params.weights[name]).tobytes())
    return digest.hexdigest()


def _as_batch(x: np.ndarray, t, token) -> Tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3:
        raise ValidationError(f"expected (H, W) or (B, H, W) input, got shape {x.shape}")
    n = x.shape[0]
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n, float(t))
    tokens = np.full(n, int(token)) if np.ndim(token) == 0 else np.asarray(token, dtype=np.int64)
    if t.shape != (n,) or tokens.shape != (n,):
        raise ValidationError(
            f"batch of {n} needs {n} timesteps and tokens, got {t.shape} and {tokens.shape}"
        )
    if np.any(tokens < 0) or np.any(tokens >= N_TOKENS):
        raise ValidationError(f"tokens must be in 0..{N_TOKENS - 1}, got {tokens}")
    if np.any(t < 0):
        raise ValidationError("timesteps must be non-negative")
    return x, t, tokens, single


def forward(
    params: ModelParams, x_t: np.ndarray, t, token
) -> Tuple[np.ndarray, ForwardCache]:
    """Predict the noise in ``x_t``; returns the prediction and a cache for backward."""
    x, t, tokens, single = _as_batch(x_t, t, token)
    w, arch, ad = params.weights, params.arch, params.adapters
    dtype = params.dtype
    n, height, width = x.shape
    c, g = arch.width, arch.template_grid

    z = np.concatenate(
        [sinusoidal_embedding(t, arch.time_dim, dtype), w[EMBEDDING][tokens]], axis=1
    )
    h_pre, ax1 = dense_forward(z, w["mlp1.weight"], w["mlp1.bias"], ad.get("mlp1"))
    h = silu(h_pre)
    m, ax2 = dense_forward(h, w["mlp2.weight"], w["mlp2.bias"], ad.get("mlp2"))
    shift, template = m[:, :c], m[:, c:].reshape(n, g, g)

    u1, c1 = conv_forward(
        x.reshape(n, 1, height, width).astype(dtype),
        w["conv1.weight"], w["conv1.bias"], ad.get("conv1"),
    )
    u1 = u1 + shift[:, :, None, None]
    a1 = silu(u1)
    u2, c2 = conv_forward(a1, w["conv2.weight"], w["conv2.bias"], ad.get("conv2"))

    rows = nearest_matrix(height, g, dtype)
    cols = nearest_matrix(width, g, dtype)
    out = u2[:, 0] + rows @ template @ cols.T

    cache = ForwardCache(
        params_id=id(params), revision=params.revision, tokens=tokens, z=z,
        h_pre=h_pre, h=h, ax_mlp1=ax1, ax_mlp2=ax2, conv1=c1, conv2=c2, u1=u1,
        rows=rows, cols=cols, shape=x.shape,
    )
    return (out[0] if single else out), cache


def backward(
    params: ModelParams, cache: ForwardCache, grad_out: np.ndarray
) -> Dict[str, np.ndarray]:
    """Reverse-mode gradients for every entry of ``params.trainable()``."""
    if cache.params_id != id(params) or cache.revision != params.revision:
        raise StaleCacheError("cache was produced by a different parameter revision")
    grad_out = np.asarray(grad_out, dtype=params.dtype)
    if grad_out.ndim == 2:
        grad_out = grad_out[None]
    if grad_out.shape != cache.shape:
        raise ValidationError(f"grad_out shape {grad_out.shape} != output {cache.shape}")

    w, arch, ad = params.weights, params.arch, params.adapters
    n = grad_out.shape[0]
    c, g = arch.width, arch.template_grid
    frozen = params.frozen_base

    d_template = cache.rows.T @ grad_out @ cache.cols
    g2 = conv_backward(grad_out[:, None], cache.conv2, w["conv2.weight"], ad.get("conv2"))
    du1 = silu_backward(g2["x"], cache.u1)
    g1 = conv_backward(
        du1, cache.conv1, w["conv1.weight"], ad.get("conv1"), need_input_grad=False
    )
    dm = np.concatenate([du1.sum(axis=(2, 3)), d_template.reshape(n, g * g)], axis=1)
    gm2 = dense_backward(dm, cache.h, w["mlp2.weight"], ad.get("mlp2"), cache.ax_mlp2)
    dh_pre = silu_backward(gm2["x"], cache.h_pre)
    gm1 = dense_backward(dh_pre, cache.z, w["mlp1.weight"], ad.get("mlp1"), cache.ax_mlp1)

    d_embedding = np.zeros_like(w[EMBEDDING])
    np.add.at(d_embedding, cache.tokens, gm1["x"][:, arch.time_dim :])

    grads: Dict[str, np.ndarray] = {EMBEDDING: d_embedding}
    for layer, lg in (("conv1", g1), ("conv2", g2), ("mlp1", gm1), ("mlp2", gm2)):
        if not frozen:
            grads[f"{layer}.weight"] = lg["W"]
            grads[f"{layer}.bias"] = lg["b"]
        if layer in ad:
            grads[f"{layer}.lora_A"] = lg["A"]
            grads[f"{layer}.lora_B"] = lg["B"]
    return grads


def check_gradients(
    loss_fn: Callable[[], float],
    arrays: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    rng: np.random.Generator,
    fraction: float = 0.05,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between ``analytic`` and central differences.

    ``loss_fn`` must read ``arrays`` in place; at least one entry per array is
    probed. The denominator is floored so vanishing gradients cannot blow up.
    """
    worst = 0.0
    for name in sorted(arrays):
        arr = arrays[name]
        if arr.dtype != np.float64:
            raise ValidationError("finite-difference checks need fp64 arrays")
        flat = arr.reshape(-1)
        count = max(1, int(round(fraction * flat.size)))
        picks = rng.choice(flat.size, size=min(count, flat.size), replace=False)
        ana = analytic[name].reshape(-1)
        for i in picks:
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn()
            flat[i] = original - h
            minus = loss_fn()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            err = abs(ana[i] - numeric) / max(abs(ana[i]), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def grad_check(
    params: ModelParams,
    x: np.ndarray,
    t,
    token,
    seed: int = 0,
    fraction: float = 0.05,
) -> float:
    """Compare backward() with finite differences on L = sum(G * eps_hat)."""
    if params.dtype != np.float64:
        raise ValidationError("grad_check requires fp64 parameters")
    rng = make_rng(seed, "grad_check")
    out, cache = forward(params, x, t, token)
    probe = rng.standard_normal(out.shape) / out.size
    analytic = backward(params, cache, probe)

    def loss() -> float:
        return float(np.sum(forward(params, x, t, token)[0] * probe))

    return check_gradients(loss, params.trainable(), analytic, rng, fraction)


def named_tensors(params: ModelParams, parts: str = "all") -> Dict[str, np.ndarray]:
    """Flat name -> tensor index; adapters live under ``lora/<layer>/{A,B}``."""
    if parts not in ("all", "base", "adapters"):
        raise ValidationError(f"unknown checkpoint parts '{parts}'")
    out: Dict[str, np.ndarray] = {}
    if parts in ("all", "base"):
        out.update({f"base/{k}": v for k, v in params.weights.items()})
    if parts in ("all", "adapters"):
        for layer, lora in params.adapters.items():
            out[f"lora/{layer}/A"] = lora.A
            out[f"lora/{layer}/B"] = lora.B
        if parts == "adapters":
            out[f"base/{EMBEDDING}"] = params.weights[EMBEDDING]
    return out


def from_named_tensors(
    arch: ArchConfig,
    tensors: Dict[str, np.ndarray],
    lora_alpha: float = 4.0,
    frozen_base: bool = False,
    base: Optional[ModelParams] = None,
) -> ModelParams:
    """Rebuild parameters; adapter-only tensor sets are applied onto ``base``."""
    weights = {k[len("base/") :]: v for k, v in tensors.items() if k.startswith("base/")}
    if base is not None:
        merged = {k: v.copy() for k, v in base.weights.items()}
        merged.update(weights)
        weights = merged
    expected = set(f"{layer}.{kind}" for layer in ADAPTED_LAYERS for kind in ("weight", "bias"))
    expected.add(EMBEDDING)
    missing = sorted(expected - set(weights))
    if missing:
        raise ValidationError(f"checkpoint lacks base tensors: {', '.join(missing)}")
    adapters: Dict[str, LowRank] = {}
    for layer in ADAPTED_LAYERS:
        a, b = tensors.get(f"lora/{layer}/A"), tensors.get(f"lora/{layer}/B")
        if a is not None and b is not None:
            adapters[layer] = LowRank(A=a, B=b, alpha=float(lora_alpha))
    dtype = weights[EMBEDDING].dtype
    for lora in adapters.values():
        lora.A, lora.B = lora.A.astype(dtype), lora.B.astype(dtype)
    return ModelParams(
        arch=arch,
        weights={k: v.astype(dtype) for k, v in weights.items()},
        adapters=adapters,
        frozen_base=frozen_base and bool(adapters),
    )
