"""Reverse-process samplers: ancestral DDPM, Euler and Euler-Ancestral.

Every sampler accepts either :class:`ModelParams` or a plain callable
``model(x, t, token) -> eps_hat`` and counts model evaluations. Image ``i``
of a batch draws all of its noise from its own stream, so results do not
depend on batch size or on how work is split across threads.
"""

import concurrent.futures
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .config import SamplerConfig
from .denoiser import ModelParams, forward
from .errors import NumericalError, ValidationError
from .numerics import gaussian, make_rng
from .schedule import NoiseSchedule, t_of_sigma


SAMPLERS = ("ddpm", "euler", "euler_a")

ModelFn = Callable[[np.ndarray, object, object], np.ndarray]


class CountingModel:
    """Noise predictor that counts how often it is evaluated."""

    def __init__(self, fn: ModelFn):
        self.fn = fn
        self.evaluations = 0
        self._lock = threading.Lock()

    def __call__(self, x: np.ndarray, t, token) -> np.ndarray:
        with self._lock:
            self.evaluations += 1
        return self.fn(x, t, token)


def as_model(p: Union[ModelParams, ModelFn, CountingModel]) -> CountingModel:
    if isinstance(p, CountingModel):
        return p
    if isinstance(p, ModelParams):
        return CountingModel(lambda x, t, token: forward(p, x, t, token)[0])
    return CountingModel(p)


@dataclass
class SampleResult:
    """Final states, display images in [0, 1] and chain bookkeeping."""

    x0: np.ndarray
    images: np.ndarray
    evaluations: int
    noise_injected: float
    method: str
    steps: int
    seeds: List[int]


def cfg_predict(p, x: np.ndarray, t, cfg: SamplerConfig) -> np.ndarray:
    """Guided prediction eps_neg + g * (eps_pos - eps_neg).

    g = 1 and g = 0 return the positive or negative branch itself, with a
    single model evaluation.
    """
    model = as_model(p)
    g = float(cfg.guidance)
    if g == 1.0:
        return model(x, t, cfg.token)
    if g == 0.0:
        return model(x, t, cfg.neg_token)
    eps_pos = model(x, t, cfg.token)
    eps_neg = model(x, t, cfg.neg_token)
    return eps_neg + g * (eps_pos - eps_neg)


def karras_sigmas(sched: NoiseSchedule, steps: int, rho: float = 7.0) -> np.ndarray:
    """``steps`` noise levels linear in sigma^(1/rho), followed by 0."""
    sigma_min, sigma_max = float(sched.k_sigmas[0]), float(sched.k_sigmas[-1])
    ramp = np.linspace(0.0, 1.0, steps) if steps > 1 else np.zeros(1)
    min_inv_rho = sigma_min ** (1.0 / rho)
    max_inv_rho = sigma_max ** (1.0 / rho)
    sigmas = (max_inv_rho + ramp * (min_inv_rho - max_inv_rho)) ** rho
    return np.append(sigmas, 0.0)


def get_ancestral_step(sigma_from: float, sigma_to: float):
    """(sigma_down, sigma_up) with sigma_down^2 + sigma_up^2 = sigma_to^2."""
    if sigma_to == 0.0:
        return 0.0, 0.0
    sigma_up = min(sigma_to, (sigma_to**2 * (sigma_from**2 - sigma_to**2) / sigma_from**2) ** 0.5)
    sigma_down = (sigma_to**2 - sigma_up**2) ** 0.5
    return sigma_down, sigma_up


def ddpm_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending integer timesteps starting at T; the full chain when ``steps == T``."""
    if steps >= T:
        return np.arange(T, 0, -1)
    return np.unique(np.round(np.linspace(T, 1, steps)).astype(np.int64))[::-1]


def _check(cfg: SamplerConfig, sched: NoiseSchedule, n: int, size: int) -> None:
    cfg.validate()
    if cfg.steps > sched.T:
        raise ValidationError(f"steps must be in 1..{sched.T}, got {cfg.steps}")
    if n < 1 or size < 1:
        raise ValidationError(f"need n >= 1 and size >= 1, got n={n}, size={size}")


def _streams(cfg: SamplerConfig, n: int, first_index: int) -> List[np.random.Generator]:
    return [
        make_rng(cfg.seed, "sample", cfg.method, cfg.token, cfg.neg_token, first_index + i)
        for i in range(n)
    ]


def _noise(rngs: Sequence[np.random.Generator], size: int, dtype) -> np.ndarray:
    return np.stack([gaussian(r, (size, size), dtype) for r in rngs])


def _finite(x: np.ndarray, step: int, method: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{method}: non-finite values at step {step}")


def _result(x: np.ndarray, model: CountingModel, noise: float, cfg: SamplerConfig,
            first_index: int) -> SampleResult:
    images = (np.clip(x, -1.0, 1.0) + 1.0) / 2.0
    return SampleResult(
        x0=x,
        images=images,
        evaluations=model.evaluations,
        noise_injected=noise,
        method=cfg.method,
        steps=cfg.steps,
        seeds=[first_index + i for i in range(x.shape[0])],
    )


def _dtype(p) -> np.dtype:
    return p.dtype if isinstance(p, ModelParams) else np.dtype(np.float64)


def ddpm_sample(
    p,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    n: int = 1,
    size: int = 64,
    noise: Optional[np.ndarray] = None,
    first_index: int = 0,
) -> SampleResult:
    """Ancestral chain x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t) + sigma_t z.

    With fewer steps than T the chain is respaced: each jump uses the
    effective alpha = abar_t / abar_prev. No noise is added on the last step.
    ``noise`` overrides the initial state x_T.
    """
    model = as_model(p)
    dtype = _dtype(p)
    if noise is not None:
        n = np.shape(noise)[0]
    rngs = _streams(cfg, n, first_index)
    x = _noise(rngs, size, dtype) if noise is None else np.array(noise, dtype=dtype)
    _check(cfg, sched, x.shape[0], x.shape[-1])
    injected = 0.0
    ts = ddpm_timesteps(sched.T, cfg.steps)
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
        alpha = ab_t / ab_prev
        beta = 1.0 - alpha
        eps = cfg_predict(model, x, int(t), cfg)
        x = (x - beta / np.sqrt(1.0 - ab_t) * eps) / np.sqrt(alpha)
        if t_prev > 0:
            sigma = float(np.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t)))
            x = x + sigma * _noise(rngs, x.shape[-1], dtype)
            injected += sigma
        x = x.astype(dtype)
        _finite(x, i, "ddpm")
    return _result(x, model, injected, cfg, first_index)


def _sigma_chain(
    p,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    n: int,
    size: int,
    noise: Optional[np.ndarray],
    first_index: int,
    ancestral: bool,
) -> SampleResult:
    model = as_model(p)
    dtype = _dtype(p)
    if noise is not None:
        n = np.shape(noise)[0]
    rngs = _streams(cfg, n, first_index)
    z = _noise(rngs, size, dtype) if noise is None else np.array(noise, dtype=dtype)
    _check(cfg, sched, z.shape[0], z.shape[-1])
    sigmas = karras_sigmas(sched, cfg.steps, cfg.rho)
    x = (sigmas[0] * z).astype(dtype)
    injected = 0.0
    for i in range(len(sigmas) - 1):
        sigma, sigma_next = float(sigmas[i]), float(sigmas[i + 1])
        c_in = 1.0 / np.sqrt(sigma**2 + 1.0)
        # eps-parameterized denoiser: x0_hat = x - sigma * eps, so d = eps
        d = cfg_predict(model, (x * c_in).astype(dtype), t_of_sigma(sigma, sched), cfg)
        if ancestral:
            sigma_down, sigma_up = get_ancestral_step(sigma, sigma_next)
            x = x + (sigma_down - sigma) * d
            if sigma_next > 0:
                x = x + sigma_up * _noise(rngs, x.shape[-1], dtype)
                injected += sigma_up
        else:
            x = x + (sigma_next - sigma) * d
        x = x.astype(dtype)
        _finite(x, i, cfg.method)
    return _result(x, model, injected, cfg, first_index)


def euler_sample(
    p,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    n: int = 1,
    size: int = 64,
    noise: Optional[np.ndarray] = None,
    first_index: int = 0,
) -> SampleResult:
    """Deterministic Euler steps on the Karras sigma grid; the seed only sets x_T."""
    return _sigma_chain(p, sched, cfg, n, size, noise, first_index, ancestral=False)


def euler_ancestral_sample(
    p,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    n: int = 1,
    size: int = 64,
    noise: Optional[np.ndarray] = None,
    first_index: int = 0,
) -> SampleResult:
    """Euler step to sigma_down, then fresh noise of size sigma_up."""
    return _sigma_chain(p, sched, cfg, n, size, noise, first_index, ancestral=True)


SAMPLER_FUNCS = {
    "ddpm": ddpm_sample,
    "euler": euler_sample,
    "euler_a": euler_ancestral_sample,
}


def sample_images(
    p,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    n: int,
    size: int = 64,
    workers: int = 1,
) -> SampleResult:
    """Draw ``n`` images with ``cfg.method``, optionally split over threads."""
    cfg.validate()
    if n < 1:
        raise ValidationError(f"need at least one sample, got {n}")
    fn = SAMPLER_FUNCS[cfg.method]
    workers = max(1, min(workers, n))
    bounds = np.linspace(0, n, workers + 1).astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def run(chunk):
        start, stop = chunk
        # per-chunk counter; a shared CountingModel still sees every call
        model = CountingModel(p) if isinstance(p, CountingModel) else p
        return fn(model, sched, cfg, n=stop - start, size=size, first_index=start)

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(run, chunks))

    return SampleResult(
        x0=np.concatenate([r.x0 for r in parts]),
        images=np.concatenate([r.images for r in parts]),
        evaluations=sum(r.evaluations for r in parts),
        noise_injected=sum(r.noise_injected for r in parts),
        method=cfg.method,
        steps=cfg.steps,
        seeds=[s for r in parts for s in r.seeds],
    )
