"""Discrete noise schedule and the forward diffusion process."""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .config import ScheduleConfig
from .errors import ValidationError

SCHEDULE_KINDS = ("linear", "scaled")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep tables indexed by t = 0..T.

    Index 0 is the clean-data convention (beta 0, alpha_bar 1); ``sigma`` is the
    DDPM posterior standard deviation used by ancestral sampling.
    """

    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def k_sigmas(self) -> np.ndarray:
        """Noise levels sqrt((1 - alpha_bar) / alpha_bar) for t = 1..T."""
        ab = self.alpha_bar[1:]
        return np.sqrt((1.0 - ab) / ab)


def make_schedule(
    kind: str = "linear", T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Build beta/alpha tables; ``scaled`` is linear in sqrt(beta)."""
    if kind not in SCHEDULE_KINDS:
        raise ValidationError(f"unknown schedule kind '{kind}'")
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )

    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T, dtype=np.float64) ** 2

    beta = np.concatenate([[0.0], betas])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.zeros(T + 1)
    sigma[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    return NoiseSchedule(
        T=T, kind=kind, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma
    )


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(cfg.kind, cfg.T, cfg.beta_start, cfg.beta_end)


def _check_t(t: Union[int, np.ndarray], sched: NoiseSchedule, low: int = 0) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < low) or np.any(t > sched.T) or np.any(t != np.floor(t)):
        raise ValidationError(f"timestep out of range {low}..{sched.T}: {t}")
    return t.astype(np.int64)


def add_noise(
    x0: np.ndarray, eps: np.ndarray, t: Union[int, np.ndarray], sched: NoiseSchedule
) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    ``t`` may be a scalar or one timestep per leading-axis item.
    """
    if x0.shape != eps.shape:
        raise ValidationError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t = _check_t(t, sched)
    ab = sched.alpha_bar[t].astype(x0.dtype)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def remove_noise(
    xt: np.ndarray, eps: np.ndarray, t: Union[int, np.ndarray], sched: NoiseSchedule
) -> np.ndarray:
    """Solve :func:`add_noise` for x0 given the noise that was added."""
    t = _check_t(t, sched)
    ab = sched.alpha_bar[t].astype(xt.dtype)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (xt.ndim - ab.ndim))
    return (xt - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def sigma_of_t(t: Union[int, np.ndarray], sched: NoiseSchedule) -> Union[float, np.ndarray]:
    """Euler-parameterization noise level sqrt((1 - alpha_bar_t) / alpha_bar_t)."""
    t = _check_t(t, sched, low=1)
    ab = sched.alpha_bar[t]
    value = np.sqrt((1.0 - ab) / ab)
    return float(value) if value.ndim == 0 else value


def t_of_sigma(sigma: float, sched: NoiseSchedule) -> float:
    """Fractional timestep for a noise level, interpolated in log-sigma."""
    log_sigmas = np.log(sched.k_sigmas)
    ts = np.arange(1, sched.T + 1, dtype=np.float64)
    if sched.T == 1:
        return 1.0
    return float(np.interp(np.log(sigma), log_sigmas, ts))


def dump_schedule_csv(sched: NoiseSchedule, path: Path) -> None:
    """Write ``t,beta,alpha_bar,sigma`` rows for inspection."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "beta", "alpha_bar", "sigma"])
        for t in range(sched.T + 1):
            writer.writerow(
                [t, repr(float(sched.beta[t])), repr(float(sched.alpha_bar[t])),
                 repr(float(sched.sigma[t]))]
            )
