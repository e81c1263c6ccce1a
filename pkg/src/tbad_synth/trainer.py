"""Noise-prediction training, prior-preserving adapter fine-tuning and checkpoints."""

import copy
import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn

from .config import ArchConfig, RunConfig, TrainConfig
from .denoiser import (
    EMBEDDING,
    ModelParams,
    add_adapters,
    backward,
    base_fingerprint,
    forward,
    from_named_tensors,
    init_params,
    named_tensors,
)
from .errors import CorruptFileError, TrainingError, ValidationError
from .numerics import (
    CodecStats,
    QuantBlock8,
    atomic_write_bytes,
    compute_dtype,
    decode_tensor,
    encode_tensor,
    gaussian,
    make_rng,
    q8_decode,
    q8_encode,
)
from .phantom import CLASS_IDS, DatasetSplit, PhantomSample, class_token, stack
from .sampler import sample_images
from .schedule import NoiseSchedule, add_noise, schedule_from_config

console = Console()

CKPT_MAGIC = b"CKPT1"
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3


@dataclass
class Batch:
    """Clean images scaled to [-1, 1] with their conditioning tokens."""

    x0: np.ndarray
    tokens: np.ndarray

    def __len__(self) -> int:
        return int(self.x0.shape[0])

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(x0=self.x0[idx], tokens=self.tokens[idx])


@dataclass
class NoiseDraws:
    """Timesteps, noise and conditioning-dropout decisions for one batch."""

    t: np.ndarray
    eps: np.ndarray
    dropped: np.ndarray


@dataclass
class EpochLoss:
    epoch: int
    loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: ModelParams
    curve: List[EpochLoss]
    rejected_steps: int = 0
    base_hash: str = ""


def make_batch(
    images: np.ndarray, tokens: Union[int, Sequence[int], np.ndarray], dtype=np.float32
) -> Batch:
    """Batch from [0, 1] images; ``tokens`` may be one token for all images."""
    images = np.asarray(images)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 0:
        tokens = np.full(images.shape[0], int(tokens), dtype=np.int64)
    return Batch(x0=(2.0 * images - 1.0).astype(dtype), tokens=tokens)


def batch_from_samples(samples: Sequence[PhantomSample], dtype=np.float32) -> Batch:
    images, _, classes = stack(samples)
    return make_batch(images, classes, dtype)


def draw_noise(
    rng: np.random.Generator, batch: Batch, sched: NoiseSchedule, cond_dropout: float = 0.0
) -> NoiseDraws:
    n = len(batch)
    t = rng.integers(1, sched.T + 1, size=n)
    eps = gaussian(rng, batch.x0.shape, batch.x0.dtype)
    dropped = rng.random(n) < cond_dropout
    return NoiseDraws(t=t, eps=eps, dropped=dropped)


def noise_prediction_loss(eps_hat: np.ndarray, eps: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``eps_hat``."""
    diff = eps_hat - eps
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def diffusion_loss(
    p: ModelParams,
    batch: Batch,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    cond_dropout: float = 0.1,
    draws: Optional[NoiseDraws] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """L = mean ||eps - eps_hat(x_t, t, c)||^2 with tokens dropped to 0 at rate ``cond_dropout``."""
    if len(batch) == 0:
        raise ValidationError("diffusion_loss needs a non-empty batch")
    d = draws if draws is not None else draw_noise(rng, batch, sched, cond_dropout)
    tokens = np.where(d.dropped, 0, batch.tokens)
    x_t = add_noise(batch.x0, d.eps, d.t, sched)
    eps_hat, cache = forward(p, x_t, d.t, tokens)
    loss, grad_out = noise_prediction_loss(eps_hat, d.eps)
    return loss, backward(p, cache, grad_out)


def prior_preservation_loss(
    p: ModelParams,
    subject_batch: Batch,
    prior_batch: Optional[Batch],
    sched: NoiseSchedule,
    rng: np.random.Generator,
    lam: float = 1.0,
    cond_dropout: float = 0.1,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """L = L_subject + lam * L_prior.

    The prior term replays the subject term's random stream, so identical
    subject and prior batches give exactly (1 + lam) times the subject loss.
    """
    if lam == 0:
        return diffusion_loss(p, subject_batch, sched, rng, cond_dropout)
    if prior_batch is None or len(prior_batch) == 0:
        raise ValidationError("prior preservation with lambda > 0 needs a non-empty prior batch")
    prior_rng = copy.deepcopy(rng)
    subject_loss, grads = diffusion_loss(p, subject_batch, sched, rng, cond_dropout)
    prior_loss, prior_grads = diffusion_loss(p, prior_batch, sched, prior_rng, cond_dropout)
    total = {name: g + lam * prior_grads[name] for name, g in grads.items()}
    return subject_loss + lam * prior_loss, total


Moment = Union[np.ndarray, QuantBlock8]


@dataclass
class OptState:
    """AdamW moments; ``q8`` keeps m and sqrt(v) as blockwise 8-bit codes."""

    precision: str = "fp32"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    block_size: int = 64
    step: int = 0
    rejected: int = 0
    m: Dict[str, Moment] = field(default_factory=dict)
    v: Dict[str, Moment] = field(default_factory=dict)
    no_decay: Set[str] = field(default_factory=set)

    def __post_init__(self):
        if self.precision not in ("fp32", "q8"):
            raise ValidationError(f"optimizer precision must be fp32 or q8, got '{self.precision}'")

    @classmethod
    def from_config(cls, cfg: TrainConfig, no_decay: Sequence[str] = ()) -> "OptState":
        return cls(
            precision=cfg.opt_precision,
            weight_decay=cfg.weight_decay,
            block_size=cfg.block_size,
            no_decay=set(no_decay),
        )

    def _load(self, name: str, like: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            zeros = np.zeros(like.shape, dtype=np.float64)
            return zeros, zeros.copy()
        m, v = self.m[name], self.v[name]
        if self.precision == "q8":
            root = q8_decode(v).astype(np.float64)
            return q8_decode(m).astype(np.float64), root * root
        return m.astype(np.float64), v.astype(np.float64)

    def _store(self, name: str, m: np.ndarray, v: np.ndarray, dtype: np.dtype) -> None:
        if self.precision == "q8":
            self.m[name] = q8_encode(m.astype(np.float32), self.block_size)
            self.v[name] = q8_encode(np.sqrt(v).astype(np.float32), self.block_size)
        else:
            self.m[name] = m.astype(dtype)
            self.v[name] = v.astype(dtype)


def adamw_step(
    state: OptState,
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    lr: float,
) -> bool:
    """One decoupled-decay Adam update of ``params`` in place.

    A step whose gradients contain NaN/inf is skipped entirely and counted in
    ``state.rejected``. Returns whether the step was applied.
    """
    for name, g in grads.items():
        if name not in params:
            raise ValidationError(f"gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise ValidationError(
                f"gradient shape {g.shape} does not match parameter '{name}' {params[name].shape}"
            )
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.rejected += 1
        console.print(
            f"⚠️  non-finite gradient, optimizer step skipped ({state.rejected} so far)",
            style="yellow",
        )
        return False

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(grads):
        p = params[name]
        g = grads[name].astype(np.float64)
        m, v = state._load(name, p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat, root = m / c1, np.sqrt(v / c2)
        if state.precision == "q8":
            # sqrt(v) can round to code 0 while m survives
            root = np.maximum(root, np.abs(m_hat))
        update = m_hat / (root + state.eps)
        decay = 0.0 if name in state.no_decay else state.weight_decay
        new = p.astype(np.float64) * (1.0 - lr * decay) - lr * update
        p[...] = new.astype(p.dtype)
        state._store(name, m, v, p.dtype)
    return True


def clip_gradients(
    grads: Dict[str, np.ndarray], max_norm: float
) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale to global L2 norm ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm <= 0 or norm <= max_norm or not np.isfinite(norm):
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm


def evaluate_loss(
    p: ModelParams, batch: Batch, draws: NoiseDraws, sched: NoiseSchedule, chunk: int = 64
) -> float:
    """Forward-only loss on fixed draws."""
    total = 0.0
    for start in range(0, len(batch), chunk):
        sl = slice(start, start + chunk)
        tokens = np.where(draws.dropped[sl], 0, batch.tokens[sl])
        x_t = add_noise(batch.x0[sl], draws.eps[sl], draws.t[sl], sched)
        eps_hat, _ = forward(p, x_t, draws.t[sl], tokens)
        total += float(np.sum((eps_hat - draws.eps[sl]) ** 2))
    return total / draws.eps.size


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("{task.fields[status]}"),
        console=console,
    )


def _run_epochs(
    params: ModelParams,
    train: Batch,
    val: Batch,
    sched: NoiseSchedule,
    tcfg: TrainConfig,
    seed: int,
    stage: str,
    state: OptState,
    step_loss,
    grad_mask=None,
) -> List[EpochLoss]:
    """Shared epoch loop; ``step_loss(batch, rng)`` returns (loss, grads)."""
    val_draws = draw_noise(make_rng(seed, stage, "val"), val, sched, 0.0)
    probe_draws = draw_noise(make_rng(seed, stage, "probe"), train, sched, 0.0)
    initial = evaluate_loss(params, train, probe_draws, sched)
    curve = [EpochLoss(0, initial, evaluate_loss(params, val, val_draws, sched))]
    over = 0
    n = len(train)

    with _progress() as progress:
        task = progress.add_task(f"Training {stage}...", total=tcfg.epochs, status="")
        for epoch in range(1, tcfg.epochs + 1):
            order = make_rng(seed, stage, "shuffle", epoch).permutation(n)
            rng = make_rng(seed, stage, "noise", epoch)
            losses = []
            for start in range(0, n, tcfg.batch_size):
                idx = order[start : start + tcfg.batch_size]
                loss, grads = step_loss(train.take(idx), rng)
                if not np.isfinite(loss):
                    raise TrainingError(f"{stage}: loss became non-finite in epoch {epoch}")
                if grad_mask is not None:
                    grads = grad_mask(grads)
                grads, _ = clip_gradients(grads, tcfg.grad_clip)
                if adamw_step(state, params.trainable(), grads, tcfg.lr):
                    params.revision += 1
                losses.append(loss)
            epoch_loss = float(np.mean(losses))
            val_loss = evaluate_loss(params, val, val_draws, sched)
            curve.append(EpochLoss(epoch, epoch_loss, val_loss))
            progress.update(task, advance=1, status=f"loss {epoch_loss:.4f} val {val_loss:.4f}")

            over = over + 1 if epoch_loss > DIVERGENCE_FACTOR * initial else 0
            if over >= DIVERGENCE_PATIENCE:
                raise TrainingError(
                    f"{stage} diverged: loss {epoch_loss:.4g} exceeded {DIVERGENCE_FACTOR:g}x "
                    f"the initial {initial:.4g} for {DIVERGENCE_PATIENCE} epochs (lr={tcfg.lr:g})"
                )
    return curve


def _val_batch(val: Sequence[PhantomSample], fallback: Batch, dtype) -> Batch:
    if val:
        return batch_from_samples(val, dtype)
    return fallback.take(np.arange(min(len(fallback), 16)))


def train_base(dataset: DatasetSplit, cfg: RunConfig) -> TrainResult:
    """Train the conditional denoiser from scratch.

    Reads the train split for updates and the val split for the fixed-draw
    validation loss; the test split is never touched.
    """
    if not dataset.train:
        raise ValidationError("train_base needs at least one training phantom")
    tcfg = cfg.train
    tcfg.validate()
    dtype = compute_dtype(cfg.precision)
    sched = schedule_from_config(cfg.schedule)
    params = init_params(make_rng(cfg.seed, "init"), cfg.arch, dtype)
    train = batch_from_samples(dataset.train, dtype)
    val = _val_batch(dataset.val, train, dtype)
    state = OptState.from_config(tcfg)

    def step_loss(batch: Batch, rng: np.random.Generator):
        return diffusion_loss(params, batch, sched, rng, tcfg.cond_dropout)

    curve = _run_epochs(params, train, val, sched, tcfg, cfg.seed, "base", state, step_loss)
    console.print(
        f"✅ Base model trained: loss {curve[0].loss:.4f} → {curve[-1].loss:.4f}", style="green"
    )
    return TrainResult(params=params, curve=curve, rejected_steps=state.rejected)


def generate_prior_batch(base: ModelParams, cfg: RunConfig) -> Batch:
    """Class samples from the frozen base model, drawn once before fine-tuning."""
    lcfg = cfg.lora
    sched = schedule_from_config(cfg.schedule)
    images, tokens = [], []
    for class_id in CLASS_IDS:
        scfg = replace(
            cfg.sampler,
            method="euler",
            steps=lcfg.prior_steps,
            guidance=lcfg.prior_guidance,
            token=class_token(class_id),
            neg_token=0,
            seed=cfg.seed,
        )
        result = sample_images(base, sched, scfg, lcfg.prior_per_class, cfg.data.size)
        images.append(result.images)
        tokens.extend([class_token(class_id)] * len(result.images))
    console.print(f"Prior batch: {len(tokens)} base-model samples", style="cyan")
    return make_batch(np.concatenate(images), tokens, base.dtype)


def train_lora(
    base: ModelParams,
    subject_samples: Sequence[PhantomSample],
    cfg: RunConfig,
    prior_batch: Optional[Batch] = None,
    val_samples: Sequence[PhantomSample] = (),
) -> TrainResult:
    """Fine-tune adapters and the subject token row; base weights stay frozen."""
    tcfg = cfg.finetune
    if not tcfg.lora:
        raise ValidationError("finetune.lora is disabled; enable it to train adapters")
    tcfg.validate()
    if not subject_samples:
        raise ValidationError("train_lora needs subject phantoms")
    lcfg = cfg.lora
    subject = class_token(lcfg.subject_class)
    before = base_fingerprint(base)

    if prior_batch is None and tcfg.prior_lambda > 0:
        prior_batch = generate_prior_batch(base, cfg)

    params = add_adapters(base, make_rng(cfg.seed, "lora"), lcfg.rank, lcfg.alpha)
    sched = schedule_from_config(cfg.schedule)
    images, _, _ = stack(subject_samples)
    train = make_batch(images, subject, params.dtype)
    val = (
        make_batch(stack(val_samples)[0], subject, params.dtype)
        if val_samples
        else train.take(np.arange(min(len(train), 16)))
    )
    state = OptState.from_config(tcfg, no_decay=[EMBEDDING])
    prior_rng = make_rng(cfg.seed, "lora", "prior")

    def step_loss(batch: Batch, rng: np.random.Generator):
        prior = None
        if prior_batch is not None and tcfg.prior_lambda > 0:
            take = min(len(batch), len(prior_batch))
            prior = prior_batch.take(prior_rng.choice(len(prior_batch), take, replace=False))
        return prior_preservation_loss(
            params, batch, prior, sched, rng, tcfg.prior_lambda, tcfg.cond_dropout
        )

    def only_subject_row(grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        row = np.zeros_like(grads[EMBEDDING])
        row[subject] = grads[EMBEDDING][subject]
        return {**grads, EMBEDDING: row}

    curve = _run_epochs(
        params, train, val, sched, tcfg, cfg.seed, "lora", state, step_loss, only_subject_row
    )
    after = base_fingerprint(params)
    if after != before:
        raise TrainingError("base weights changed during adapter fine-tuning")
    console.print(
        f"✅ Adapters trained for class {lcfg.subject_class}: "
        f"loss {curve[0].loss:.4f} → {curve[-1].loss:.4f}",
        style="green",
    )
    return TrainResult(params=params, curve=curve, rejected_steps=state.rejected, base_hash=after)


def write_loss_curve(path: Path, curve: Sequence[EpochLoss]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss", "val_loss"])
        for row in curve:
            writer.writerow([row.epoch, repr(row.loss), repr(row.val_loss)])


def save_checkpoint(
    p: ModelParams,
    path: Path,
    precision: str = "fp32",
    parts: str = "all",
    stats: Optional[CodecStats] = None,
) -> CodecStats:
    """Write a CKPT1 container: magic, JSON header, then named TNS1 entries.

    Returns the codec counters, so callers can record fp16 saturation.
    """
    stats = stats if stats is not None else CodecStats()
    tensors = named_tensors(p, parts)
    lora = next(iter(p.adapters.values()), None)
    header = {
        "arch": asdict(p.arch),
        "precision": precision,
        "parts": parts,
        "frozen_base": p.frozen_base,
        "lora": {"rank": lora.rank, "alpha": lora.alpha} if lora else None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        payload = encode_tensor(tensors[name], precision, stats)
        out += [struct.pack("<H", len(raw)), raw, struct.pack("<Q", len(payload)), payload]
    atomic_write_bytes(path, b"".join(out))
    return stats


def _read_container(path: Path) -> Tuple[dict, Dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CorruptFileError(f"{path}: bad CKPT1 magic", 0)
    pos = len(CKPT_MAGIC)

    def need(n: int, what: str) -> None:
        if len(buf) < pos + n:
            raise CorruptFileError(f"{path}: truncated {what}", pos)

    need(4, "header length")
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    need(hlen, "header")
    try:
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptFileError(f"{path}: unreadable header", pos)
    if not isinstance(header, dict) or not isinstance(header.get("arch"), dict):
        raise CorruptFileError(f"{path}: header has no architecture", pos)
    pos += hlen
    need(4, "entry count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        need(2, "entry name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 8, "entry name")
        name = buf[pos : pos + nlen].decode("utf-8", errors="replace")
        pos += nlen
        (size,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        need(size, f"tensor '{name}'")
        array, end = decode_tensor(buf[: pos + size], pos)
        if end != pos + size:
            raise CorruptFileError(f"{path}: tensor '{name}' length mismatch", pos)
        tensors[name] = array
        pos = end
    if pos != len(buf):
        raise CorruptFileError(f"{path}: trailing bytes after last entry", pos)
    return header, tensors


def load_checkpoint(
    path: Path, adapters_path: Optional[Path] = None, base: Optional[ModelParams] = None
) -> ModelParams:
    """Read a CKPT1 file; an adapters-only file needs a base (``base`` or ``path``)."""
    header, tensors = _read_container(path)
    try:
        arch = ArchConfig(**header["arch"])
    except TypeError as e:
        raise CorruptFileError(f"{path}: bad architecture in header ({e})", len(CKPT_MAGIC) + 4)
    if header.get("parts") == "adapters" and base is None:
        raise ValidationError(f"{path} holds adapters only; load it onto a base checkpoint")
    lora = header.get("lora") or {}
    params = from_named_tensors(
        arch, tensors, lora.get("alpha", 4.0), header.get("frozen_base", False), base
    )
    if adapters_path is not None:
        params = load_checkpoint(adapters_path, base=params)
    return params
