"""Training loops for the autoencoders (full, ambient, denoising losses) and the classifier."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .data import MaskSpec, apply_mask, fill_missing, gen_perframe_mask, gen_random_mask, mean_trajectories
from .nn.params import atomic_write_text

LOSS_MODES = ("full", "ambient", "denoising")


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    loss_mode: str = "full"
    iterations: int = 20_000
    batch_size: int = 32
    learning_rate: float = 1e-3
    milestones: dict = field(default_factory=lambda: {15_000: 0.1, 18_000: 0.1})
    seed: int = 0
    log_every: int = 100
    train_otp: float = 100.0
    mask_mode: str = "per-sequence"
    redraw_masks: bool = False
    fill: str = "mean-trajectory"

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.iterations <= 0 or self.batch_size <= 0:
            raise ValueError("iterations and batch_size must be positive")
        if self.mask_mode not in ("per-sequence", "per-frame"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        self.milestones = {int(k): float(v) for k, v in self.milestones.items()}
        keys = list(self.milestones)
        if keys != sorted(keys):
            self.milestones = dict(sorted(self.milestones.items()))
        nn.StepSchedule(self.learning_rate, self.milestones)

    @classmethod
    def published_autoencoder(cls, **kw) -> "TrainConfig":
        """Published autoencoder schedule: 2e5 iterations, batch 64, lr 1e-3 cut 10x at 1.5e5 and 1.8e5."""
        base = dict(iterations=200_000, batch_size=64, learning_rate=1e-3, milestones={150_000: 0.1, 180_000: 0.1})
        base.update(kw)
        return cls(**base)

    @classmethod
    def published_classifier(cls, **kw) -> "TrainConfig":
        base = dict(iterations=200_000, batch_size=64, learning_rate=1e-3, milestones={100_000: 0.1, 180_000: 0.1})
        base.update(kw)
        return cls(**base)

    def schedule(self) -> nn.StepSchedule:
        return nn.StepSchedule(self.learning_rate, self.milestones)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = {str(k): v for k, v in self.milestones.items()}
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (iteration, lr, mean loss over the interval)
    wall_clock: float = 0.0
    checkpoint: Optional[str] = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "lr", "loss"])
        for it, lr, loss in self.rows:
            w.writerow([it, f"{lr:.9g}", f"{loss:.9g}"])
        return buf.getvalue()

    def write_csv(self, path):
        atomic_write_text(Path(path), self.to_csv())


# ---------------------------------------------------------------- losses


def _batched(a: np.ndarray) -> np.ndarray:
    return a[None] if a.ndim == 2 else a


def full_loss(x, x_hat):
    """Sum over frames and joints of squared 3D distances (batch: mean of per-sequence sums).

    Returns a Tensor when ``x_hat`` is a Tensor, otherwise a float.
    """
    if isinstance(x_hat, nn.Tensor):
        return nn.squared_error(x_hat, np.asarray(x, dtype=x_hat.dtype))
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise nn.ShapeError(f"full_loss: shapes {x.shape} and {x_hat.shape} differ")
    return float(nn.squared_error(_batched(x_hat), _batched(x)).data)


def _mask_rows(mask, shape) -> np.ndarray:
    if isinstance(mask, MaskSpec):
        rows = mask.rows(shape[-1])
        if rows.shape != shape[-2:]:
            raise nn.ShapeError(f"mask rows {rows.shape} do not match sequence {shape[-2:]}")
        return rows
    mask = np.asarray(mask)
    if mask.shape != shape:
        raise nn.ShapeError(f"mask shape {mask.shape} does not match {shape}")
    return mask


def masked_loss(y, x_hat, mask):
    """``sum ||Y - A X_hat||^2`` over observed entries only.

    ``mask`` is a :class:`MaskSpec` or a 0/1 array shaped like ``y``; ``y``
    must already be zero on unobserved rows.
    """
    if isinstance(x_hat, nn.Tensor):
        rows = _mask_rows(mask, x_hat.shape).astype(x_hat.dtype, copy=False)
        return nn.squared_error(x_hat, np.asarray(y, dtype=x_hat.dtype), rows)
    y, x_hat = np.asarray(y, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if y.shape != x_hat.shape:
        raise nn.ShapeError(f"masked_loss: shapes {y.shape} and {x_hat.shape} differ")
    rows = _mask_rows(mask, y.shape).astype(np.float64)
    return float(nn.squared_error(_batched(x_hat), _batched(y), _batched(rows)).data)


# ---------------------------------------------------------------- data plumbing


def draw_training_masks(count: int, joints: int, frames: int, otp: float, seed, mode="per-sequence", hip=0):
    """One independently drawn mask per training sequence, reproducible from ``seed``."""
    ss = np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else [int(seed)])
    rngs = [np.random.default_rng(s) for s in ss.spawn(count)]
    if mode == "per-frame":
        return [gen_perframe_mask(joints, frames, otp, r, hip) for r in rngs]
    return [gen_random_mask(joints, otp, r, hip) for r in rngs]


@dataclass
class PreparedData:
    inputs: np.ndarray
    targets: np.ndarray
    weights: Optional[np.ndarray]
    fill_stats: Optional[np.ndarray]


def prepare_autoencoder_data(
    x: np.ndarray, loss_mode: str, masks: Optional[Sequence[MaskSpec]], fill: str = "mean-trajectory", stats=None
) -> PreparedData:
    """Network inputs, targets and loss weights for one pass over the data.

    Ambient mode builds everything from ``apply_mask(X)`` alone, so
    unobserved ground truth never reaches the optimizer.
    """
    x = np.asarray(x, dtype=np.float64)
    if loss_mode == "full":
        # complete data: the stats are only needed later, to fill test inputs
        stats = mean_trajectories(x) if stats is None else stats
        return PreparedData(x.astype(np.float32), x.astype(np.float32), None, stats)
    if masks is None:
        raise ValueError(f"{loss_mode} training requires one mask per training sequence")
    if len(masks) != len(x):
        raise ValueError(f"{len(masks)} masks for {len(x)} sequences")
    observed = np.stack([apply_mask(s, m) for s, m in zip(x, masks)])
    if stats is None and fill == "mean-trajectory":
        stats = mean_trajectories(observed, masks)
    inputs = np.stack([fill_missing(o, m, fill, stats) for o, m in zip(observed, masks)])
    if loss_mode == "ambient":
        weights = np.stack([m.rows(x.shape[2]) for m in masks]).astype(np.float32)
        return PreparedData(inputs.astype(np.float32), observed.astype(np.float32), weights, stats)
    return PreparedData(inputs.astype(np.float32), x.astype(np.float32), None, stats)


class BatchStream:
    """Deterministic shuffled epochs; batch ``t`` is addressable directly (for resuming)."""

    def __init__(self, count: int, batch_size: int, seed: int):
        self.count, self.batch_size, self.seed = count, batch_size, seed

    @lru_cache(maxsize=8)
    def permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, 7919, epoch]).permutation(self.count)

    def batch(self, t: int) -> np.ndarray:
        pos = np.arange(t * self.batch_size, (t + 1) * self.batch_size)
        epochs, offsets = pos // self.count, pos % self.count
        return np.array([self.permutation(int(e))[o] for e, o in zip(epochs, offsets)])

    def epoch_of(self, t: int) -> int:
        return (t * self.batch_size) // self.count


# ---------------------------------------------------------------- state checkpoints


def save_training_state(path, model, optimizer: nn.Adam, iteration: int, config: TrainConfig, extra=None):
    from .models import save_model

    arrays = dict(optimizer.state_dict())
    for k, v in (extra or {}).items():
        arrays[k] = v
    meta = {"iteration": iteration, "adam_t": optimizer.t, "train_config": config.to_dict()}
    return save_model(path, model, extra=arrays, meta=meta)


def _resume(path, model, optimizer: nn.Adam):
    from .models import spec_hash

    arrays, meta = nn.load_arrays(path)
    if meta.get("spec_hash") != spec_hash(model.spec):
        raise nn.CheckpointError(f"{path}: training state belongs to a different model spec")
    model.params.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("extra:")})
    optimizer.load_state_dict({k[len("extra:") :]: v for k, v in arrays.items() if k.startswith("extra:")}, meta["adam_t"])
    return int(meta["iteration"]), arrays


# ---------------------------------------------------------------- loops


def _run_loop(model, loss_fn, count: int, config: TrainConfig, resume=None, state_path=None, state_every=None, extra_state=None):
    opt = nn.Adam(model.params, lr=config.learning_rate)
    start = 0
    if resume is not None:
        start, _ = _resume(resume, model, opt)
    schedule = config.schedule()
    stream = BatchStream(count, config.batch_size, config.seed)
    log = TrainLog()
    t0 = time.perf_counter()
    acc, n_acc = 0.0, 0
    for it in range(start, config.iterations):
        opt.lr = schedule(it)
        idx = stream.batch(it)
        model.params.zero_grad()
        loss = loss_fn(idx, stream.epoch_of(it))
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(it, value)
        loss.backward()
        opt.step()
        acc += value
        n_acc += 1
        done = it + 1
        if done % config.log_every == 0 or done == config.iterations:
            log.rows.append((done, opt.lr, acc / n_acc))
            acc, n_acc = 0.0, 0
        if state_path is not None and state_every and done % state_every == 0:
            save_training_state(state_path, model, opt, done, config, extra_state)
    log.wall_clock = time.perf_counter() - t0
    if state_path is not None:
        save_training_state(state_path, model, opt, config.iterations, config, extra_state)
        log.checkpoint = str(state_path)
    return log


@dataclass
class AutoencoderTraining:
    log: TrainLog
    fill_stats: Optional[np.ndarray]
    masks: Optional[list]


def train_autoencoder(
    model,
    x: np.ndarray,
    config: TrainConfig,
    masks: Optional[Sequence[MaskSpec]] = None,
    hip: int = 0,
    resume=None,
    state_path=None,
    state_every: Optional[int] = None,
    instrument=None,
) -> AutoencoderTraining:
    """Fit ``model`` (action or frame-wise AE) to ``x`` of shape ``(M, 3J, N)``.

    * ``full``: input X, full loss against X.
    * ``ambient``: input fill(A X), masked loss against A X.
    * ``denoising``: input fill(A X), full loss against clean X.

    ``instrument``, if given, is called with ``(iteration_epoch, idx, loss_tensor)``.
    """
    x = np.asarray(x)
    if x.ndim != 3 or len(x) == 0:
        raise ValueError(f"training data must be a non-empty (M, 3J, N) array, got shape {x.shape}")
    count, channels, frames = x.shape
    if config.loss_mode != "full" and masks is None:
        raise ValueError(f"{config.loss_mode} training requires one mask per training sequence")
    data = prepare_autoencoder_data(x, config.loss_mode, masks, config.fill)
    cache = {0: data}

    def epoch_data(epoch):
        if not config.redraw_masks or config.loss_mode == "full":
            return data
        if epoch not in cache:
            redrawn = draw_training_masks(count, channels // 3, frames, config.train_otp, [config.seed, 31, epoch], config.mask_mode, hip)
            cache.clear()
            cache[epoch] = prepare_autoencoder_data(x, config.loss_mode, redrawn, config.fill, data.fill_stats)
        return cache[epoch]

    def loss_fn(idx, epoch):
        d = epoch_data(epoch)
        out = model(d.inputs[idx])
        w = None if d.weights is None else d.weights[idx]
        loss = nn.squared_error(out, d.targets[idx], w)
        if instrument is not None:
            instrument(epoch, idx, loss)
        return loss

    extra = {} if data.fill_stats is None else {"fill_stats": data.fill_stats}
    log = _run_loop(model, loss_fn, count, config, resume, state_path, state_every, extra)
    return AutoencoderTraining(log, data.fill_stats, None if masks is None else list(masks))


def train_classifier(model, x: np.ndarray, labels, config: TrainConfig, resume=None, state_path=None, state_every=None) -> TrainLog:
    """Cross-entropy training on complete sequences."""
    if labels is None:
        raise ValueError("classifier training requires labels")
    labels = np.asarray(labels)
    if labels.dtype == object or np.any(labels < 0):
        raise ValueError("classifier training requires a non-negative integer label for every sequence")
    x = np.asarray(x, dtype=np.float32)
    if len(labels) != len(x):
        raise ValueError(f"{len(labels)} labels for {len(x)} sequences")
    labels = labels.astype(np.int64)

    def loss_fn(idx, epoch):
        return nn.softmax_cross_entropy(model.logits(x[idx], training=True), labels[idx])

    return _run_loop(model, loss_fn, len(x), config, resume, state_path, state_every)
