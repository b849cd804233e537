"""Reconstruction from partial observations: feed-forward, latent-space optimization, nearest joint."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import nn
from .data import MaskSpec, fill_missing, nearest_joint_fill, write_matrix_csv
from .nn.params import atomic_write_text


class InversionDiverged(FloatingPointError):
    def __init__(self, iteration: int, traces: np.ndarray):
        super().__init__(f"latent optimization produced a non-finite objective at iteration {iteration}")
        self.iteration = iteration
        self.traces = traces


@dataclass
class InversionConfig:
    iterations: int = 500
    learning_rate: float = 1.0
    optimizer: str = "adam"
    restarts: int = 0
    restart_sigma: float = 1.0
    seed: int = 0
    batch_size: int = 128

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.iterations < 0 or self.restarts < 0 or self.batch_size < 1:
            raise ValueError("iterations and restarts must be >= 0, batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InversionResult:
    z: np.ndarray
    x_hat: np.ndarray
    objective: float
    initial_objective: float
    trace: np.ndarray = field(repr=False)
    best_iteration: int = 0

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "initial_objective": self.initial_objective,
            "best_iteration": self.best_iteration,
            "trace": [float(v) for v in self.trace],
            "z": [float(v) for v in self.z],
        }

    def save(self, path):
        """Reconstruction as CSV (one row per frame) plus a JSON sidecar with z and the trace."""
        path = Path(path)
        write_matrix_csv(path, self.x_hat.T)
        atomic_write_text(path.with_suffix(".json"), json.dumps(self.to_dict(), indent=1) + "\n")


def _as_batch(a) -> np.ndarray:
    a = np.asarray(a)
    return a[None] if a.ndim == 2 else a


def mask_rows(masks, shape) -> np.ndarray:
    """0/1 sampling weights of shape ``(B, 3J, N)`` from masks or a weight array."""
    b, c, n = shape
    if isinstance(masks, MaskSpec):
        masks = [masks] * b
    if isinstance(masks, (list, tuple)):
        if len(masks) != b:
            raise ValueError(f"{len(masks)} masks for {b} sequences")
        rows = np.stack([m.rows(n) for m in masks])
    else:
        rows = _as_batch(masks).astype(np.float64)
    if rows.shape != (b, c, n):
        raise nn.ShapeError(f"mask shape {rows.shape} does not match observations {(b, c, n)}")
    return rows


def masked_objective(y: np.ndarray, x_hat: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Per-sequence ``||Y - A X_hat||^2`` in float64."""
    r = rows * (np.asarray(y, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64))
    return np.einsum("bcn,bcn->b", r, r)


def _forward(model, x, batch_size=128):
    zs, outs = [], []
    for i in range(0, len(x), batch_size):
        z = model.encode(x[i : i + batch_size])
        zs.append(z.data)
        outs.append(model.decode(z).data)
    return np.concatenate(outs), np.concatenate(zs)


def feedforward_reconstruct(model, y, masks, stats=None, fill: str = "mean-trajectory", batch_size: int = 128):
    """``D(E(fill(Y)))`` for a batch; returns ``(x_hat, z0)``.

    ``y`` holds masked observations ``(B, 3J, N)``; ``stats`` are the mean
    trajectories stored with the model.
    """
    y = _as_batch(y).astype(np.float64)
    if isinstance(masks, MaskSpec):
        masks = [masks] * len(y)
    filled = np.stack([fill_missing(s, m, fill, stats) for s, m in zip(y, masks)])
    x_hat, z0 = _forward(model, filled.astype(model.params.dtype), batch_size)
    return x_hat.astype(np.float64), z0.astype(np.float64)


def _optimize_chunk(model, y, rows, z_start, cfg: InversionConfig):
    dtype = model.params.dtype
    z = nn.Tensor(z_start.astype(dtype), requires_grad=True, name="z")
    opt = nn.Adam([z], lr=cfg.learning_rate) if cfg.optimizer == "adam" else nn.GradientDescent([z], lr=cfg.learning_rate)
    b = len(y)
    traces = np.empty((cfg.iterations + 1, b))
    best_obj = np.full(b, np.inf)
    best_z = z.data.astype(np.float64)
    best_x = np.zeros_like(y)
    best_it = np.zeros(b, dtype=int)
    yc, wc = y.astype(dtype), rows.astype(dtype)
    for it in range(cfg.iterations + 1):
        z.grad = None
        out = model.decode(z)
        obj = masked_objective(y, out.data, rows)
        traces[it] = obj
        if not np.all(np.isfinite(obj)):
            raise InversionDiverged(it, traces[: it + 1])
        better = obj < best_obj
        if better.any():
            best_obj[better] = obj[better]
            best_z[better] = z.data[better]
            best_x[better] = out.data[better]
            best_it[better] = it
        if it == cfg.iterations:
            break
        # backward seed b makes each row's gradient the gradient of its own sum
        nn.squared_error(out, yc, wc).backward(np.asarray(float(b), dtype=dtype))
        opt.step()
    return best_z, best_x, best_obj, best_it, traces


def latent_optimize(
    model,
    y,
    masks,
    z0,
    config: Optional[InversionConfig] = None,
) -> list[InversionResult]:
    """Minimize ``||Y - A D(z)||^2`` over z, starting at ``z0``; decoder weights stay fixed.

    Each sequence keeps its best iterate (``z0`` included), so the returned
    objective never exceeds the starting one. ``model`` is anything with a
    ``decode`` method and a ``params`` store (action or frame-wise AE).
    """
    cfg = config or InversionConfig()
    y = _as_batch(y).astype(np.float64)
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    if len(z0) != len(y):
        raise ValueError(f"{len(z0)} initial codes for {len(y)} sequences")
    rows = mask_rows(masks, y.shape)
    params = [p for _, p in model.params]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    rng = np.random.default_rng([cfg.seed, 104729])
    starts = [z0] + [z0 + cfg.restart_sigma * rng.standard_normal(z0.shape) for _ in range(cfg.restarts)]
    results = []
    try:
        for lo in range(0, len(y), cfg.batch_size):
            sl = slice(lo, lo + cfg.batch_size)
            best = None
            for z_start in starts:
                bz, bx, bo, bi, tr = _optimize_chunk(model, y[sl], rows[sl], z_start[sl], cfg)
                if best is None:
                    best = [bz, bx, bo, bi, tr, tr[0].copy()]
                    continue
                win = bo < best[2]
                best[0][win], best[1][win], best[2][win], best[3][win] = bz[win], bx[win], bo[win], bi[win]
                best[4][:, win] = tr[:, win]
            bz, bx, bo, bi, tr, init = best
            for k in range(len(bz)):
                results.append(InversionResult(bz[k], bx[k], float(bo[k]), float(init[k]), tr[:, k].copy(), int(bi[k])))
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag
    return results


def reconstruct_sequences(model, y, masks, stats, config: Optional[InversionConfig] = None):
    """Feed-forward then latent optimization; returns ``(x_ff, x_opt, results)``."""
    x_ff, z0 = feedforward_reconstruct(model, y, masks, stats)
    results = latent_optimize(model, y, masks, z0, config)
    return x_ff, np.stack([r.x_hat for r in results]), results


def nearest_joint_baseline(y, masks: Union[MaskSpec, Sequence[MaskSpec]], reference=None) -> np.ndarray:
    """Copy, per frame, the nearest observed joint into every missing one."""
    y = _as_batch(y)
    if isinstance(masks, MaskSpec):
        masks = [masks] * len(y)
    return np.stack([nearest_joint_fill(s, m, reference) for s, m in zip(y, masks)])
