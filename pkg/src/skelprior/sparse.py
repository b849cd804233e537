"""Dictionary learning and masked orthogonal matching pursuit baseline."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn


class SparseCodingError(ValueError):
    pass


@dataclass
class Dictionary:
    """``atoms``: ``(n, d)`` with unit-norm rows; ``shape`` is the ``(3J, N)`` layout of one row."""

    atoms: np.ndarray
    shape: tuple
    objective: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        self.shape = tuple(int(s) for s in self.shape)
        if self.atoms.ndim != 2 or self.atoms.shape[1] != int(np.prod(self.shape)):
            raise SparseCodingError(f"atoms {self.atoms.shape} do not match sequence shape {self.shape}")

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    def save(self, path):
        return nn.save_arrays(path, {"atoms": self.atoms.astype(np.float32)}, {"kind": "dictionary", "shape": list(self.shape)})

    @classmethod
    def load(cls, path) -> "Dictionary":
        arrays, meta = nn.load_arrays(path)
        if meta.get("kind") != "dictionary":
            raise nn.CheckpointError(f"{path}: not a dictionary checkpoint")
        atoms = arrays["atoms"].astype(np.float64)
        # float32 storage rounds the norms; restore the unit-norm constraint
        return cls(_normalize(atoms), tuple(meta["shape"]))


@dataclass
class SparseCode:
    theta: np.ndarray
    support: list
    residual_norms: list

    @property
    def sparsity(self) -> int:
        return int(np.count_nonzero(self.theta))


def _normalize(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.where(norms > 0, norms, 1.0)


# ---------------------------------------------------------------- coding


def omp_encode(y, atoms, mask=None, sparsity: int = 20, tol: float = 1e-4) -> SparseCode:
    """Greedy OMP on the observed coordinates only.

    ``atoms`` is a ``(n, d)`` array or a :class:`Dictionary`; ``mask`` a
    boolean (or 0/1) vector of length d, None meaning fully observed.
    Stops after ``sparsity`` atoms or once the residual norm drops to
    ``tol * ||y_observed||``.
    """
    v = atoms.atoms if isinstance(atoms, Dictionary) else np.asarray(atoms, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n, d = v.shape
    if y.size != d:
        raise SparseCodingError(f"signal has {y.size} entries, atoms have {d}")
    if sparsity > n:
        raise SparseCodingError(f"sparsity {sparsity} exceeds dictionary size {n}")
    if sparsity < 1:
        raise SparseCodingError("sparsity must be at least 1")
    obs = np.ones(d, dtype=bool) if mask is None else np.asarray(mask).ravel() > 0
    vo, yo = v[:, obs], y[obs]
    norms = np.linalg.norm(vo, axis=1)
    usable = norms > 1e-12
    theta = np.zeros(n)
    support: list[int] = []
    coef = np.zeros(0)
    r = yo.copy()
    residuals = [float(np.linalg.norm(r))]
    stop = tol * residuals[0]
    for _ in range(sparsity):
        if residuals[-1] <= stop:
            break
        corr = np.abs(vo @ r) / np.where(usable, norms, 1.0)
        corr[~usable] = -np.inf
        corr[support] = -np.inf
        k = int(np.argmax(corr))
        if not np.isfinite(corr[k]):
            break
        trial = support + [k]
        sub = vo[trial].T
        if np.linalg.matrix_rank(sub) < len(trial):
            warnings.warn(f"OMP stopped early: atom {k} is linearly dependent on the selected set", RuntimeWarning)
            break
        coef, *_ = np.linalg.lstsq(sub, yo, rcond=None)
        support = trial
        r = yo - sub @ coef
        residuals.append(float(np.linalg.norm(r)))
    theta[support] = coef if support else 0.0
    return SparseCode(theta, support, residuals)


def sc_reconstruct(theta, dictionary) -> np.ndarray:
    """``sum_i theta_i V_i`` reshaped to ``(3J, N)`` (flat if given bare atoms)."""
    theta = theta.theta if isinstance(theta, SparseCode) else np.asarray(theta, dtype=np.float64)
    if isinstance(dictionary, Dictionary):
        return (theta @ dictionary.atoms).reshape(dictionary.shape)
    return theta @ np.asarray(dictionary, dtype=np.float64)


def lasso_encode(x: np.ndarray, atoms: np.ndarray, alpha: float, iterations: int = 100) -> np.ndarray:
    """FISTA for ``min_U 0.5 ||X - U V||^2 + alpha ||U||_1`` (rows of X coded independently)."""
    gram = atoms @ atoms.T
    step = 1.0 / max(np.linalg.eigvalsh(gram)[-1], 1e-12)
    xv = x @ atoms.T
    u = np.zeros((len(x), len(atoms)))
    w, t = u.copy(), 1.0
    for _ in range(iterations):
        g = w @ gram - xv
        u_next = w - step * g
        u_next = np.sign(u_next) * np.maximum(np.abs(u_next) - step * alpha, 0.0)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        w = u_next + ((t - 1.0) / t_next) * (u_next - u)
        u, t = u_next, t_next
    return u


def _objective(x, u, atoms, alpha) -> float:
    r = x - u @ atoms
    return 0.5 * float(np.sum(r * r)) + alpha * float(np.abs(u).sum())


def learn_dictionary(
    rows,
    n_atoms: int = 500,
    alpha: float = 1.0,
    batch_size: int = 32,
    iterations: int = 1000,
    seed=0,
    coder: str = "lasso",
    sparsity: int = 20,
    shape: Optional[tuple] = None,
) -> Dictionary:
    """Online dictionary learning with mini-batch coding and block-coordinate atom updates.

    ``rows`` is ``(M, d)`` (vectorized complete actions) or ``(M, 3J, N)``.
    Past statistics are kept as the usual sufficient sums ``A = sum U^T U``
    and ``B = sum U^T X``; every atom is renormalized to unit length after
    its update. The batch objective (measured before the update) is logged.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 3:
        shape = shape or rows.shape[1:]
        rows = rows.reshape(len(rows), -1)
    if rows.ndim != 2 or len(rows) == 0:
        raise SparseCodingError("dictionary learning needs a non-empty (M, d) training matrix")
    if coder not in ("lasso", "omp"):
        raise SparseCodingError(f"unknown coder {coder!r}")
    m, d = rows.shape
    shape = tuple(shape) if shape is not None else (d,)
    if m < n_atoms:
        warnings.warn(f"{m} training rows for {n_atoms} atoms; the dictionary is overcomplete in the data", RuntimeWarning)
    rng = np.random.default_rng([*(int(v) for v in np.atleast_1d(seed)), 17])
    pick = rng.choice(m, size=min(m, n_atoms), replace=False)
    atoms = rows[pick]
    if n_atoms > m:
        atoms = np.vstack([atoms, rng.standard_normal((n_atoms - m, d))])
    atoms = _normalize(atoms + 1e-6 * rng.standard_normal(atoms.shape))
    a_stat = np.zeros((n_atoms, n_atoms))
    b_stat = np.zeros((n_atoms, d))
    log = []
    for it in range(iterations):
        batch = rows[rng.choice(m, size=min(batch_size, m), replace=False)]
        if coder == "lasso":
            u = lasso_encode(batch, atoms, alpha)
        else:
            u = np.stack([omp_encode(x, atoms, None, sparsity).theta for x in batch])
        log.append(_objective(batch, u, atoms, alpha) / len(batch))
        a_stat += u.T @ u
        b_stat += u.T @ batch
        for k in range(n_atoms):
            if a_stat[k, k] < 1e-12:
                continue
            atoms[k] += (b_stat[k] - a_stat[k] @ atoms) / a_stat[k, k]
            norm = np.linalg.norm(atoms[k])
            if norm > 1e-12:
                atoms[k] /= norm
            else:
                atoms[k] = _normalize(rng.standard_normal((1, d)))[0]
    return Dictionary(atoms, shape, log)


def encode_sequences(y, masks, dictionary: Dictionary, sparsity: int = 20, tol: float = 1e-4) -> np.ndarray:
    """Masked OMP completion of a batch ``(B, 3J, N)``; masks are MaskSpecs or 0/1 arrays."""
    from .inversion import mask_rows

    y = np.asarray(y, dtype=np.float64)
    rows = mask_rows(masks, y.shape)
    out = np.empty_like(y)
    for i in range(len(y)):
        code = omp_encode(y[i].ravel(), dictionary, rows[i].ravel(), sparsity, tol)
        out[i] = sc_reconstruct(code, dictionary)
    return out
