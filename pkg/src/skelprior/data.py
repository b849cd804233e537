"""Skeletal action sequences, preprocessing, and the joint sampling operator.

An action is a ``3J x N`` matrix: rows ``3j, 3j+1, 3j+2`` hold the x, y, z
trajectory of joint ``j`` and columns are frames. Coordinates are meters.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .nn.params import atomic_write_text

FLOAT_FMT = "%.9g"


class DataError(ValueError):
    """Malformed sequence, manifest, topology or mask."""


@dataclass(frozen=True)
class ActionSequence:
    coords: np.ndarray
    label: Optional[int] = None
    subject: Optional[str] = None
    name: Optional[str] = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[0] % 3 or coords.shape[0] == 0 or coords.shape[1] == 0:
            raise DataError(f"coords must be 3J x N, got shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise DataError("coords contain non-finite values")
        object.__setattr__(self, "coords", coords)

    @property
    def joints(self) -> int:
        return self.coords.shape[0] // 3

    @property
    def frames(self) -> int:
        return self.coords.shape[1]

    def positions(self) -> np.ndarray:
        """Coordinates as ``(N, J, 3)``."""
        return self.coords.reshape(self.joints, 3, self.frames).transpose(2, 0, 1)

    def with_coords(self, coords: np.ndarray) -> "ActionSequence":
        return ActionSequence(coords, self.label, self.subject, self.name)


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple
    hip: int = 0
    limbs: Mapping[str, tuple] = field(default_factory=dict)
    parents: Optional[tuple] = None

    def __post_init__(self):
        names = tuple(self.joint_names)
        object.__setattr__(self, "joint_names", names)
        n = len(names)
        if not 0 <= self.hip < n:
            raise DataError(f"hip index {self.hip} outside [0, {n})")
        limbs = {str(k): tuple(int(i) for i in v) for k, v in dict(self.limbs).items()}
        for limb, idx in limbs.items():
            bad = [i for i in idx if not 0 <= i < n]
            if bad:
                raise DataError(f"limb {limb!r} has joint indices outside [0, {n}): {bad}")
        object.__setattr__(self, "limbs", limbs)
        if self.parents is not None:
            object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))

    @property
    def joints(self) -> int:
        return len(self.joint_names)

    def to_dict(self) -> dict:
        out = {"joint_names": list(self.joint_names), "hip": self.hip, "limbs": {k: list(v) for k, v in self.limbs.items()}}
        if self.parents is not None:
            out["parents"] = list(self.parents)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "SkeletonTopology":
        try:
            return cls(tuple(d["joint_names"]), int(d.get("hip", 0)), d.get("limbs", {}), d.get("parents"))
        except KeyError as exc:
            raise DataError(f"topology is missing field {exc}") from exc

    @classmethod
    def load(cls, path) -> "SkeletonTopology":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        atomic_write_text(Path(path), json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class MaskSpec:
    """Which joints are observed.

    ``observed`` is a boolean vector of length J (same joints missing for the
    whole sequence) or an ``(N, J)`` boolean matrix (per-frame masks).
    """

    observed: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed)
        if obs.dtype != bool:
            raise DataError("mask must be boolean")
        if obs.ndim not in (1, 2) or obs.shape[-1] == 0:
            raise DataError(f"mask must have shape (J,) or (N, J), got {obs.shape}")
        obs = obs.copy()
        obs.flags.writeable = False
        object.__setattr__(self, "observed", obs)
        if not obs.any(axis=-1).all():
            raise DataError("mask observes no joints (OTP would be 0)")

    @property
    def mode(self) -> str:
        return "per-sequence" if self.observed.ndim == 1 else "per-frame"

    @property
    def joints(self) -> int:
        return self.observed.shape[-1]

    @property
    def observed_count(self) -> int:
        """K for per-sequence masks; mean K over frames for per-frame ones (rounded)."""
        if self.observed.ndim == 1:
            return int(self.observed.sum())
        return int(round(self.observed.sum(axis=1).mean()))

    @property
    def otp(self) -> float:
        return 100.0 * float(self.observed.sum(axis=-1).mean()) / self.joints

    def observed_joints(self) -> list[int]:
        if self.observed.ndim != 1:
            raise DataError("observed_joints() is defined for per-sequence masks only")
        return [int(i) for i in np.flatnonzero(self.observed)]

    def frame_observed(self, frames: int) -> np.ndarray:
        """``(N, J)`` boolean view of the mask for a sequence of ``frames`` frames."""
        if self.observed.ndim == 1:
            return np.broadcast_to(self.observed, (frames, self.joints))
        if self.observed.shape[0] != frames:
            raise DataError(f"per-frame mask covers {self.observed.shape[0]} frames, sequence has {frames}")
        return self.observed

    def rows(self, frames: int, dtype=np.float64) -> np.ndarray:
        """``3J x N`` 0/1 matrix: the diagonal of the sampling operator A."""
        fo = self.frame_observed(frames)
        return np.repeat(fo.T, 3, axis=0).astype(dtype)

    @classmethod
    def from_indices(cls, joints: int, observed: Iterable[int]) -> "MaskSpec":
        obs = np.zeros(joints, dtype=bool)
        idx = list(observed)
        bad = [i for i in idx if not 0 <= i < joints]
        if bad:
            raise DataError(f"observed indices outside [0, {joints}): {bad}")
        obs[idx] = True
        return cls(obs)

    @classmethod
    def full(cls, joints: int) -> "MaskSpec":
        return cls(np.ones(joints, dtype=bool))

    def to_dict(self) -> dict:
        if self.observed.ndim == 1:
            return {"mode": self.mode, "joints": self.joints, "observed": self.observed_joints()}
        return {
            "mode": self.mode,
            "joints": self.joints,
            "observed": [[int(i) for i in np.flatnonzero(row)] for row in self.observed],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MaskSpec":
        joints = int(d["joints"])
        if d.get("mode", "per-sequence") == "per-sequence":
            return cls.from_indices(joints, d["observed"])
        frames = d["observed"]
        obs = np.zeros((len(frames), joints), dtype=bool)
        for n, idx in enumerate(frames):
            obs[n, list(idx)] = True
        return cls(obs)


def otp_percent(observed: int, joints: int) -> float:
    return 100.0 * observed / joints


def observed_count(joints: int, otp: float) -> int:
    """K = round-half-up(J * OTP / 100)."""
    if not 0 < otp <= 100:
        raise DataError(f"OTP must lie in (0, 100], got {otp}")
    # tiny epsilon keeps exact halves (e.g. 31 * 50 / 100 = 15.5) from rounding down on fp noise
    return int(math.floor(joints * otp / 100.0 + 0.5 + 1e-9))


# ---------------------------------------------------------------- preprocessing


def resample(seq: ActionSequence, target_frames: int) -> ActionSequence:
    """Piecewise-linear resampling onto ``target_frames`` uniformly spaced times."""
    if target_frames < 2:
        raise DataError(f"target frame count must be >= 2, got {target_frames}")
    n = seq.frames
    if n < 2:
        raise DataError("cannot resample a single-frame sequence")
    if n == target_frames:
        return seq.with_coords(seq.coords.copy())
    src = np.arange(n, dtype=np.float64)
    dst = np.linspace(0.0, n - 1, target_frames)
    coords = np.stack([np.interp(dst, src, row) for row in seq.coords])
    return seq.with_coords(coords)


def hip_center(seq: ActionSequence, hip: Union[int, SkeletonTopology] = 0) -> ActionSequence:
    """Translate every frame so the hip joint sits at the origin."""
    if isinstance(hip, SkeletonTopology):
        hip = hip.hip
    if not 0 <= hip < seq.joints:
        raise DataError(f"hip index {hip} outside [0, {seq.joints})")
    pos = seq.coords.reshape(seq.joints, 3, seq.frames)
    centered = pos - pos[hip : hip + 1]
    return seq.with_coords(centered.reshape(seq.coords.shape))


def _coords(x) -> np.ndarray:
    return x.coords if isinstance(x, ActionSequence) else np.asarray(x, dtype=np.float64)


def _check_mask(coords: np.ndarray, mask: MaskSpec):
    if coords.shape[0] != 3 * mask.joints:
        raise DataError(f"mask is for {mask.joints} joints, sequence has {coords.shape[0] // 3}")
    mask.frame_observed(coords.shape[1])


def apply_mask(x, mask: MaskSpec):
    """Zero the rows of unobserved joints (per frame for per-frame masks).

    Accepts an :class:`ActionSequence` or a bare ``3J x N`` array and returns
    the same kind.
    """
    coords = _coords(x)
    _check_mask(coords, mask)
    # where() rather than a product so NaN or inf in missing rows cannot leak through
    out = np.where(mask.rows(coords.shape[1]) > 0, coords, 0.0)
    return x.with_coords(out) if isinstance(x, ActionSequence) else out


def mean_trajectories(sequences: Sequence, masks: Optional[Sequence[MaskSpec]] = None) -> np.ndarray:
    """Per-entry mean over the training set, counting observed entries only.

    Entries never observed get 0. Unobserved values are never read, so the
    statistics are computable from masked data alone.
    """
    arrs = [_coords(s) for s in sequences]
    if not arrs:
        raise DataError("cannot compute mean trajectories of an empty set")
    total = np.zeros_like(arrs[0])
    count = np.zeros_like(arrs[0])
    for i, a in enumerate(arrs):
        if a.shape != total.shape:
            raise DataError(f"sequence {i} has shape {a.shape}, expected {total.shape}")
        if masks is None:
            total += a
            count += 1
        else:
            _check_mask(a, masks[i])
            w = masks[i].rows(a.shape[1])
            total += np.where(w > 0, a, 0.0)
            count += w
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


FILL_STRATEGIES = ("mean-trajectory", "zeros", "nearest-joint")


def fill_missing(y, mask: MaskSpec, strategy: str = "mean-trajectory", stats: Optional[np.ndarray] = None):
    """Replace unobserved rows; observed rows are returned untouched.

    ``stats`` are training-set mean trajectories (``3J x N``). They are
    required for ``mean-trajectory``; for ``nearest-joint`` they give the
    reference position of each missing joint (origin if absent).
    """
    coords = _coords(y)
    _check_mask(coords, mask)
    if strategy == "zeros":
        out = apply_mask(coords, mask)
    elif strategy == "mean-trajectory":
        if stats is None:
            raise DataError("mean-trajectory fill requires training-set mean trajectories")
        stats = np.asarray(stats)
        if stats.shape != coords.shape:
            raise DataError(f"mean trajectories have shape {stats.shape}, sequence {coords.shape}")
        w = mask.rows(coords.shape[1])
        out = np.where(w > 0, coords, stats)
    elif strategy == "nearest-joint":
        out = nearest_joint_fill(coords, mask, stats)
    else:
        raise DataError(f"unknown fill strategy {strategy!r}; expected one of {FILL_STRATEGIES}")
    return y.with_coords(out) if isinstance(y, ActionSequence) else out


def nearest_joint_fill(y, mask: MaskSpec, reference: Optional[np.ndarray] = None) -> np.ndarray:
    """Per frame, copy the observed joint closest to each missing joint's reference position.

    The true position of a missing joint is unknown, so distance is measured
    from ``reference`` (normally the training mean trajectory; the origin if
    None). Ties go to the lower joint index.
    """
    coords = _coords(y)
    _check_mask(coords, mask)
    J, N = coords.shape[0] // 3, coords.shape[1]
    fo = mask.frame_observed(N)
    pos = coords.reshape(J, 3, N).transpose(2, 0, 1).copy()  # (N, J, 3)
    ref = np.zeros_like(pos) if reference is None else np.asarray(reference).reshape(J, 3, N).transpose(2, 0, 1)
    for n in range(N):
        obs = np.flatnonzero(fo[n])
        if obs.size == 0:
            raise DataError(f"frame {n} has no observed joints")
        missing = np.flatnonzero(~fo[n])
        if missing.size == 0:
            continue
        d = np.linalg.norm(ref[n][missing][:, None, :] - pos[n][obs][None, :, :], axis=2)
        # argmin returns the first minimum, and obs is ascending: lower index wins ties
        pos[n, missing] = pos[n, obs[np.argmin(d, axis=1)]]
    return pos.transpose(1, 2, 0).reshape(3 * J, N)


# ---------------------------------------------------------------- mask generation


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _draw_observed(joints: int, k: int, hip: int, rng: np.random.Generator) -> np.ndarray:
    obs = np.zeros(joints, dtype=bool)
    obs[hip] = True
    others = np.array([j for j in range(joints) if j != hip])
    obs[rng.choice(others, size=k - 1, replace=False)] = True
    return obs


def gen_random_mask(joints: int, otp: float, seed=None, hip: int = 0) -> MaskSpec:
    """K = round-half-up(J * otp / 100) joints observed; the hip is always among them."""
    k = observed_count(joints, otp)
    if k < 1:
        raise DataError(f"OTP {otp} with J={joints} observes no joints")
    if not 0 <= hip < joints:
        raise DataError(f"hip index {hip} outside [0, {joints})")
    return MaskSpec(_draw_observed(joints, k, hip, _rng(seed)))


def gen_perframe_mask(joints: int, frames: int, otp: float, seed=None, hip: int = 0) -> MaskSpec:
    """Independent :func:`gen_random_mask` draw for every frame."""
    k = observed_count(joints, otp)
    if k < 1:
        raise DataError(f"OTP {otp} with J={joints} observes no joints")
    rng = _rng(seed)
    return MaskSpec(np.stack([_draw_observed(joints, k, hip, rng) for _ in range(frames)]))


def gen_limb_mask(topology: SkeletonTopology, limb: str) -> MaskSpec:
    if limb not in topology.limbs:
        raise DataError(f"unknown limb {limb!r}; topology has {sorted(topology.limbs)}")
    obs = np.ones(topology.joints, dtype=bool)
    obs[list(topology.limbs[limb])] = False
    return MaskSpec(obs)


# ---------------------------------------------------------------- file formats

_HEADER = re.compile(r"^#\s*(.*)$")


def write_sequence_csv(path, seq: ActionSequence):
    """One row per frame, columns x0,y0,z0,x1,...; header ``# J=<J> N=<N> label=<id>``."""
    label = "none" if seq.label is None else str(seq.label)
    header = f"# J={seq.joints} N={seq.frames} label={label}"
    if seq.subject is not None:
        header += f" subject={seq.subject}"
    lines = [header]
    for frame in seq.coords.T:
        lines.append(",".join(FLOAT_FMT % v for v in frame))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_sequence_csv(path) -> ActionSequence:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty file")
    m = _HEADER.match(lines[0])
    if not m:
        raise DataError(f"{path}: missing '# J=<J> N=<N> label=<id>' header")
    fields = dict(tok.split("=", 1) for tok in m.group(1).split() if "=" in tok)
    try:
        joints, frames = int(fields["J"]), int(fields["N"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: header needs integer J and N") from exc
    label_txt = fields.get("label", "none")
    label = None if label_txt in ("none", "") else int(label_txt)
    try:
        rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric value ({exc})") from exc
    if rows.shape != (frames, 3 * joints):
        raise DataError(f"{path}: expected {frames} rows of {3 * joints} values, got {rows.shape}")
    return ActionSequence(rows.T.copy(), label, fields.get("subject"), path.stem)


def write_matrix_csv(path, matrix: np.ndarray):
    lines = [",".join(FLOAT_FMT % v for v in row) for row in np.atleast_2d(matrix)]
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


@dataclass
class DatasetManifest:
    """Sequence files plus labels, subjects, topology and split definitions.

    ``entries`` are dicts with ``path`` (relative to the manifest), ``label``
    and ``subject``. ``splits`` maps split name to entry indices.
    """

    entries: list
    topology: SkeletonTopology
    target_frames: Optional[int] = None
    splits: dict = field(default_factory=dict)
    root: Path = Path(".")

    def validate(self):
        seen: dict[int, str] = {}
        for name, idx in self.splits.items():
            for i in idx:
                if not 0 <= i < len(self.entries):
                    raise DataError(f"split {name!r} references entry {i} of {len(self.entries)}")
                if i in seen:
                    raise DataError(f"entry {i} appears in splits {seen[i]!r} and {name!r}")
                seen[i] = name
        for e in self.entries:
            if not (self.root / e["path"]).exists():
                raise DataError(f"missing sequence file {e['path']}")

    def load(self, split: Optional[str] = None) -> list[ActionSequence]:
        idx = range(len(self.entries)) if split is None else self.splits[split]
        out = []
        for i in idx:
            e = self.entries[i]
            seq = read_sequence_csv(self.root / e["path"])
            out.append(ActionSequence(seq.coords, e.get("label", seq.label), e.get("subject", seq.subject), seq.name))
        return out

    def to_dict(self) -> dict:
        return {
            "entries": self.entries,
            "topology": self.topology.to_dict(),
            "target_frames": self.target_frames,
            "hip": self.topology.hip,
            "splits": self.splits,
        }

    def save(self, path):
        atomic_write_text(Path(path), json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load_manifest(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
        topo = d.get("topology")
        if isinstance(topo, str):
            topology = SkeletonTopology.load(path.parent / topo)
        elif isinstance(topo, dict):
            topology = SkeletonTopology.from_dict(topo)
        else:
            raise DataError(f"{path}: manifest needs a topology (inline object or file path)")
        splits = {k: [int(i) for i in v] for k, v in d.get("splits", {}).items()}
        m = cls(list(d["entries"]), topology, d.get("target_frames"), splits, path.parent)
        m.validate()
        return m


def split_by_subject(entries: Sequence[Mapping], test_subjects: Iterable) -> dict:
    test = {str(s) for s in test_subjects}
    return {
        "train": [i for i, e in enumerate(entries) if str(e.get("subject")) not in test],
        "test": [i for i, e in enumerate(entries) if str(e.get("subject")) in test],
    }


def split_by_class(entries: Sequence[Mapping], test_classes: Iterable[int]) -> dict:
    test = {int(c) for c in test_classes}
    return {
        "train": [i for i, e in enumerate(entries) if int(e["label"]) not in test],
        "test": [i for i, e in enumerate(entries) if int(e["label"]) in test],
    }


def stack(sequences: Sequence, dtype=np.float32) -> np.ndarray:
    """``(M, 3J, N)`` batch array from sequences or arrays."""
    return np.stack([_coords(s) for s in sequences]).astype(dtype)
