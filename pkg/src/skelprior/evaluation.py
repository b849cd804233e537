"""Metrics, the train/test OTP grid runner and feature export."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .data import (
    DatasetManifest,
    SkeletonTopology,
    apply_mask,
    fill_missing,
    gen_limb_mask,
    mean_trajectories,
    stack,
    write_matrix_csv,
)
from .inversion import InversionConfig, feedforward_reconstruct, latent_optimize, nearest_joint_baseline
from .models import (
    AutoencoderSpec,
    ClassifierSpec,
    FramewiseSpec,
    build_autoencoder,
    build_classifier,
    build_framewise_ae,
    load_model,
    save_model,
)
from .nn.params import atomic_write_text
from .sparse import Dictionary, encode_sequences, learn_dictionary
from .training import TrainConfig, draw_training_masks, prepare_autoencoder_data, train_autoencoder, train_classifier

log = logging.getLogger(__name__)

CM_PER_M = 100.0

# method -> model family it needs (None: runs standalone)
METHODS = {
    "feedforward": "ae",
    "latent-opt": "ae",
    "framewise-ff": "framewise",
    "framewise-opt": "framewise",
    "sparse": "dictionary",
    "nearest": None,
    "incomplete": None,
}
MASK_KINDS = ("random", "per-frame", "limb")
REPORT_COLUMNS = ("train_otp", "test_otp", "test_otp_actual", "mask", "method", "rmse_cm", "accuracy", "macro_accuracy", "sequences")


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------- metrics


def rmse(x, x_hat):
    """Root-mean-square joint position error in centimeters (inputs in meters).

    ``sqrt(1/(NJ) sum_n sum_j ||X_nj - X_hat_nj||^2)`` for a ``(3J, N)``
    pair; a ``(B, 3J, N)`` batch gives one value per sequence.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise EvaluationError(f"rmse: shapes differ {x.shape} vs {x_hat.shape}")
    if x.ndim not in (2, 3) or x.shape[-2] % 3:
        raise EvaluationError(f"rmse expects (3J, N) or (B, 3J, N), got {x.shape}")
    joints, frames = x.shape[-2] // 3, x.shape[-1]
    d = x - x_hat
    sq = np.einsum("...cn,...cn->...", d, d)
    out = CM_PER_M * np.sqrt(sq / (joints * frames))
    return float(out) if x.ndim == 2 else out


def classification_scores(predictions, labels) -> tuple[float, float]:
    """Micro (per-sample) and macro (mean per-class) top-1 accuracy in percent."""
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape or p.ndim != 1:
        raise EvaluationError(f"{p.shape} predictions for {y.shape} labels")
    if len(y) == 0:
        raise EvaluationError("no labels to score")
    hit = p == y
    per_class = [hit[y == c].mean() for c in np.unique(y)]
    return 100.0 * float(hit.mean()), 100.0 * float(np.mean(per_class))


def predict(classifier, sequences, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(sequences)
    return np.concatenate([classifier.predict(x[i : i + batch_size].astype(classifier.params.dtype)) for i in range(0, len(x), batch_size)])


def accuracy(classifier, sequences, labels, batch_size: int = 256) -> float:
    """Top-1 accuracy (percent) of an eval-mode classifier."""
    labels = np.asarray(labels)
    if len(labels) != len(sequences):
        raise EvaluationError(f"{len(labels)} labels for {len(sequences)} sequences")
    return classification_scores(predict(classifier, sequences, batch_size), labels)[0]


def ssm(x) -> np.ndarray:
    """Self-similarity matrix ``exp(-||X_n - X_m|| / sigma^2)`` of a ``(3J, N)`` sequence.

    Distances are Euclidean between frame vectors; ``sigma^2`` is the
    population variance of the N(N-1)/2 distinct pairwise distances. A
    sequence with zero variance maps to the all-ones matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise EvaluationError(f"ssm needs a (3J, N) sequence with N >= 2, got {x.shape}")
    frames = x.T
    sq = np.sum(frames**2, axis=1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * frames @ frames.T, 0.0))
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    var = float(np.var(d[np.triu_indices(len(d), 1)]))
    if var <= 0.0:
        return np.ones_like(d)
    return np.exp(-d / var)


def export_features(classifier, sequences, labels=None, path=None, batch_size: int = 256) -> np.ndarray:
    """Penultimate-layer features, one row per sequence; optionally written as CSV with a label column."""
    x = np.asarray(sequences)
    feats = np.concatenate(
        [classifier.features(x[i : i + batch_size].astype(classifier.params.dtype)).data for i in range(0, len(x), batch_size)]
    ).astype(np.float64)
    if path is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", *(f"f{i}" for i in range(feats.shape[1]))])
        for i, row in enumerate(feats):
            label = "" if labels is None else int(labels[i])
            w.writerow([label, *("%.9g" % v for v in row)])
        atomic_write_text(Path(path), buf.getvalue())
    return feats


# ---------------------------------------------------------------- configuration


@dataclass
class DictionaryConfig:
    n_atoms: int = 500
    alpha: float = 1.0
    batch_size: int = 32
    iterations: int = 1000
    sparsity: int = 20
    tol: float = 1e-4
    coder: str = "lasso"


def _sub(cls, d):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise EvaluationError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


@dataclass
class GridConfig:
    """Everything a grid run depends on; its hash names the report."""

    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    train_otps: list = field(default_factory=lambda: [100, 75, 50])
    test_otps: list = field(default_factory=lambda: [100, 75, 50])
    methods: list = field(default_factory=lambda: ["feedforward", "latent-opt"])
    mask_kind: str = "random"
    limbs: list = field(default_factory=list)
    masked_loss: str = "ambient"
    seed: int = 0
    autoencoder: dict = field(default_factory=dict)
    framewise: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    ae_training: dict = field(default_factory=dict)
    framewise_training: dict = field(default_factory=dict)
    classifier_training: dict = field(default_factory=dict)
    inversion: dict = field(default_factory=dict)
    dictionary: dict = field(default_factory=dict)
    unseen_classes: int = 0
    repetitions: int = 1
    ssm_examples: int = 0

    def __post_init__(self):
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise EvaluationError(f"unknown methods {bad}; choose from {sorted(METHODS)}")
        if self.mask_kind not in MASK_KINDS:
            raise EvaluationError(f"mask_kind must be one of {MASK_KINDS}")
        if self.masked_loss not in ("ambient", "denoising"):
            raise EvaluationError("masked_loss must be 'ambient' or 'denoising'")
        if self.repetitions < 1 or self.unseen_classes < 0:
            raise EvaluationError("repetitions must be >= 1 and unseen_classes >= 0")
        self.train_otps = [float(v) for v in self.train_otps]
        self.test_otps = [float(v) for v in self.test_otps]
        for v in self.train_otps + self.test_otps:
            if not 0 < v <= 100:
                raise EvaluationError(f"OTP {v} outside (0, 100]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "GridConfig":
        return _sub(cls, dict(d))

    @classmethod
    def load(cls, path) -> "GridConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # typed views of the nested dictionaries
    def ae_train_config(self, loss_mode: str, otp: float) -> TrainConfig:
        d = {**self.ae_training, "loss_mode": loss_mode, "train_otp": otp, "seed": self.seed}
        d.setdefault("mask_mode", "per-frame" if self.mask_kind == "per-frame" else "per-sequence")
        return TrainConfig.from_dict(d)

    def fw_train_config(self, loss_mode: str, otp: float) -> TrainConfig:
        base = self.framewise_training or self.ae_training
        d = {**base, "loss_mode": loss_mode, "train_otp": otp, "seed": self.seed}
        d.setdefault("mask_mode", "per-frame" if self.mask_kind == "per-frame" else "per-sequence")
        return TrainConfig.from_dict(d)

    def inversion_config(self) -> InversionConfig:
        return _sub(InversionConfig, {"seed": self.seed, **self.inversion})

    def dictionary_config(self) -> DictionaryConfig:
        return _sub(DictionaryConfig, self.dictionary)


# ---------------------------------------------------------------- data


@dataclass
class GridData:
    train_x: np.ndarray
    train_labels: np.ndarray
    test_x: np.ndarray
    test_labels: np.ndarray
    topology: SkeletonTopology
    classes: int

    @property
    def joints(self) -> int:
        return self.train_x.shape[1] // 3

    @property
    def frames(self) -> int:
        return self.train_x.shape[2]


def load_grid_data(dataset: dict, root: Optional[Path] = None) -> GridData:
    """Synthetic data (``kind: synthetic`` plus generator arguments) or a prepared manifest."""
    d = dict(dataset)
    kind = d.pop("kind", "synthetic")
    if kind == "synthetic":
        from .synth import make_synthetic

        ds = make_synthetic(**d)
        train, test, topo, classes = ds.train, ds.test, ds.topology, ds.classes
    elif kind == "manifest":
        path = Path(d["path"])
        if not path.is_absolute() and root is not None:
            path = root / path
        m = DatasetManifest.load_manifest(path)
        train, test, topo = m.load(d.get("train_split", "train")), m.load(d.get("test_split", "test")), m.topology
        classes = int(d.get("classes", 1 + max(s.label for s in train + test)))
    else:
        raise EvaluationError(f"unknown dataset kind {kind!r}")
    if any(s.label is None for s in train + test):
        raise EvaluationError("grid evaluation needs a label on every sequence")
    return GridData(
        stack(train, np.float64),
        np.array([s.label for s in train]),
        stack(test, np.float64),
        np.array([s.label for s in test]),
        topo,
        classes,
    )


def unseen_split(classes: int, unseen: int, seed: int, rep: int) -> list[int]:
    """Random held-out class set for repetition ``rep``."""
    if not 0 < unseen < classes:
        raise EvaluationError(f"cannot hold out {unseen} of {classes} classes")
    rng = np.random.default_rng([seed, 53, rep])
    return sorted(int(c) for c in rng.choice(classes, size=unseen, replace=False))


def _rep_data(cfg: GridConfig, data: GridData, rep: int):
    """Training sequences for the priors and the test subset for one repetition."""
    if cfg.unseen_classes == 0:
        return data.train_x, data.test_x, data.test_labels, []
    held = unseen_split(data.classes, cfg.unseen_classes, cfg.seed, rep)
    seen = ~np.isin(data.train_labels, held)
    test = np.isin(data.test_labels, held)
    return data.train_x[seen], data.test_x[test], data.test_labels[test], held


def _otp_code(otp: float) -> int:
    return int(round(otp * 1000))


def _train_masks(cfg: GridConfig, x: np.ndarray, otp: float, rep: int, hip: int = 0):
    if otp >= 100:
        return None
    mode = "per-frame" if cfg.mask_kind == "per-frame" else "per-sequence"
    return draw_training_masks(len(x), x.shape[1] // 3, x.shape[2], otp, [cfg.seed, 11, rep, _otp_code(otp)], mode, hip)


def _test_cells(cfg: GridConfig, topology: SkeletonTopology):
    """``(label, otp)`` for every test column."""
    if cfg.mask_kind != "limb":
        return [("random" if cfg.mask_kind == "random" else "per-frame", otp) for otp in cfg.test_otps]
    limbs = cfg.limbs or sorted(topology.limbs)
    return [(f"limb:{limb}", gen_limb_mask(topology, limb).otp) for limb in limbs]


def _test_masks(cfg: GridConfig, data: GridData, label: str, otp: float, count: int, rep: int):
    if label.startswith("limb:"):
        return [gen_limb_mask(data.topology, label[5:])] * count
    mode = "per-frame" if label == "per-frame" else "per-sequence"
    return draw_training_masks(count, data.joints, data.frames, otp, [cfg.seed, 13, rep, _otp_code(otp)], mode, data.topology.hip)


# ---------------------------------------------------------------- model preparation


def _loss_mode(cfg: GridConfig, otp: float) -> str:
    return "full" if otp >= 100 else cfg.masked_loss


def model_name(cfg: GridConfig, family: str, otp: float, rep: int = 0) -> str:
    """Checkpoint file stem of a prior trained at ``otp``."""
    parts = [family, _loss_mode(cfg, otp)]
    if otp < 100 and cfg.mask_kind == "per-frame":
        parts.append("perframe")
    parts.append(f"otp{otp:g}")
    if cfg.unseen_classes:
        parts.append(f"rep{rep}")
    return "_".join(parts)


def _ae_spec(cfg: GridConfig, data: GridData) -> AutoencoderSpec:
    return AutoencoderSpec(joints=data.joints, frames=data.frames, **cfg.autoencoder)


def _fw_spec(cfg: GridConfig, data: GridData) -> FramewiseSpec:
    d = dict(cfg.framewise)
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    return FramewiseSpec(joints=data.joints, **d)


def _clf_spec(cfg: GridConfig, data: GridData) -> ClassifierSpec:
    d = {"classes": data.classes, **cfg.classifier}
    return ClassifierSpec.from_dict({"joints": data.joints, "frames": data.frames, **d})


def _try_load(path: Path, spec):
    try:
        return load_model(path, expected_spec=spec)
    except (nn.CheckpointError, OSError):
        return None


def train_models(cfg: GridConfig, data: GridData, ckpt_dir, progress: Callable[[str], None] = log.info) -> dict:
    """Train (or reuse) the classifier and every prior the configured methods need.

    A checkpoint is reused when it exists and matches the model spec.
    Returns ``{name: path}``; training logs land next to the checkpoints.
    """
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    made = {}
    clf_spec = _clf_spec(cfg, data)
    path = ckpt_dir / "classifier"
    if _try_load(path, clf_spec) is None:
        progress("training classifier")
        clf = build_classifier(clf_spec, seed=cfg.seed)
        tc = TrainConfig.from_dict({**cfg.classifier_training, "seed": cfg.seed})
        train_classifier(clf, data.train_x, data.train_labels, tc).write_csv(ckpt_dir / "classifier_log.csv")
        save_model(path, clf, meta={"train_config": tc.to_dict()})
    made["classifier"] = path
    families = {METHODS[m] for m in cfg.methods} - {None}
    for rep in range(cfg.repetitions if cfg.unseen_classes else 1):
        train_x, _, _, _ = _rep_data(cfg, data, rep)
        for otp in cfg.train_otps:
            masks = _train_masks(cfg, train_x, otp, rep, data.topology.hip)
            mode = _loss_mode(cfg, otp)
            for family in sorted(families):
                name = model_name(cfg, family, otp, rep)
                path = ckpt_dir / name
                made[name] = path
                if family == "dictionary":
                    if path.with_suffix(".json").exists():
                        continue
                    progress(f"learning dictionary {name}")
                    dc = cfg.dictionary_config()
                    # the dictionary sees training data the way the priors do: filled when incomplete
                    rows = prepare_autoencoder_data(train_x, "full" if mode == "full" else "denoising", masks).inputs
                    d = learn_dictionary(
                        rows.astype(np.float64), dc.n_atoms, dc.alpha, dc.batch_size, dc.iterations, [cfg.seed, rep, _otp_code(otp)], dc.coder, dc.sparsity
                    )
                    d.save(path)
                    continue
                if family == "ae":
                    spec, build, tc = _ae_spec(cfg, data), build_autoencoder, cfg.ae_train_config(mode, otp)
                else:
                    spec, build, tc = _fw_spec(cfg, data), build_framewise_ae, cfg.fw_train_config(mode, otp)
                if _try_load(path, spec) is not None:
                    continue
                progress(f"training {name}")
                model = build(spec, seed=cfg.seed)
                res = train_autoencoder(model, train_x, tc, masks, hip=data.topology.hip)
                res.log.write_csv(ckpt_dir / f"{name}_log.csv")
                save_model(path, model, extra={"fill_stats": res.fill_stats}, meta={"train_config": tc.to_dict()})
    return made


# ---------------------------------------------------------------- grid


@dataclass
class ExperimentReport:
    rows: list
    details: dict
    failed: list
    config_hash: str
    environment: dict
    ssm: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for r in self.rows:
            if r["method"] not in METHODS:
                raise EvaluationError(f"row has unregistered method {r['method']!r}")
            if not (r["rmse_cm"] >= 0 and 0 <= r["accuracy"] <= 100):
                raise EvaluationError(f"row out of range: {r}")

    def row(self, train_otp, test_otp, method, mask=None) -> dict:
        for r in self.rows:
            if r["train_otp"] == float(train_otp) and abs(r["test_otp"] - float(test_otp)) < 1e-9 and r["method"] == method:
                if mask is None or r["mask"] == mask:
                    return r
        raise KeyError((train_otp, test_otp, method, mask))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    f"{r['train_otp']:g}",
                    f"{r['test_otp']:.1f}",
                    f"{r['test_otp_actual']:.1f}",
                    r["mask"],
                    r["method"],
                    f"{r['rmse_cm']:.4f}",
                    f"{r['accuracy']:.2f}",
                    f"{r['macro_accuracy']:.2f}",
                    r["sequences"],
                ]
            )
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "config_hash": self.config_hash,
            "environment": self.environment,
            "columns": list(REPORT_COLUMNS),
            "rows": self.rows,
            "failed": self.failed,
            "details": self.details,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.csv", out / "report.json"]
        atomic_write_text(written[0], self.to_csv())
        atomic_write_text(written[1], self.to_json())
        for name, mat in sorted(self.ssm.items()):
            p = out / "ssm" / f"{name}.csv"
            p.parent.mkdir(exist_ok=True)
            write_matrix_csv(p, mat)
            written.append(p)
        return written

    def table(self, metric: str = "accuracy") -> str:
        """Plain-text pivot: one line per (train, test) cell, one column per method."""
        methods = list(dict.fromkeys(r["method"] for r in self.rows))
        cells = list(dict.fromkeys((r["train_otp"], r["test_otp"], r["mask"]) for r in self.rows))
        lines = ["train  test  mask        " + "".join(f"{m:>15}" for m in methods)]
        for tr, te, mk in cells:
            vals = []
            for m in methods:
                try:
                    vals.append(f"{self.row(tr, te, m, mk)[metric]:15.2f}")
                except KeyError:
                    vals.append(f"{'-':>15}")
            lines.append(f"{tr:5g} {te:5.1f}  {mk:<11} " + "".join(vals))
        return "\n".join(lines)


_WORKER: dict = {}


def _init_worker(cfg_dict, data, ckpt_dir):
    _WORKER.update(cfg=GridConfig.from_dict(cfg_dict), data=data, ckpt=Path(ckpt_dir))


def _cell_worker(key):
    return _evaluate_cell(_WORKER["cfg"], _WORKER["data"], _WORKER["ckpt"], *key)


def _evaluate_cell(cfg: GridConfig, data: GridData, ckpt_dir: Path, rep: int, train_otp: float, mask_label: str, test_otp: float):
    """All configured methods on one (repetition, train OTP, test mask) cell."""
    train_x, test_x, test_labels, held = _rep_data(cfg, data, rep)
    masks = _test_masks(cfg, data, mask_label, test_otp, len(test_x), rep)
    y = np.stack([apply_mask(x, m) for x, m in zip(test_x, masks)])
    tmasks = _train_masks(cfg, train_x, train_otp, rep, data.topology.hip)
    if tmasks is None:
        stats = mean_trajectories(train_x)
    else:
        stats = mean_trajectories(np.stack([apply_mask(x, m) for x, m in zip(train_x, tmasks)]), tmasks)
    inv = cfg.inversion_config()
    clf, _, _ = load_model(ckpt_dir / "classifier", expected_spec=_clf_spec(cfg, data))
    outputs, failed, extra = {}, [], {}
    loaded = {}

    def prior(family):
        if family not in loaded:
            name = model_name(cfg, family, train_otp, rep)
            path = ckpt_dir / name
            if family == "dictionary":
                loaded[family] = Dictionary.load(path) if path.with_suffix(".json").exists() else None
            else:
                spec = _ae_spec(cfg, data) if family == "ae" else _fw_spec(cfg, data)
                got = _try_load(path, spec)
                loaded[family] = None if got is None else (got[0], got[1].get("fill_stats", stats))
        return loaded[family]

    for method in cfg.methods:
        family = METHODS[method]
        if family is not None and prior(family) is None:
            failed.append({"method": method, "reason": f"missing checkpoint {model_name(cfg, family, train_otp, rep)}"})
            continue
        if method in ("feedforward", "latent-opt", "framewise-ff", "framewise-opt"):
            model, fstats = loaded[family]
            ff_key, opt_key = ("feedforward", "latent-opt") if family == "ae" else ("framewise-ff", "framewise-opt")
            if ff_key not in outputs:
                x_ff, z0 = feedforward_reconstruct(model, y, masks, fstats)
                outputs[ff_key] = x_ff
                extra[f"{family}_z0"] = z0
            if method == opt_key:
                res = latent_optimize(model, y, masks, extra[f"{family}_z0"], inv)
                outputs[opt_key] = np.stack([r.x_hat for r in res])
                gain = np.array([1.0 - r.objective / r.initial_objective if r.initial_objective > 0 else 0.0 for r in res])
                extra[f"{opt_key}_objective_gain"] = gain
        elif method == "sparse":
            dc = cfg.dictionary_config()
            outputs[method] = encode_sequences(y, masks, loaded[family], dc.sparsity, dc.tol)
        elif method == "nearest":
            outputs[method] = nearest_joint_baseline(y, masks, stats)
        elif method == "incomplete":
            outputs[method] = np.stack([fill_missing(s, m, "mean-trajectory", stats) for s, m in zip(y, masks)])

    results = {}
    for method in cfg.methods:
        if method not in outputs:
            continue
        x_hat = outputs[method]
        err = rmse(test_x, x_hat)
        pred = predict(clf, x_hat)
        micro, macro = classification_scores(pred, test_labels)
        detail = {
            "rmse_cm": [float(v) for v in err],
            "predictions": [int(v) for v in pred],
            "rmse_mean": float(err.mean()),
            "accuracy": micro,
            "macro_accuracy": macro,
        }
        gain = extra.get(f"{method}_objective_gain")
        if gain is not None:
            detail["objective_gain"] = [float(v) for v in gain]
        results[method] = detail
    ssm_out = {}
    for i in range(min(cfg.ssm_examples, len(test_x))):
        tag = f"r{rep}_tr{train_otp:g}_{mask_label.replace(':', '-')}_te{test_otp:.1f}_seq{i}"
        ssm_out[f"{tag}_truth"] = ssm(test_x[i])
        for method, x_hat in outputs.items():
            ssm_out[f"{tag}_{method}"] = ssm(x_hat[i])
    return {
        "rep": rep,
        "train_otp": train_otp,
        "test_otp": test_otp,
        "mask": mask_label,
        "test_otp_actual": float(np.mean([m.otp for m in masks])),
        "held_out_classes": held,
        "labels": [int(v) for v in test_labels],
        "methods": results,
        "failed": failed,
        "ssm": ssm_out,
    }


def run_grid(cfg: GridConfig, data: GridData, ckpt_dir, workers: int = 1) -> ExperimentReport:
    """Evaluate every (train OTP, test mask, method) cell from existing checkpoints.

    Cells whose checkpoints are missing are listed under ``failed`` and left
    out of the rows. With ``unseen_classes`` set, each row averages the
    repetitions, whose per-repetition numbers stay in the details.
    """
    ckpt_dir = Path(ckpt_dir)
    reps = range(cfg.repetitions if cfg.unseen_classes else 1)
    keys = [(rep, tr, label, te) for rep in reps for tr in cfg.train_otps for label, te in _test_cells(cfg, data.topology)]
    if not (ckpt_dir / "classifier.json").exists():
        failed = [{"cell": list(k), "reason": "missing classifier checkpoint"} for k in keys]
        return ExperimentReport([], {}, failed, cfg.config_hash(), _environment())
    if workers > 1 and len(keys) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(cfg.to_dict(), data, str(ckpt_dir))) as pool:
            cells = list(pool.map(_cell_worker, keys))
    else:
        cells = [_evaluate_cell(cfg, data, ckpt_dir, *k) for k in keys]
    rows, failed, details, ssm_all = [], [], {}, {}
    for tr in cfg.train_otps:
        for label, te in _test_cells(cfg, data.topology):
            group = [c for c in cells if c["train_otp"] == tr and c["mask"] == label and c["test_otp"] == te]
            for c in group:
                for f in c["failed"]:
                    failed.append({"rep": c["rep"], "train_otp": tr, "test_otp": te, "mask": label, **f})
            for method in cfg.methods:
                got = [c["methods"][method] for c in group if method in c["methods"]]
                if len(got) != len(group):
                    continue
                rows.append(
                    {
                        "train_otp": tr,
                        "test_otp": round(te, 6),
                        "test_otp_actual": float(np.mean([c["test_otp_actual"] for c in group])),
                        "mask": label,
                        "method": method,
                        "rmse_cm": float(np.mean([g["rmse_mean"] for g in got])),
                        "accuracy": float(np.mean([g["accuracy"] for g in got])),
                        "macro_accuracy": float(np.mean([g["macro_accuracy"] for g in got])),
                        "sequences": int(sum(len(g["predictions"]) for g in got)),
                    }
                )
    for c in cells:
        key = f"rep{c['rep']}/train{c['train_otp']:g}/{c['mask']}/test{c['test_otp']:.1f}"
        details[key] = {k: c[k] for k in ("held_out_classes", "labels", "methods")}
        ssm_all.update(c["ssm"])
    return ExperimentReport(rows, details, failed, cfg.config_hash(), _environment(), ssm_all)


def _environment() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__}


def run_experiment(cfg: GridConfig, ckpt_dir, out_dir=None, workers: int = 1, data: Optional[GridData] = None, progress=log.info) -> ExperimentReport:
    """Train what is missing, evaluate the grid, and optionally write the report."""
    data = data if data is not None else load_grid_data(cfg.dataset)
    train_models(cfg, data, ckpt_dir, progress)
    report = run_grid(cfg, data, ckpt_dir, workers)
    if out_dir is not None:
        report.write(out_dir)
    return report


def load_preset(name: str) -> GridConfig:
    from . import presets_dir

    return GridConfig.load(presets_dir() / f"{name}.json")

