"""Command-line interface: data preparation, training, reconstruction, reporting.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure,
4 report written with some cells failed.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, nn, presets_dir
from .data import (
    DataError,
    DatasetManifest,
    MaskSpec,
    SkeletonTopology,
    apply_mask,
    gen_limb_mask,
    hip_center,
    mean_trajectories,
    read_matrix_csv,
    read_sequence_csv,
    resample,
    stack,
    write_matrix_csv,
    write_sequence_csv,
)
from .evaluation import METHODS, EvaluationError, GridConfig, export_features, load_grid_data, run_experiment, run_grid
from .inversion import InversionConfig, InversionDiverged, feedforward_reconstruct, latent_optimize, nearest_joint_baseline
from .models import (
    AutoencoderSpec,
    ClassifierSpec,
    FramewiseSpec,
    SpecError,
    build_autoencoder,
    build_classifier,
    build_framewise_ae,
    load_model,
    save_model,
)
from .nn.params import atomic_write_text
from .sparse import Dictionary, SparseCodingError, encode_sequences, learn_dictionary
from .training import TrainConfig, TrainingDiverged, draw_training_masks, prepare_autoencoder_data, train_autoencoder, train_classifier

DATA_ENV = "SKELPRIOR_DATA"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3, 4

log = logging.getLogger("skelprior")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config plumbing


def _resolve(ref, base: Path) -> Path:
    if isinstance(ref, str) and ref.startswith("preset:"):
        return presets_dir() / ref[len("preset:") :]
    p = Path(ref)
    return p if p.is_absolute() else base / p


def load_config(path) -> tuple[dict, Path]:
    """A run config; string values of ``model``, ``training`` and ``dataset`` are paths to further JSON files.

    ``preset:<file>`` refers to the presets shipped with the package and
    ``<file>#<key>`` selects one entry of that file.
    """
    if path is None:
        return {}, Path.cwd()
    path = _resolve(str(path), Path.cwd())
    try:
        cfg = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("model", "training", "dataset", "inversion", "dictionary"):
        ref = cfg.get(key)
        if isinstance(ref, str):
            file, _, sub = ref.partition("#")
            doc = json.loads(_resolve(file, path.parent).read_text())
            cfg[key] = doc[sub] if sub else doc
    return cfg, path.parent


def _data_root(args) -> Path:
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"no dataset given: pass --data or set {DATA_ENV}")
    return Path(root)


def _load_split(root: Path, split: str):
    manifest = DatasetManifest.load_manifest(root / "manifest.json" if root.is_dir() else root)
    if split not in manifest.splits:
        raise DataError(f"manifest has no split {split!r}; available: {sorted(manifest.splits)}")
    return manifest, manifest.load(split)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _git_hash():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def write_manifest(out_dir: Path, args, config: dict, inputs, outputs, started: dt.datetime) -> Path:
    """Run manifest listing every artifact the command wrote."""
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_path": None if args.config is None else str(args.config),
        "config_hash": _digest(config),
        "seed": args.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(str(p) for p in outputs),
        "version": __version__,
        "git": _git_hash(),
        "started": started.isoformat(timespec="seconds"),
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    }
    path = Path(out_dir) / f"{args.command}_manifest.json"
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")
    return path


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg, base):
    """Write the synthetic dataset as sequence CSVs with a manifest."""
    from .synth import make_synthetic

    params = dict(cfg.get("dataset", cfg))
    params.pop("kind", None)
    if args.seed is not None:
        params["seed"] = args.seed
    ds = make_synthetic(**params)
    out = Path(args.out)
    (out / "sequences").mkdir(parents=True, exist_ok=True)
    entries, splits, written = [], {"train": [], "test": []}, []
    for split, seqs in (("train", ds.train), ("test", ds.test)):
        for s in seqs:
            rel = f"sequences/{s.name}.csv"
            write_sequence_csv(out / rel, s)
            written.append(out / rel)
            splits[split].append(len(entries))
            entries.append({"path": rel, "label": s.label, "subject": None})
    m = DatasetManifest(entries, ds.topology, ds.train[0].frames, splits, out)
    m.save(out / "manifest.json")
    written.append(out / "manifest.json")
    print(f"wrote {len(entries)} sequences to {out}")
    return EXIT_OK, [], written


def cmd_prepare(args, cfg, base):
    """Resample, hip-center, emit splits and train-set mean trajectories."""
    src = _data_root(args)
    manifest = DatasetManifest.load_manifest(src / "manifest.json" if src.is_dir() else src)
    frames = args.frames or cfg.get("target_frames") or manifest.target_frames
    if not frames:
        raise UsageError("target frame count unknown: pass --frames")
    if args.hip is not None:
        manifest.topology = SkeletonTopology(manifest.topology.joint_names, args.hip, manifest.topology.limbs, manifest.topology.parents)
    out = Path(args.out)
    (out / "sequences").mkdir(parents=True, exist_ok=True)
    entries, index, errors, written = [], {}, [], []
    for i, e in enumerate(manifest.entries):
        try:
            seq = read_sequence_csv(manifest.root / e["path"])
            if seq.joints != manifest.topology.joints:
                raise DataError(f"{e['path']}: {seq.joints} joints, topology has {manifest.topology.joints}")
            seq = hip_center(resample(seq, frames), manifest.topology.hip)
        except DataError as exc:
            errors.append(str(exc))
            log.error("%s", exc)
            continue
        rel = f"sequences/{Path(e['path']).stem}.csv"
        write_sequence_csv(out / rel, seq)
        written.append(out / rel)
        index[i] = len(entries)
        entries.append({"path": rel, "label": e.get("label", seq.label), "subject": e.get("subject", seq.subject)})
    splits = {k: [index[i] for i in v if i in index] for k, v in manifest.splits.items()}
    prepared = DatasetManifest(entries, manifest.topology, frames, splits, out)
    prepared.save(out / "manifest.json")
    written.append(out / "manifest.json")
    train = prepared.load("train") if "train" in splits else prepared.load()
    if train:
        write_matrix_csv(out / "mean_trajectories.csv", mean_trajectories(train))
        written.append(out / "mean_trajectories.csv")
    print(f"prepared {len(entries)} of {len(manifest.entries)} sequences at N={frames}")
    return (EXIT_DATA if errors else EXIT_OK), [src], written


def _training_config(cfg, args, **defaults) -> TrainConfig:
    d = {**defaults, **cfg.get("training", {})}
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _model_section(cfg, key):
    model = cfg.get("model", {})
    return dict(model.get(key, model))


def _train_prior(args, cfg, family):
    root = _data_root(args)
    manifest, seqs = _load_split(root, args.split)
    x = stack(seqs, np.float64)
    joints, frames = x.shape[1] // 3, x.shape[2]
    tc = _training_config(cfg, args)
    seed = tc.seed
    if family == "ae":
        spec = AutoencoderSpec(joints=joints, frames=frames, **_model_section(cfg, "autoencoder"))
        model = build_autoencoder(spec, seed=seed)
    else:
        d = _model_section(cfg, "framewise")
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        spec = FramewiseSpec(joints=joints, **d)
        model = build_framewise_ae(spec, seed=seed)
    masks = None
    if tc.loss_mode != "full":
        code = int(round(tc.train_otp * 1000))
        masks = draw_training_masks(len(x), joints, frames, tc.train_otp, [seed, 11, 0, code], tc.mask_mode, manifest.topology.hip)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    state = out.parent / f"{out.name}_state"
    res = train_autoencoder(
        model, x, tc, masks, manifest.topology.hip, resume=args.resume, state_path=state, state_every=args.checkpoint_every
    )
    logfile = out.parent / f"{out.name}_log.csv"
    res.log.write_csv(logfile)
    paths = [save_model(out, model, extra={"fill_stats": res.fill_stats}, meta={"train_config": tc.to_dict()})]
    print(f"trained {family} for {tc.iterations} iterations in {res.log.wall_clock:.1f}s; final loss {res.log.rows[-1][2]:.6g}")
    return EXIT_OK, [root], paths + [out.with_suffix(".bin"), logfile, state.with_suffix(".json"), state.with_suffix(".bin")]


def cmd_train_ae(args, cfg, base):
    return _train_prior(args, cfg, "ae")


def cmd_train_framewise(args, cfg, base):
    return _train_prior(args, cfg, "framewise")


def cmd_train_classifier(args, cfg, base):
    root = _data_root(args)
    _, seqs = _load_split(root, args.split)
    x = stack(seqs, np.float64)
    labels = [s.label for s in seqs]
    if any(v is None for v in labels):
        raise DataError("classifier training needs a label on every sequence")
    d = _model_section(cfg, "classifier")
    d.setdefault("classes", int(max(labels)) + 1)
    spec = ClassifierSpec.from_dict({"joints": x.shape[1] // 3, "frames": x.shape[2], **d})
    tc = _training_config(cfg, args)
    clf = build_classifier(spec, seed=tc.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    state = out.parent / f"{out.name}_state"
    tlog = train_classifier(clf, x, np.array(labels), tc, resume=args.resume, state_path=state, state_every=args.checkpoint_every)
    logfile = out.parent / f"{out.name}_log.csv"
    tlog.write_csv(logfile)
    save_model(out, clf, meta={"train_config": tc.to_dict()})
    print(f"trained classifier; final loss {tlog.rows[-1][2]:.6g}")
    return EXIT_OK, [root], [out.with_suffix(".json"), out.with_suffix(".bin"), logfile, state.with_suffix(".json"), state.with_suffix(".bin")]


def cmd_learn_dictionary(args, cfg, base):
    root = _data_root(args)
    manifest, seqs = _load_split(root, args.split)
    x = stack(seqs, np.float64)
    dc = dict(cfg.get("dictionary", {}))
    otp = float(dc.pop("train_otp", 100.0))
    seed = args.seed if args.seed is not None else int(dc.pop("seed", 0))
    dc.pop("seed", None)
    dc.pop("tol", None)
    masks = None
    if otp < 100:
        code = int(round(otp * 1000))
        masks = draw_training_masks(len(x), x.shape[1] // 3, x.shape[2], otp, [seed, 11, 0, code], "per-sequence", manifest.topology.hip)
    rows = prepare_autoencoder_data(x, "full" if masks is None else "denoising", masks).inputs
    d = learn_dictionary(rows.astype(np.float64), seed=seed, **dc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    d.save(out)
    curve = out.parent / f"{out.name}_objective.csv"
    atomic_write_text(curve, "iteration,objective\n" + "".join(f"{i + 1},{v:.9g}\n" for i, v in enumerate(d.objective)))
    print(f"learned {d.size} atoms; last batch objective {d.objective[-1]:.6g}")
    return EXIT_OK, [root], [out.with_suffix(".json"), out.with_suffix(".bin"), curve]


def _reconstruct_masks(args, seqs, topology: SkeletonTopology):
    joints, frames = seqs[0].joints, seqs[0].frames
    chosen = [o for o in (args.otp, args.observed, args.limb) if o is not None]
    if len(chosen) != 1:
        raise UsageError("give exactly one of --otp, --observed, --limb")
    if args.observed is not None:
        idx = [int(v) for v in args.observed.split(",") if v.strip()]
        return [MaskSpec.from_indices(joints, idx)] * len(seqs)
    if args.limb is not None:
        return [gen_limb_mask(topology, args.limb)] * len(seqs)
    mode = "per-frame" if args.per_frame else "per-sequence"
    seed = 0 if args.seed is None else args.seed
    return draw_training_masks(len(seqs), joints, frames, args.otp, [seed, 13, 0, int(round(args.otp * 1000))], mode, topology.hip)


def cmd_reconstruct(args, cfg, base):
    method = {"framewise": "framewise-opt"}.get(args.method, args.method)
    if method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {sorted(METHODS) + ['framewise']}")
    root = _data_root(args)
    manifest, seqs = _load_split(root, args.split)
    if not seqs:
        raise DataError("no input sequences")
    masks = _reconstruct_masks(args, seqs, manifest.topology)
    y = np.stack([apply_mask(s.coords, m) for s, m in zip(seqs, masks)])
    stats = read_matrix_csv(args.stats) if args.stats else None
    if stats is None and (root / "mean_trajectories.csv").exists():
        stats = read_matrix_csv(root / "mean_trajectories.csv")
    inv = InversionConfig(**{"seed": args.seed or 0, **cfg.get("inversion", {})})
    sidecars = [{} for _ in seqs]
    family = METHODS[method]
    if family in ("ae", "framewise"):
        if not args.model:
            raise UsageError(f"method {method} needs --model")
        model, extra, _ = load_model(args.model)
        fstats = extra.get("fill_stats", stats)
        x_hat, z0 = feedforward_reconstruct(model, y, masks, fstats)
        if method in ("latent-opt", "framewise-opt"):
            res = latent_optimize(model, y, masks, z0, inv)
            x_hat = np.stack([r.x_hat for r in res])
            sidecars = [r.to_dict() for r in res]
    elif method == "sparse":
        if not args.dictionary:
            raise UsageError("method sparse needs --dictionary")
        dc = cfg.get("dictionary", {})
        x_hat = encode_sequences(y, masks, Dictionary.load(args.dictionary), int(dc.get("sparsity", 20)), float(dc.get("tol", 1e-4)))
    elif method == "nearest":
        x_hat = nearest_joint_baseline(y, masks, stats)
    else:
        if stats is None:
            raise UsageError("method incomplete needs mean trajectories (--stats)")
        from .data import fill_missing

        x_hat = np.stack([fill_missing(s, m, "mean-trajectory", stats) for s, m in zip(y, masks)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s, m, xh, side in zip(seqs, masks, x_hat, sidecars):
        name = s.name or f"seq{len(written):05d}"
        path = out / f"{name}.csv"
        write_sequence_csv(path, s.with_coords(xh))
        side = {"method": method, "observed": np.asarray(m.observed, dtype=int).tolist(), **side}
        atomic_write_text(path.with_suffix(".json"), json.dumps(side, indent=1) + "\n")
        written += [path, path.with_suffix(".json")]
    print(f"reconstructed {len(seqs)} sequences with {method}")
    return EXIT_OK, [root] + [p for p in (args.model, args.dictionary) if p], written


def cmd_report(args, cfg, base):
    if not cfg:
        raise UsageError("report needs --config pointing at a grid config")
    grid = GridConfig.from_dict({k: v for k, v in cfg.items() if k != "model"})
    if args.seed is not None:
        grid.seed = args.seed
    out = Path(args.out)
    ckpt = Path(args.checkpoints) if args.checkpoints else out / "checkpoints"
    data = load_grid_data(grid.dataset, base)
    if args.no_train:
        report = run_grid(grid, data, ckpt, args.workers)
    else:
        report = run_experiment(grid, ckpt, None, args.workers, data, progress=lambda m: print(m, flush=True))
    written = report.write(out)
    print(report.table("accuracy"))
    print()
    print(report.table("rmse_cm"))
    if not report.rows:
        log.error("no grid cell could be evaluated (%d failures)", len(report.failed))
        return EXIT_DATA, [ckpt], written
    if report.failed:
        log.warning("%d cells failed; see report.json", len(report.failed))
        return EXIT_PARTIAL, [ckpt], written
    return EXIT_OK, [ckpt], written


def cmd_export_features(args, cfg, base):
    root = _data_root(args)
    _, seqs = _load_split(root, args.split)
    clf, _, _ = load_model(args.classifier)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_features(clf, stack(seqs, np.float64), [s.label if s.label is not None else -1 for s in seqs], out)
    print(f"wrote features of {len(seqs)} sequences to {out}")
    return EXIT_OK, [root, args.classifier], [out]


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train-ae": cmd_train_ae,
    "train-framewise": cmd_train_framewise,
    "train-classifier": cmd_train_classifier,
    "learn-dictionary": cmd_learn_dictionary,
    "reconstruct": cmd_reconstruct,
    "report": cmd_report,
    "export-features": cmd_export_features,
}


def build_parser() -> argparse.ArgumentParser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (preset:<file> for shipped presets)")
    common.add_argument("--seed", type=int, help="overrides the config seed; all randomness derives from it")
    common.add_argument("--workers", type=int, default=1, help="worker processes for grid cells")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("--data", help=f"dataset directory or manifest (default: ${DATA_ENV})")
    common.add_argument("--split", default="train", help="manifest split to read")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="skelprior", description="Complete unobserved skeleton joints with a learned action prior.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)
    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    sp = sub.add_parser("prepare", parents=[common], help="resample and hip-center a raw dataset")
    sp.add_argument("--frames", type=int, help="target frame count")
    sp.add_argument("--hip", type=int, help="hip joint index (default from topology)")
    trainers = {
        "train-ae": "train the action autoencoder prior",
        "train-framewise": "train the frame-wise autoencoder baseline",
        "train-classifier": "train the TCN action classifier",
    }
    for name, text in trainers.items():
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--resume", help="training state to resume from")
        sp.add_argument("--checkpoint-every", type=int, default=1000, help="iterations between training-state saves")
    sub.add_parser("learn-dictionary", parents=[common], help="learn the sparse-coding dictionary")
    sp = sub.add_parser("reconstruct", parents=[common], help="complete masked sequences")
    sp.add_argument("--method", required=True, help="feedforward, latent-opt, framewise, framewise-ff, sparse, nearest, incomplete")
    sp.add_argument("--model", help="autoencoder checkpoint")
    sp.add_argument("--dictionary", help="dictionary checkpoint")
    sp.add_argument("--stats", help="mean-trajectory CSV (default: <data>/mean_trajectories.csv)")
    sp.add_argument("--otp", type=float, help="observe a random OTP percent of joints per sequence")
    sp.add_argument("--per-frame", action="store_true", help="redraw the random joints every frame")
    sp.add_argument("--observed", help="comma-separated observed joint indices")
    sp.add_argument("--limb", help="hide one limb of the topology")
    sp = sub.add_parser("report", parents=[common], help="train what is missing and evaluate the OTP grid")
    sp.add_argument("--checkpoints", help="checkpoint directory (default: <out>/checkpoints)")
    sp.add_argument("--no-train", action="store_true", help="evaluate existing checkpoints only")
    sp = sub.add_parser("export-features", parents=[common], help="penultimate classifier features as CSV")
    sp.add_argument("--classifier", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = dt.datetime.now(dt.timezone.utc)
    try:
        cfg, base = load_config(args.config)
        code, inputs, outputs = COMMANDS[args.command](args, cfg, base)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"skelprior: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, InversionDiverged, FloatingPointError) as exc:
        print(f"skelprior: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, EvaluationError, SpecError, SparseCodingError, nn.CheckpointError, nn.ShapeError, OSError, KeyError) as exc:
        print(f"skelprior: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out_dir = Path(args.out)
    out_dir = out_dir if out_dir.is_dir() else out_dir.parent
    write_manifest(out_dir, args, cfg, inputs, [p for p in outputs if Path(p).exists()], started)
    return code


if __name__ == "__main__":
    sys.exit(main())
