import itertools
import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from skelprior.data import otp_percent
from skelprior.evaluation import (
    METHODS,
    REPORT_COLUMNS,
    EvaluationError,
    ExperimentReport,
    GridConfig,
    accuracy,
    classification_scores,
    export_features,
    load_grid_data,
    model_name,
    rmse,
    run_experiment,
    run_grid,
    ssm,
    unseen_split,
)
from skelprior.models import ClassifierSpec, build_classifier
from skelprior.training import TrainConfig, full_loss, train_classifier

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- rmse


def test_rmse_zero_and_offset_fixture():
    x = np.random.default_rng(0).normal(size=(3 * 31, 100))
    assert rmse(x, x) == 0.0
    assert rmse(x, x + 0.03) == pytest.approx(np.sqrt(3) * 3.0, abs=1e-6)
    assert abs(rmse(x, x + 0.03) - 5.196) < 1e-3


def test_rmse_batch_and_shape_checks():
    x = np.zeros((4, 6, 5))
    out = rmse(x, x + 0.01)
    assert out.shape == (4,)
    np.testing.assert_allclose(out, np.sqrt(3) * 1.0)
    with pytest.raises(EvaluationError):
        rmse(x, x[:, :, :4])
    with pytest.raises(EvaluationError):
        rmse(np.zeros((5, 4)), np.zeros((5, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_rmse_joint_permutation_invariant(joints, frames, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, joints, 3, frames))
    perm = rng.permutation(joints)
    flat = lambda a: a.reshape(3 * joints, frames)
    assert rmse(flat(x[perm]), flat(y[perm])) == pytest.approx(rmse(flat(x), flat(y)), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5).map(lambda j: 3 * j), st.integers(1, 9)), elements=finite), st.integers(0, 2**31 - 1))
def test_rmse_consistent_with_full_loss(x, seed):
    x_hat = x + np.random.default_rng(seed).normal(size=x.shape)
    joints, frames = x.shape[0] // 3, x.shape[1]
    meters = rmse(x, x_hat) / 100.0
    assert meters**2 * joints * frames == pytest.approx(full_loss(x, x_hat), rel=1e-9)


# ---------------------------------------------------------------- accuracy


class Constant:
    def __init__(self, label):
        self.label = label
        self.params = type("P", (), {"dtype": np.float32})()

    def predict(self, x):
        return np.full(len(x), self.label)


def test_constant_classifier_scores_class_prior():
    labels = np.array([0, 0, 0, 1, 2, 2])
    x = np.zeros((6, 3, 4))
    assert accuracy(Constant(0), x, labels) == pytest.approx(50.0)
    micro, macro = classification_scores(np.zeros(6, int), labels)
    assert micro == pytest.approx(50.0) and macro == pytest.approx(100.0 / 3)


def test_accuracy_rejects_label_mismatch():
    with pytest.raises(EvaluationError):
        accuracy(Constant(0), np.zeros((3, 3, 4)), [0, 1])
    with pytest.raises(EvaluationError):
        classification_scores([], [])


@pytest.fixture(scope="module")
def toy_classifier():
    rng = np.random.default_rng(0)
    labels = np.arange(24) % 3
    t = np.linspace(0, 2 * np.pi, 8)
    x = np.stack([np.sin((c + 1) * t + rng.uniform(0, 0.3)) * np.ones((6, 1)) for c in labels]) + 0.05 * rng.normal(size=(24, 6, 8))
    clf = build_classifier(ClassifierSpec(joints=2, frames=8, classes=3, block_widths=(8, 8), filter_width=3), seed=0)
    train_classifier(clf, x, labels, TrainConfig(iterations=150, batch_size=8, learning_rate=3e-3, milestones={}))
    return clf, x, labels


def test_memorized_training_set_scores_100(toy_classifier):
    clf, x, labels = toy_classifier
    assert accuracy(clf, x, labels) == 100.0


def test_features_separate_trained_classes(toy_classifier, tmp_path):
    clf, x, labels = toy_classifier
    feats = export_features(clf, x, labels, tmp_path / "f.csv")
    assert feats.shape == (24, 8)
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0].split(",")[0] == "label" and len(lines) == 25
    assert all(len(ln.split(",")) == 9 for ln in lines)
    d = np.linalg.norm(feats[:, None] - feats[None], axis=2)
    same = labels[:, None] == labels[None]
    off = ~np.eye(24, dtype=bool)
    assert d[~same].mean() > d[same & off].mean()
    twice = export_features(clf, np.stack([x[0], x[0]]))
    np.testing.assert_array_equal(twice[0], twice[1])


# ---------------------------------------------------------------- ssm


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4).map(lambda j: 3 * j), st.integers(2, 12)), elements=finite))
def test_ssm_symmetric_unit_diagonal(x):
    s = ssm(x)
    assert s.shape == (x.shape[1],) * 2
    np.testing.assert_array_equal(s, s.T)
    np.testing.assert_array_equal(np.diag(s), 1.0)
    # far pairs may underflow to exactly zero when sigma^2 is tiny
    assert np.all((s >= 0) & (s <= 1))


def test_ssm_constant_sequence_is_all_ones():
    np.testing.assert_array_equal(ssm(np.ones((6, 5))), np.ones((5, 5)))
    # two frames give a single distance, whose population variance is zero
    np.testing.assert_array_equal(ssm(np.array([[0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])), np.ones((2, 2)))


def test_ssm_hand_computed_three_frames():
    x = np.array([[0.0, 1.0, 3.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    d01, d02, d12 = 1.0, 3.0, 2.0
    mean = (d01 + d02 + d12) / 3
    var = ((d01 - mean) ** 2 + (d02 - mean) ** 2 + (d12 - mean) ** 2) / 3
    expect = np.exp(-np.array([[0, d01, d02], [d01, 0, d12], [d02, d12, 0]]) / var)
    np.testing.assert_allclose(ssm(x), expect, rtol=1e-12)


def test_ssm_rejects_single_frame():
    with pytest.raises(EvaluationError):
        ssm(np.zeros((3, 1)))


# ---------------------------------------------------------------- grid


def tiny_config(**kw):
    base = dict(
        dataset={"kind": "synthetic", "n_train": 24, "n_test": 12, "frames": 16, "classes": 3},
        train_otps=[100, 50],
        test_otps=[75, 50],
        methods=list(METHODS),
        autoencoder=dict(depth=2, filter_width=3, feature_maps=8, latent_dim=8),
        framewise=dict(hidden=[16], latent_dim=4),
        classifier=dict(block_widths=[8, 8], filter_width=3),
        ae_training=dict(iterations=20, batch_size=8, milestones={}),
        classifier_training=dict(iterations=20, batch_size=8, milestones={}),
        inversion=dict(iterations=5, learning_rate=0.1),
        dictionary=dict(n_atoms=10, iterations=3, sparsity=3),
    )
    base.update(kw)
    return GridConfig(**base)


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    cfg = tiny_config()
    ckpt = tmp_path_factory.mktemp("ckpt")
    data = load_grid_data(cfg.dataset)
    report = run_experiment(cfg, ckpt, data=data)
    return cfg, data, ckpt, report


def test_grid_config_validation_and_hash(tmp_path):
    with pytest.raises(EvaluationError):
        tiny_config(methods=["magic"])
    with pytest.raises(EvaluationError):
        tiny_config(mask_kind="blocks")
    with pytest.raises(EvaluationError):
        tiny_config(test_otps=[0])
    with pytest.raises(EvaluationError):
        GridConfig.from_dict({"bogus": 1})
    a, b = tiny_config(), tiny_config()
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != tiny_config(seed=1).config_hash()
    (tmp_path / "g.json").write_text(json.dumps(a.to_dict()))
    assert GridConfig.load(tmp_path / "g.json").config_hash() == a.config_hash()


def test_report_rows_cover_grid(grid):
    cfg, _, _, report = grid
    assert len(report.rows) == len(cfg.train_otps) * len(cfg.test_otps) * len(cfg.methods)
    assert not report.failed
    keys = {(r["train_otp"], r["test_otp"], r["method"]) for r in report.rows}
    assert keys == set(itertools.product([100.0, 50.0], [75.0, 50.0], METHODS))
    header = report.to_csv().splitlines()[0]
    assert header == ",".join(REPORT_COLUMNS)
    for r in report.rows:
        assert r["sequences"] == 12
    doc = json.loads(report.to_json())
    assert doc["config_hash"] == cfg.config_hash()
    cell = doc["details"]["rep0/train50/random/test50.0"]["methods"]["latent-opt"]
    assert len(cell["rmse_cm"]) == 12 and len(cell["objective_gain"]) == 12
    assert min(cell["objective_gain"]) >= 0.0


def test_report_otp_column_uses_rounded_k(grid):
    cfg, data, ckpt, _ = grid
    cfg2 = tiny_config(train_otps=[100], test_otps=[50, 75], methods=["nearest"])
    report = run_grid(cfg2, data, ckpt)
    # J=15: K = 8 and 11 after rounding half up
    assert [r["test_otp"] for r in report.rows] == [50.0, 75.0]
    assert [r["test_otp_actual"] for r in report.rows] == pytest.approx([otp_percent(8, 15), otp_percent(11, 15)])
    assert report.to_csv().splitlines()[1].startswith("100,50.0,53.3,random,nearest,")


def test_grid_is_deterministic_and_worker_independent(grid):
    cfg, data, ckpt, report = grid
    again = run_grid(cfg, data, ckpt)
    assert again.to_csv() == report.to_csv() and again.to_json() == report.to_json()
    pooled = run_grid(cfg, data, ckpt, workers=2)
    assert pooled.to_json() == report.to_json()


def test_missing_checkpoint_marks_cells_failed(grid, tmp_path):
    cfg, data, ckpt, _ = grid
    partial = tmp_path / "ck"
    shutil.copytree(ckpt, partial)
    for suffix in (".json", ".bin"):
        (partial / (model_name(cfg, "ae", 50) + suffix)).unlink()
    report = run_grid(cfg, data, partial)
    failed = {(f["train_otp"], f["test_otp"], f["method"]) for f in report.failed}
    assert failed == {(50.0, te, m) for te in (75.0, 50.0) for m in ("feedforward", "latent-opt")}
    assert len(report.rows) == 2 * 2 * len(METHODS) - len(failed)
    for suffix in (".json", ".bin"):
        (partial / ("classifier" + suffix)).unlink()
    empty = run_grid(cfg, data, partial)
    assert empty.rows == [] and len(empty.failed) == 4


def test_report_write_files(grid, tmp_path):
    cfg, data, ckpt, _ = grid
    report = run_grid(tiny_config(ssm_examples=1, methods=["nearest", "feedforward"]), data, ckpt)
    written = report.write(tmp_path)
    names = {p.name for p in written}
    assert {"report.csv", "report.json"} <= names
    ssm_files = [p for p in written if p.parent.name == "ssm"]
    # truth plus two methods, for each of the four cells
    assert len(ssm_files) == 4 * 3
    m = np.loadtxt(ssm_files[0], delimiter=",")
    np.testing.assert_array_equal(np.diag(m), 1.0)


def test_report_rejects_bad_rows():
    row = dict(train_otp=100.0, test_otp=50.0, mask="random", method="feedforward", rmse_cm=1.0, accuracy=50.0, macro_accuracy=50.0, sequences=1)
    ExperimentReport([row], {}, [], "h", {})
    with pytest.raises(EvaluationError):
        ExperimentReport([{**row, "method": "oracle"}], {}, [], "h", {})
    with pytest.raises(EvaluationError):
        ExperimentReport([{**row, "accuracy": 101.0}], {}, [], "h", {})


def test_limb_masks_report_limb_otp(grid):
    cfg, data, ckpt, _ = grid
    report = run_grid(tiny_config(mask_kind="limb", limbs=["left_arm", "right_leg"], methods=["nearest"], train_otps=[100]), data, ckpt)
    assert [r["mask"] for r in report.rows] == ["limb:left_arm", "limb:right_leg"]
    assert all(r["test_otp"] == pytest.approx(80.0) for r in report.rows)


def test_per_frame_grid_runs(tmp_path):
    cfg = tiny_config(mask_kind="per-frame", methods=["feedforward", "latent-opt", "nearest"], train_otps=[50], test_otps=[50])
    report = run_experiment(cfg, tmp_path)
    assert (tmp_path / (model_name(cfg, "ae", 50) + ".json")).exists()
    assert "perframe" in model_name(cfg, "ae", 50)
    assert [r["mask"] for r in report.rows] == ["per-frame"] * 3


def test_unseen_class_protocol(tmp_path):
    cfg = tiny_config(
        dataset={"kind": "synthetic", "n_train": 30, "n_test": 15, "frames": 16, "classes": 5},
        unseen_classes=2,
        repetitions=3,
        methods=["feedforward", "nearest"],
        train_otps=[100],
        test_otps=[50],
    )
    report = run_experiment(cfg, tmp_path)
    doc = json.loads(report.to_json())
    held = [doc["details"][f"rep{r}/train100/random/test50.0"]["held_out_classes"] for r in range(3)]
    assert all(len(h) == 2 for h in held)
    assert held == [unseen_split(5, 2, cfg.seed, r) for r in range(3)]
    for r, h in enumerate(held):
        labels = doc["details"][f"rep{r}/train100/random/test50.0"]["labels"]
        assert set(labels) <= set(h)
    row = report.row(100, 50, "nearest")
    per_rep = [doc["details"][f"rep{r}/train100/random/test50.0"]["methods"]["nearest"]["accuracy"] for r in range(3)]
    assert row["accuracy"] == pytest.approx(np.mean(per_rep))
    assert (tmp_path / (model_name(cfg, "ae", 100, 2) + ".json")).exists()


def test_unseen_split_checks():
    with pytest.raises(EvaluationError):
        unseen_split(5, 5, 0, 0)
    assert unseen_split(130, 30, 0, 1) != unseen_split(130, 30, 0, 2)
