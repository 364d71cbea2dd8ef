import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drivestress.errors import ConfigError, DegenerateDataError
from drivestress.features import WindowDataset
from drivestress.model import ModelConfig
from drivestress.traineval import (
    EXPERIMENTS,
    MetricsReport,
    TrainConfig,
    _normalized_inputs,
    _subject_index,
    accuracy,
    aggregate_folds,
    auprc,
    auroc,
    balanced_accuracy,
    compute_metrics,
    comparison_table,
    evaluate_checkpoints,
    f1_score,
    fit_stream_normalization,
    fold_seed,
    make_folds,
    metrics_payload,
    run_experiment,
    train_fold,
    write_metrics,
)

SMALL = ModelConfig(embed_dim=8, n_layers=1, n_heads=2, head_hidden=4, dropout=0.1, max_T=8)


def toy_dataset(n_subjects=6, per_subject=12, T=6, shift=1.5, seed=0, labels=None):
    """Windows whose stress label shifts every facial channel by ``shift``."""
    rng = np.random.default_rng(seed)
    n = n_subjects * per_subject
    subjects = np.repeat([f"S{i:03d}" for i in range(n_subjects)], per_subject)
    y = np.tile(np.r_[np.zeros(per_subject // 2), np.ones(per_subject - per_subject // 2)], n_subjects).astype(int)
    if labels is not None:
        y = np.full(n, labels)
    facial = rng.standard_normal((n, T, 4)) + shift * y[:, None, None]
    streams = {"facial": facial, "bio": rng.standard_normal((n, T, 3)), "gaze": rng.standard_normal((n, T, 2))}
    names = {"facial": ["a", "b", "c", "d"], "bio": ["pp", "hr", "br"], "gaze": ["g0", "g1"]}
    meta = pd.DataFrame({"subject": subjects, "label": y})
    return WindowDataset(streams, names, y, subjects, meta)


# ---------------------------------------------------------------- folds


def _check_partition(plans, subjects):
    tests = [s for p in plans for s in p.test_subjects]
    assert sorted(tests) == sorted(subjects)
    for p in plans:
        parts = [set(p.train_subjects), set(p.val_subjects), set(p.test_subjects)]
        assert set().union(*parts) == set(subjects)
        assert sum(map(len, parts)) == len(subjects)
        assert p.val_subjects and p.train_subjects


def test_ten_subjects_five_folds():
    subs = [f"S{i}" for i in range(10)]
    plans = make_folds(subs, 5)
    assert [len(p.test_subjects) for p in plans] == [2] * 5
    _check_partition(plans, subs)
    assert all(len(p.val_subjects) == 2 for p in plans)  # ceil(0.2 * 8)


def test_eleven_subjects_uneven_folds():
    subs = [f"S{i}" for i in range(11)]
    plans = make_folds(subs, 5)
    assert [len(p.test_subjects) for p in plans] == [3, 2, 2, 2, 2]
    _check_partition(plans, subs)


def test_folds_deterministic_and_seeded():
    subs = list(range(12))
    assert make_folds(subs, 4, seed=3) == make_folds(subs, 4, seed=3)
    assert make_folds(subs, 4, seed=3) != make_folds(subs, 4, seed=4)
    assert fold_seed(0, 1) == fold_seed(0, 1) != fold_seed(0, 2)


def test_fold_errors():
    with pytest.raises(ConfigError):
        make_folds(range(4), 5)
    with pytest.raises(ConfigError):
        make_folds(range(10), 1)
    with pytest.raises(ConfigError):
        make_folds(range(5), 5, val_fraction=0.9)


# ---------------------------------------------------------------- metrics


def test_auroc_example():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(DegenerateDataError):
        auroc([0.1, 0.2], [1, 1])


def _brute_auroc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    return np.mean([(p > n) + 0.5 * (p == n) for p in pos for n in neg])


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=60))
def test_auroc_equals_pairwise_count(pairs):
    s = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    assert auroc(s, y) == _brute_auroc(s, y)


def _brute_auprc(s, y):
    total = 0.0
    prev_r = 0.0
    for t in sorted(set(s), reverse=True):
        sel = s >= t
        r = (sel & (y == 1)).sum() / (y == 1).sum()
        total += (r - prev_r) * (sel & (y == 1)).sum() / sel.sum()
        prev_r = r
    return total


def test_auprc_examples():
    assert auprc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)
    assert auprc([0.9, 0.1], [1, 0]) == 1.0


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 1)), min_size=2, max_size=40))
def test_auprc_matches_threshold_sweep(pairs):
    s = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    assert auprc(s, y) == pytest.approx(_brute_auprc(s, y), abs=1e-12)


def test_confusion_metrics():
    preds, labels = [1, 1, 0, 1], [1, 1, 0, 0]
    assert balanced_accuracy(preds, labels) == 0.75
    assert accuracy(preds, labels) == 0.75
    assert f1_score(preds, labels) == pytest.approx(0.8, abs=1e-12)
    assert f1_score([0, 0], [0, 1]) == 0.0


def test_single_class_gives_nan_rank_metrics():
    m = compute_metrics([0.2, 0.7, 0.9], [0, 0, 0])
    assert np.isnan(m["auroc"]) and np.isnan(m["auprc"]) and np.isnan(m["balanced_accuracy"])
    assert m["accuracy"] == pytest.approx(1 / 3)


def test_aggregate_skips_nan_and_uses_sample_std():
    folds = [{k: v for k, v in zip(("auroc", "auprc", "f1", "accuracy", "balanced_accuracy"), row)} for row in ([0.8] * 5, [0.6] * 5, [np.nan] * 5)]
    agg = aggregate_folds(folds)
    assert agg["auroc"]["mean"] == pytest.approx(0.7)
    assert agg["auroc"]["std"] == pytest.approx(np.std([0.8, 0.6], ddof=1))
    assert agg["auroc"]["n"] == 2


# ---------------------------------------------------------------- training


def test_patience_zero_stops_at_first_non_improvement():
    data = toy_dataset(shift=0.0)
    plan = make_folds(np.unique(data.subjects), 3)[0]
    cfg = TrainConfig(epochs=15, patience=0, lr=5e-3)
    b = train_fold(plan, data, EXPERIMENTS["facial"], SMALL, cfg)
    flags = [r["improved"] for r in b.epoch_log]
    assert all(flags[:-1])
    assert not flags[-1] or len(flags) == 15
    assert b.best_epoch == max(r["epoch"] for r in b.epoch_log if r["improved"])


def test_training_is_deterministic():
    data = toy_dataset()
    plan = make_folds(np.unique(data.subjects), 3)[1]
    cfg = TrainConfig(epochs=3)
    a = train_fold(plan, data, EXPERIMENTS["cross_facial_bio"], SMALL, cfg)
    b = train_fold(plan, data, EXPERIMENTS["cross_facial_bio"], SMALL, cfg)
    assert a.epoch_log == b.epoch_log
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_separable_fold_learns():
    data = toy_dataset(n_subjects=8, shift=2.0)
    plan = make_folds(np.unique(data.subjects), 4)[0]
    b = train_fold(plan, data, EXPERIMENTS["facial"], SMALL, TrainConfig(epochs=10, lr=3e-3))
    assert max(r["val_auroc"] for r in b.epoch_log) > 0.95


def test_normalization_ignores_test_subjects():
    data = toy_dataset()
    plan = make_folds(np.unique(data.subjects), 3)[0]
    spec = EXPERIMENTS["early_facial_bio"]
    tr = _subject_index(data, plan.train_subjects)
    te = _subject_index(data, plan.test_subjects)
    norm = fit_stream_normalization(data, tr, spec.streams)
    x = _normalized_inputs(data, tr, norm, spec, np.float64)[0]
    for s in data.streams.values():
        s[te] = 1e6 * np.random.default_rng(1).standard_normal(s[te].shape)
    norm2 = fit_stream_normalization(data, tr, spec.streams)
    for k in norm:
        assert np.array_equal(norm[k].mean, norm2[k].mean) and np.array_equal(norm[k].std, norm2[k].std)
    assert np.array_equal(x, _normalized_inputs(data, tr, norm2, spec, np.float64)[0])


def test_all_no_stress_run_completes():
    data = toy_dataset(labels=0)
    res = run_experiment(data, ["facial", "knn_facial"], SMALL, TrainConfig(epochs=2, n_folds=3))
    for r in res.values():
        assert all(np.isnan(f["auroc"]) for f in r.report.folds)
        assert np.isnan(r.report.aggregate["auroc"]["mean"])
        assert r.report.aggregate["accuracy"]["n"] == 3
    payload = metrics_payload(res, "h", 0)
    assert payload["experiments"]["facial"]["aggregate"]["auroc"]["mean"] is None


def test_unknown_or_unavailable_experiment():
    data = toy_dataset()
    with pytest.raises(ConfigError):
        run_experiment(data, ["nope"], SMALL, TrainConfig(epochs=1, n_folds=3))
    del data.streams["gaze"]
    with pytest.raises(ConfigError):
        run_experiment(data, ["cross_facial_gaze"], SMALL, TrainConfig(epochs=1, n_folds=3))


def test_checkpoint_evaluation_matches_training_run(tmp_path):
    data = toy_dataset()
    cfg = TrainConfig(epochs=2, n_folds=3, mlp_hidden=(8,))
    names = ["facial", "early_facial_gaze", "cross_gaze_bio", "mlp_facial", "knn_facial"]
    live = run_experiment(data, names, SMALL, cfg, checkpoint_dir=tmp_path)
    back = evaluate_checkpoints(data, names, cfg, tmp_path)
    for n in names:
        assert live[n].report.folds == back[n].report.folds
    with pytest.raises(ConfigError):
        evaluate_checkpoints(data, ["bio"], cfg, tmp_path)


def test_metrics_json_is_reproducible(tmp_path):
    data = toy_dataset()
    cfg = TrainConfig(epochs=2, n_folds=3)
    plans = make_folds(np.unique(data.subjects), 3)
    a = write_metrics(metrics_payload(run_experiment(data, ["bio"], SMALL, cfg), "x", 0, plans), tmp_path / "a.json")
    b = write_metrics(metrics_payload(run_experiment(data, ["bio"], SMALL, cfg), "x", 0, plans), tmp_path / "b.json")
    assert a.read_bytes() == b.read_bytes()
    payload = json.loads(a.read_text())
    agg = payload["experiments"]["bio"]["aggregate"]["auroc"]
    vals = [f["auroc"] for f in payload["experiments"]["bio"]["folds"]]
    assert agg["mean"] == pytest.approx(np.mean(vals))
    table = comparison_table(payload)
    assert table.loc[0, "auroc_mean"] == agg["mean"]


def test_metrics_report_aggregates_on_construction():
    r = MetricsReport([{m: 0.5 for m in ("auroc", "auprc", "f1", "accuracy", "balanced_accuracy")}])
    assert r.aggregate["f1"]["mean"] == 0.5 and np.isnan(r.aggregate["f1"]["std"])
