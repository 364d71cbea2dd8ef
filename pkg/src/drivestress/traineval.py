"""Subject-wise cross-validation, the training loop and classification metrics."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from . import ndcore as nd
from .errors import ConfigError, DegenerateDataError, NonFiniteGradientError
from .features import NormalizationStats, WindowDataset, apply_normalization, fit_normalization, summary_features
from .model import MLPBaseline, ModelConfig, build_model, knn_scores
from .ndcore import tensor as F

log = logging.getLogger(__name__)

METRICS = ("auroc", "auprc", "f1", "accuracy", "balanced_accuracy")


# ---------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldPlan:
    fold_id: int
    train_subjects: tuple
    val_subjects: tuple
    test_subjects: tuple

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def fold_seed(master: int, fold_id: int) -> int:
    return int(np.random.SeedSequence([int(master), int(fold_id)]).generate_state(1)[0])


def make_folds(subjects, n_folds: int = 5, val_fraction: float = 0.2, seed: int = 0) -> list[FoldPlan]:
    """Shuffle subjects, split into near-equal test groups (larger groups first),
    and draw ``max(1, ceil(val_fraction * n_rest))`` validation subjects per fold."""
    subjects = sorted(set(subjects))
    if n_folds < 2:
        raise ConfigError("need at least 2 folds")
    if len(subjects) < n_folds:
        raise ConfigError(f"{len(subjects)} subjects cannot fill {n_folds} folds")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must be in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(subjects))
    groups = np.array_split(np.array(subjects)[order], n_folds)
    plans = []
    for k, test in enumerate(groups):
        rest = [s for s in subjects if s not in set(test)]
        n_val = max(1, math.ceil(val_fraction * len(rest)))
        if n_val >= len(rest):
            raise ConfigError("no training subjects left after the validation split")
        pick = np.random.default_rng(fold_seed(seed, k)).permutation(len(rest))[:n_val]
        val = sorted(rest[i] for i in pick)
        train = sorted(set(rest) - set(val))
        plans.append(FoldPlan(k, tuple(train), tuple(val), tuple(sorted(test))))
    return plans


# ---------------------------------------------------------------- metrics


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if s.shape != y.shape:
        raise ConfigError(f"{s.size} scores for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ConfigError("labels must be 0/1")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC from average ranks, ties counted one half."""
    s, y = _check_binary(scores, labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise DegenerateDataError("AUROC needs both classes")
    u = rankdata(s)[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def auprc(scores, labels) -> float:
    """Step-wise average precision: sum over distinct thresholds of
    ``(R_k - R_{k-1}) * P_k``, no interpolation."""
    s, y = _check_binary(scores, labels)
    n1 = int(y.sum())
    if n1 == 0 or n1 == len(y):
        raise DegenerateDataError("AUPRC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end of each tie group
    tp = np.cumsum(y)[last]
    pp = last + 1
    recall = tp / n1
    precision = tp / pp
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _confusion(preds, labels):
    p, y = _check_binary(preds, labels)
    p = p.astype(int)
    tp = int(((p == 1) & (y == 1)).sum())
    tn = int(((p == 0) & (y == 0)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    return tp, tn, fp, fn


def f1_score(preds, labels) -> float:
    tp, tn, fp, fn = _confusion(preds, labels)
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def accuracy(preds, labels) -> float:
    tp, tn, fp, fn = _confusion(preds, labels)
    return (tp + tn) / (tp + tn + fp + fn)


def balanced_accuracy(preds, labels) -> float:
    tp, tn, fp, fn = _confusion(preds, labels)
    if tp + fn == 0 or tn + fp == 0:
        raise DegenerateDataError("balanced accuracy needs both classes")
    return 0.5 * (tp / (tp + fn) + tn / (tn + fp))


def sigmoid(x) -> np.ndarray:
    return F._sigmoid(np.asarray(x, dtype=float))


def compute_metrics(probs, labels, threshold: float = 0.5) -> dict:
    """All five metrics; a metric that needs both classes is ``nan`` when one is missing."""
    probs = np.asarray(probs, dtype=float)
    preds = (probs >= threshold).astype(int)
    out = {}
    for name, fn, arg in (
        ("auroc", auroc, probs),
        ("auprc", auprc, probs),
        ("f1", f1_score, preds),
        ("accuracy", accuracy, preds),
        ("balanced_accuracy", balanced_accuracy, preds),
    ):
        try:
            out[name] = float(fn(arg, labels))
        except DegenerateDataError:
            out[name] = float("nan")
    return out


@dataclass
class MetricsReport:
    folds: list  # dicts with fold_id plus one entry per metric
    aggregate: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate_folds(self.folds)


def aggregate_folds(folds: list[dict]) -> dict:
    """Mean and sample std (ddof=1) over folds, skipping invalid (nan) folds."""
    agg = {}
    for m in METRICS:
        v = np.array([f[m] for f in folds], dtype=float)
        v = v[np.isfinite(v)]
        agg[m] = {
            "mean": float(v.mean()) if len(v) else float("nan"),
            "std": float(v.std(ddof=1)) if len(v) > 1 else float("nan"),
            "n": int(len(v)),
        }
    return agg


# ---------------------------------------------------------------- experiments


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    streams: tuple  # ordered input streams
    fusion: str  # unimodal / early / cross_modal / knn / mlp
    label: str  # row label in the comparison table


EXPERIMENTS = {
    e.name: e
    for e in (
        ExperimentSpec("facial", ("facial",), "unimodal", "Facial features"),
        ExperimentSpec("bio", ("bio",), "unimodal", "Bio"),
        ExperimentSpec("early_facial_bio", ("facial", "bio"), "early", "Early fusion facial+bio"),
        ExperimentSpec("early_facial_gaze", ("facial", "gaze"), "early", "Early fusion facial+gaze"),
        ExperimentSpec("cross_facial_bio", ("facial", "bio"), "cross_modal", "Cross-modal facial+bio"),
        ExperimentSpec("cross_facial_gaze", ("facial", "gaze"), "cross_modal", "Cross-modal facial+gaze"),
        ExperimentSpec("cross_gaze_bio", ("gaze", "bio"), "cross_modal", "Cross-modal gaze+bio"),
        ExperimentSpec("knn_facial", ("facial",), "knn", "kNN (facial summaries)"),
        ExperimentSpec("mlp_facial", ("facial",), "mlp", "MLP (facial summaries)"),
    )
}


@dataclass
class TrainConfig:
    epochs: int = 20
    patience: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    n_folds: int = 5
    val_fraction: float = 0.2
    seed: int = 0
    knn_k: int = 5
    mlp_hidden: tuple = (128, 64)
    eval_batch: int = 256
    threshold: float = 0.5

    def __post_init__(self):
        self.mlp_hidden = tuple(self.mlp_hidden)
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise ConfigError("epochs and batch_size must be >= 1, patience >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d


@dataclass
class ModelBundle:
    model: nd.Module
    spec: ExperimentSpec
    normalization: dict  # stream -> NormalizationStats
    epoch_log: list
    best_epoch: int
    model_config: dict


def _normalized_inputs(data: WindowDataset, idx, norm: dict, spec: ExperimentSpec, dtype):
    """Per-stream normalized arrays; early fusion concatenates them per frame."""
    xs = [apply_normalization(norm[s], data.streams[s][idx]).astype(dtype) for s in spec.streams]
    if spec.fusion == "early":
        return (np.concatenate(xs, axis=-1),)
    if spec.fusion in ("knn", "mlp"):
        return (xs[0],)
    return tuple(xs)


def fit_stream_normalization(data: WindowDataset, train_idx, streams, summary: bool = False) -> dict:
    out = {}
    for s in streams:
        X = data.streams[s][train_idx]
        out[s] = fit_normalization(summary_features(X) if summary else X)
    return out


def _subject_index(data: WindowDataset, subjects) -> np.ndarray:
    return np.flatnonzero(np.isin(data.subjects, list(subjects)))


def _logits(model, inputs, batch: int) -> np.ndarray:
    model.eval()
    out = []
    with nd.no_grad():
        for a in range(0, len(inputs[0]), batch):
            out.append(model(*[x[a : a + batch] for x in inputs]).data)
    return np.concatenate(out) if out else np.zeros(0)


def _bce(logits, y) -> float:
    return float(F.bce_with_logits(nd.Tensor(logits.astype(float)), y.astype(float)).item())


def _fit_loop(model, inputs, y, val_inputs, val_y, cfg: TrainConfig, rng) -> tuple[list, int]:
    """Mini-batch Adam with validation-loss early stopping; restores the best parameters."""
    opt = nd.Adam(model.parameters(), lr=cfg.lr)
    best_loss, best_epoch, best_state, bad = math.inf, 0, model.state_dict(), 0
    log_rows = []
    n = len(y)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        losses = []
        for a in range(0, n, cfg.batch_size):
            idx = order[a : a + cfg.batch_size]
            opt.zero_grad()
            loss = F.bce_with_logits(model(*[x[idx] for x in inputs]), y[idx].astype(inputs[0].dtype))
            loss.backward()
            try:
                opt.step()
            except NonFiniteGradientError as exc:
                raise NonFiniteGradientError(f"epoch {epoch}, batch starting at {a}: {exc}") from exc
            losses.append(loss.item() * len(idx))
        val_logits = _logits(model, val_inputs, cfg.eval_batch)
        val_loss = _bce(val_logits, val_y)
        try:
            val_auc = auroc(val_logits, val_y)
        except DegenerateDataError:
            val_auc = float("nan")
        improved = val_loss < best_loss
        log_rows.append(
            {"epoch": epoch, "train_loss": float(np.sum(losses) / n), "val_loss": val_loss, "val_auroc": val_auc, "improved": improved}
        )
        if improved:
            best_loss, best_epoch, best_state, bad = val_loss, epoch, model.state_dict(), 0
        else:
            bad += 1
            if bad > cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return log_rows, best_epoch


def train_fold(plan: FoldPlan, data: WindowDataset, spec: ExperimentSpec, model_cfg: ModelConfig, cfg: TrainConfig) -> ModelBundle:
    """Fit normalization on the fold's training subjects, then train with early stopping.

    kNN has nothing to train; its bundle keeps the normalized training summaries.
    """
    seed = fold_seed(cfg.seed, plan.fold_id)
    tr = _subject_index(data, plan.train_subjects)
    va = _subject_index(data, plan.val_subjects)
    summary = spec.fusion in ("knn", "mlp")
    norm = fit_stream_normalization(data, tr, spec.streams, summary=summary)
    dtype = model_cfg.np_dtype

    def inputs(idx):
        if summary:
            return (apply_normalization(norm[spec.streams[0]], summary_features(data.streams[spec.streams[0]][idx])).astype(dtype),)
        return _normalized_inputs(data, idx, norm, spec, dtype)

    if spec.fusion == "knn":
        model = KnnModel(inputs(tr)[0], data.labels[tr], cfg.knn_k)
        return ModelBundle(model, spec, norm, [], 0, {"k": cfg.knn_k})

    if spec.fusion == "mlp":
        model = MLPBaseline(inputs(tr)[0].shape[1], cfg.mlp_hidden, model_cfg.dropout, seed, model_cfg.dtype)
        mcfg = {"hidden": list(cfg.mlp_hidden), "dropout": model_cfg.dropout, "seed": seed, "dtype": model_cfg.dtype}
    else:
        widths = [data.streams[s].shape[-1] for s in spec.streams]
        T = data.streams[spec.streams[0]].shape[1]
        if spec.fusion == "cross_modal":
            m = replace(model_cfg, input_dim=widths[0], secondary_dim=widths[1], fusion="cross_modal", seed=seed, max_T=max(model_cfg.max_T, T))
        else:
            m = replace(model_cfg, input_dim=sum(widths), secondary_dim=0, fusion=spec.fusion, seed=seed, max_T=max(model_cfg.max_T, T))
        model = build_model(m)
        mcfg = m.to_dict()
    rows, best = _fit_loop(
        model, inputs(tr), data.labels[tr], inputs(va), data.labels[va], cfg, nd.philox(seed, 2)
    )
    return ModelBundle(model, spec, norm, rows, best, mcfg)


class KnnModel:
    def __init__(self, X, y, k):
        self.X, self.y, self.k = X, y, int(k)

    def scores(self, X) -> np.ndarray:
        return knn_scores(self.X, self.y, X, min(self.k, len(self.X)))


def predict(bundle: ModelBundle, data: WindowDataset, idx, cfg: TrainConfig) -> np.ndarray:
    """Stress probabilities for windows ``idx``."""
    spec = bundle.spec
    if spec.fusion in ("knn", "mlp"):
        dtype = np.float64 if spec.fusion == "knn" else bundle.model.dtype
        X = apply_normalization(bundle.normalization[spec.streams[0]], summary_features(data.streams[spec.streams[0]][idx]))
        if spec.fusion == "knn":
            return bundle.model.scores(X)
        return sigmoid(_logits(bundle.model, (X.astype(dtype),), cfg.eval_batch))
    dtype = bundle.model.parameters()[0].dtype
    return sigmoid(_logits(bundle.model, _normalized_inputs(data, idx, bundle.normalization, spec, dtype), cfg.eval_batch))


def evaluate_fold(bundle: ModelBundle, plan: FoldPlan, data: WindowDataset, cfg: TrainConfig) -> dict:
    te = _subject_index(data, plan.test_subjects)
    probs = predict(bundle, data, te, cfg)
    return {
        "fold_id": plan.fold_id,
        **compute_metrics(probs, data.labels[te], cfg.threshold),
        "n_test": int(len(te)),
        "n_test_stress": int(data.labels[te].sum()),
        "best_epoch": bundle.best_epoch,
        "epochs_run": len(bundle.epoch_log),
    }


def checkpoint_path(ckpt_dir, name: str, fold_id: int) -> Path:
    return Path(ckpt_dir) / f"{name}_fold{fold_id}.npz"


def save_bundle(bundle: ModelBundle, plan: FoldPlan, cfg: TrainConfig, ckpt_dir) -> Path | None:
    """Parameters, normalization statistics and configs in one ``.npz`` (kNN has none)."""
    if not isinstance(bundle.model, nd.Module):
        return None
    meta = {
        "experiment": bundle.spec.name,
        "fold": plan.fold_id,
        "model_config": bundle.model_config,
        "train_config": cfg.to_dict(),
        "best_epoch": bundle.best_epoch,
        "epoch_log": bundle.epoch_log,
    }
    tensors = dict(bundle.model.state_dict())
    for s, st in bundle.normalization.items():
        tensors[f"norm/{s}/mean"], tensors[f"norm/{s}/std"] = st.mean, st.std
    return nd.save_checkpoint(checkpoint_path(ckpt_dir, bundle.spec.name, plan.fold_id), json_ready(tensors), json_ready(meta))


def load_bundle(path, spec: ExperimentSpec) -> ModelBundle:
    tensors, meta = nd.load_checkpoint(path)
    norm = {
        s: NormalizationStats(tensors.pop(f"norm/{s}/mean"), tensors.pop(f"norm/{s}/std")) for s in spec.streams
    }
    mc = meta["model_config"]
    if spec.fusion == "mlp":
        n_in = tensors["layers.0.weight"].shape[0]
        model = MLPBaseline(n_in, tuple(mc["hidden"]), mc["dropout"], mc["seed"], mc["dtype"])
    else:
        model = build_model(ModelConfig(**mc))
    model.load_state_dict(tensors)
    model.eval()
    log_rows = meta.get("epoch_log", [])
    return ModelBundle(model, spec, norm, log_rows, int(meta["best_epoch"]), mc)


def _run_fold(args):
    plan, data, spec, model_cfg, cfg, ckpt_dir = args
    bundle = train_fold(plan, data, spec, model_cfg, cfg)
    if ckpt_dir is not None:
        save_bundle(bundle, plan, cfg, ckpt_dir)
    return evaluate_fold(bundle, plan, data, cfg), bundle.epoch_log


def check_experiment(name: str, data: WindowDataset) -> ExperimentSpec:
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    spec = EXPERIMENTS[name]
    missing = [s for s in spec.streams if s not in data.streams]
    if missing:
        raise ConfigError(f"experiment {name} needs streams {missing} that the dataset lacks")
    return spec


def map_tasks(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    report: MetricsReport
    epoch_logs: dict  # fold_id -> rows


def run_experiment(
    data: WindowDataset,
    experiments=("facial", "bio", "cross_facial_bio"),
    model_cfg: ModelConfig | None = None,
    cfg: TrainConfig | None = None,
    checkpoint_dir=None,
    jobs: int = 1,
) -> dict[str, ExperimentResult]:
    """Cross-validate every named experiment on the same folds and windows.

    Folds run in ``jobs`` worker processes; each fold owns its seeds, so the
    result does not depend on ``jobs``.
    """
    model_cfg = model_cfg or ModelConfig()
    cfg = cfg or TrainConfig()
    plans = make_folds(np.unique(data.subjects), cfg.n_folds, cfg.val_fraction, cfg.seed)
    results = {}
    for name in experiments:
        spec = check_experiment(name, data)
        out = map_tasks(_run_fold, [(p, data, spec, model_cfg, cfg, checkpoint_dir) for p in plans], jobs)
        folds = [o[0] for o in out]
        results[name] = ExperimentResult(spec, MetricsReport(folds), {p.fold_id: o[1] for p, o in zip(plans, out)})
        agg = results[name].report.aggregate
        log.info("%s: AUROC %.3f ± %.3f", name, agg["auroc"]["mean"], agg["auroc"]["std"])
    return results


def evaluate_checkpoints(data: WindowDataset, experiments, cfg: TrainConfig, checkpoint_dir) -> dict[str, ExperimentResult]:
    """Rebuild every fold's model from disk and score its test subjects.

    kNN has no checkpoint and is refitted, which is deterministic.
    """
    plans = make_folds(np.unique(data.subjects), cfg.n_folds, cfg.val_fraction, cfg.seed)
    results = {}
    for name in experiments:
        spec = check_experiment(name, data)
        folds, logs = [], {}
        for p in plans:
            if spec.fusion == "knn":
                bundle = train_fold(p, data, spec, ModelConfig(), cfg)
            else:
                path = checkpoint_path(checkpoint_dir, name, p.fold_id)
                if not path.exists():
                    raise ConfigError(f"missing checkpoint {path.name}; run train first")
                bundle = load_bundle(path, spec)
            folds.append(evaluate_fold(bundle, p, data, cfg))
            logs[p.fold_id] = bundle.epoch_log
        results[name] = ExperimentResult(spec, MetricsReport(folds), logs)
    return results


# ---------------------------------------------------------------- reports


def json_ready(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: json_ready(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [json_ready(v) for v in x]
    if isinstance(x, np.ndarray):
        return x
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return json_ready(float(x))
    return x


def metrics_payload(results: dict, config_hash: str, seed: int, plans=None) -> dict:
    """JSON-ready metrics: per-fold rows, aggregates, config hash and seed.

    Contains no paths or timestamps so identical runs serialize identically.
    """
    body = {
        "config_hash": config_hash,
        "seed": int(seed),
        "experiments": {
            name: {
                "label": r.spec.label,
                "streams": list(r.spec.streams),
                "fusion": r.spec.fusion,
                "folds": r.report.folds,
                "aggregate": r.report.aggregate,
            }
            for name, r in results.items()
        },
    }
    if plans is not None:
        body["folds"] = [p.to_dict() for p in plans]
    return json_ready(body)


def write_metrics(payload: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n")
    return path


def comparison_table(payload: dict) -> pd.DataFrame:
    """One row per experiment in the fixed row order; mean and std per metric."""
    rows = []
    exps = payload["experiments"]
    for name in [n for n in EXPERIMENTS if n in exps] + sorted(set(exps) - set(EXPERIMENTS)):
        e = exps[name]
        row = {"experiment": name, "modality": e["label"]}
        for m in METRICS:
            a = e["aggregate"][m]
            row[f"{m}_mean"] = a["mean"]
            row[f"{m}_std"] = a["std"]
        rows.append(row)
    return pd.DataFrame(rows)


def write_comparison(payload: dict, path) -> Path:
    path = Path(path)
    comparison_table(payload).to_csv(path, index=False, float_format="%.6f")
    return path
