"""Command-line entry point.

Every subcommand reads a JSON config (``--config``), applies ``--set
key=value`` overrides and explicit flags on top, writes the resolved config
into its output directory and refuses to overwrite earlier outputs unless
``--force`` is given.  Failures print one ``error: <Class>: <message>`` line
to stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data_model import (
    FACIAL_CHANNELS,
    DriveCondition,
    Modality,
    load_sessions,
    session_dirname,
    write_session,
)
from .errors import ConfigError, StressError
from .features import FeatureOptions, build_dataset
from .model import ModelConfig
from .ndcore import config_hash
from .stats import SmoothingOperator, phase_effects, significance_map, split_conditions, write_stats_report
from .subspace import analyze, write_subspace_report
from .synth import PRESETS, SynthConfig, benchmark_preset, generate, write_sessions
from .traineval import (
    EXPERIMENTS,
    TrainConfig,
    check_experiment,
    comparison_table,
    evaluate_checkpoints,
    json_ready,
    make_folds,
    map_tasks,
    metrics_payload,
    save_bundle,
    train_fold,
    write_comparison,
    write_metrics,
)

OUT_ENV = "DRIVESTRESS_OUT"
CONFIG_NAME = "config.json"

_MODEL_KEYS = ("embed_dim", "n_layers", "n_heads", "ffn_dim", "dropout", "max_T", "stem_kernels", "head_hidden", "cross_attention", "dtype")


def default_config() -> dict:
    model = ModelConfig().to_dict()
    return {
        "seed": 0,
        "paths": {"data_root": None, "out_dir": None},
        "features": asdict(FeatureOptions()),
        "stats": {"smoothing": "spline", "param": None, "thresholds": [0.05, 0.001], "modalities": ["facial", "bio"]},
        "subspace": {"scale": 3.0, "top_k": 10},
        "model": {k: model[k] for k in _MODEL_KEYS},
        "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
        "experiments": list(EXPERIMENTS),
        "synth": {"preset": None, "overrides": {}},
    }


def _merge(base: dict, update: dict, path="") -> dict:
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k != "overrides":
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key}")
        node = node[p]
    if parts[-1] not in node and not (len(parts) >= 2 and parts[-2] == "overrides"):
        raise ConfigError(f"unknown config key {key}")
    node[parts[-1]] = _parse_value(value)
    return cfg


def resolve_config(args) -> dict:
    cfg = default_config()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    for a in getattr(args, "set", None) or []:
        apply_override(cfg, a)
    if getattr(args, "inp", None):
        cfg["paths"]["data_root"] = str(Path(args.inp).resolve())
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def experiment_hash(cfg: dict) -> str:
    """Hash of everything that affects results; paths are excluded."""
    c = copy.deepcopy(cfg)
    c.pop("paths", None)
    return config_hash(c)


def _out_dir(args, cfg: dict, command: str) -> Path:
    out = getattr(args, "out", None) or cfg["paths"].get("out_dir")
    if out is None:
        out = Path(os.environ.get(OUT_ENV, "runs")) / command
    cfg["paths"]["out_dir"] = str(out)
    return Path(out)


def _claim(out: Path, outputs, force: bool):
    """Create ``out``; refuse when any of this command's outputs already exists."""
    existing = [o for o in outputs if (out / o).exists()]
    if existing and not force:
        raise ConfigError(f"{out / existing[0]} already exists; use a new directory or --force")
    out.mkdir(parents=True, exist_ok=True)


def _write_config(out: Path, cfg: dict, name: str = CONFIG_NAME):
    (out / name).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _synth_config(cfg: dict) -> SynthConfig:
    s = cfg["synth"]
    overrides = dict(s.get("overrides") or {})
    overrides.setdefault("seed", cfg["seed"])
    if s.get("preset"):
        return benchmark_preset(s["preset"], **overrides)
    return SynthConfig(**overrides)


def _sessions(cfg: dict):
    """Sessions from ``paths.data_root``, or generated in memory from ``synth``."""
    root = cfg["paths"].get("data_root")
    if root:
        if not Path(root).exists():
            raise ConfigError(f"data root {root} does not exist")
        return load_sessions(root)
    if cfg["synth"].get("preset") or cfg["synth"].get("overrides"):
        return generate(_synth_config(cfg))
    raise ConfigError("no input: pass --in, set paths.data_root, or configure synth.preset")


def _feature_options(cfg: dict) -> FeatureOptions:
    return FeatureOptions(**cfg["features"])


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg):
    if args.list_presets:
        print("\n".join(PRESETS))
        return 0
    if args.preset:
        cfg["synth"]["preset"] = args.preset
    out = _out_dir(args, cfg, "synth")
    _claim(out, [CONFIG_NAME], args.force)
    sc = _synth_config(cfg)
    written = write_sessions(generate(sc), out)
    _write_config(out, cfg)
    (out / "synth_config.json").write_text(json.dumps(sc.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(written)} sessions to {out}")
    return 0


def cmd_ingest(args, cfg):
    out = _out_dir(args, cfg, "ingest")
    _claim(out, ["ingest_report.csv"], args.force)
    sessions = _sessions(cfg)
    rows = []
    for subj in sorted(sessions):
        for cond in sorted(sessions[subj], key=lambda c: c.value):
            s = sessions[subj][cond]
            write_session(s, out / "sessions" / session_dirname(subj, cond))
            for mod, stream in s.streams.items():
                row = {"subject": subj, "condition": cond.value, "modality": mod.value, "rows": len(stream)}
                row.update(s.cleaning.get(mod.value, {}))
                rows.append(row)
    pd.DataFrame(rows).fillna(0).to_csv(out / "ingest_report.csv", index=False)
    _write_config(out, cfg)
    print(f"ingested {len(rows)} streams into {out / 'sessions'}")
    return 0


def cmd_features(args, cfg):
    out = _out_dir(args, cfg, "features")
    _claim(out, ["windows.csv", "dataset.npz"], args.force)
    data = build_dataset(_sessions(cfg), _feature_options(cfg))
    data.meta.to_csv(out / "windows.csv", index=False)
    np.savez_compressed(
        out / "dataset.npz",
        labels=data.labels,
        subjects=data.subjects,
        **{f"stream_{k}": v for k, v in data.streams.items()},
    )
    (out / "channels.json").write_text(json.dumps(data.channel_names, indent=2) + "\n")
    _write_config(out, cfg)
    print(f"{len(data)} windows ({int(data.labels.sum())} stress) -> {out}")
    return 0


def cmd_stats(args, cfg):
    if args.smoothing:
        cfg["stats"]["smoothing"] = args.smoothing
    if args.param is not None:
        cfg["stats"]["param"] = args.param
    out = _out_dir(args, cfg, "stats")
    _claim(out, ["stats_report.csv", "significance_counts.json"], args.force)
    st = cfg["stats"]
    op = SmoothingOperator(st["smoothing"], st["param"])
    md, nd = split_conditions(_sessions(cfg))
    effects = phase_effects(md, nd, op, tuple(Modality(m) for m in st["modalities"]))
    thresholds = tuple(st["thresholds"])
    write_stats_report(effects, out / "stats_report.csv", thresholds)
    smap = significance_map(effects, thresholds)
    smap.grid.to_csv(out / "significance_map.csv")
    (out / "significance_counts.json").write_text(json.dumps(smap.counts, indent=2, sort_keys=True) + "\n")
    _write_config(out, cfg)
    key = f"velocity|p<{min(thresholds):g}|both_P2_P4"
    print(f"{key}: {smap.counts.get(key, 0)}")
    return 0


def cmd_subspace(args, cfg):
    out = _out_dir(args, cfg, "subspace")
    _claim(out, ["lda_axis.csv", "pca_report.csv"], args.force)
    sessions = _sessions(cfg)
    frames, labels = [], []
    for subj in sorted(sessions):
        s = sessions[subj].get(DriveCondition.MD)
        if s is None or Modality.facial not in s.streams:
            continue
        f = s.streams[Modality.facial]
        codes = s.phase_codes(f.timestamps)
        keep = codes >= 0
        frames.append(f.values[keep])
        labels.append(np.isin(codes[keep], [1, 3]).astype(int))  # P2, P4
    if not frames:
        raise ConfigError("no MD facial streams to analyse")
    res = analyze(np.vstack(frames), np.concatenate(labels), FACIAL_CHANNELS, cfg["subspace"]["scale"], cfg["subspace"]["top_k"])
    write_subspace_report(res, out)
    _write_config(out, cfg)
    top = res["pca_report"].iloc[0]
    print(f"top stress PC {int(top.component)} (r={top.stress_correlation:+.3f}); LDA sigma_proj {res['sigma_proj']:.4f}")
    return 0


def _data_for_run(cfg):
    return build_dataset(_sessions(cfg), _feature_options(cfg))


def cmd_train(args, cfg):
    out = _out_dir(args, cfg, "train")
    _claim(out, ["training_log.json"], args.force)
    tc, mc = _train_config(cfg), _model_config(cfg)
    data = _data_for_run(cfg)
    plans = make_folds(np.unique(data.subjects), tc.n_folds, tc.val_fraction, tc.seed)
    ckpt = out / "checkpoints"
    logs = {}
    for name in cfg["experiments"]:
        spec = check_experiment(name, data)
        bundles = map_tasks(_train_task, [(p, data, spec, mc, tc, ckpt) for p in plans], args.jobs)
        logs[name] = {str(p.fold_id): rows for p, rows in zip(plans, bundles)}
        print(f"trained {name} on {len(plans)} folds")
    _write_config(out, cfg)
    (out / "folds.json").write_text(json.dumps([p.to_dict() for p in plans], indent=2) + "\n")
    (out / "training_log.json").write_text(json.dumps(json_ready(logs), indent=2, sort_keys=True) + "\n")
    return 0


def _train_task(task):
    plan, data, spec, mc, tc, ckpt = task
    bundle = train_fold(plan, data, spec, mc, tc)
    save_bundle(bundle, plan, tc, ckpt)
    return bundle.epoch_log


def _run_dir(args) -> Path:
    run = Path(args.run)
    if not (run / CONFIG_NAME).exists():
        raise ConfigError(f"{run} has no {CONFIG_NAME}; run train first")
    return run


def _evaluate(run: Path, force: bool) -> dict:
    _claim(run, ["metrics.json"], force)
    cfg = json.loads((run / CONFIG_NAME).read_text())
    tc = _train_config(cfg)
    data = _data_for_run(cfg)
    results = evaluate_checkpoints(data, cfg["experiments"], tc, run / "checkpoints")
    plans = make_folds(np.unique(data.subjects), tc.n_folds, tc.val_fraction, tc.seed)
    payload = metrics_payload(results, experiment_hash(cfg), cfg["seed"], plans)
    write_metrics(payload, run / "metrics.json")
    return payload


def cmd_eval(args, cfg):
    run = _run_dir(args)
    payload = _evaluate(run, args.force)
    for name, e in payload["experiments"].items():
        a = e["aggregate"]["auroc"]
        print(f"{name}: AUROC {_fmt(a['mean'])} ± {_fmt(a['std'])}")
    return 0


def cmd_report(args, cfg):
    run = _run_dir(args)
    path = run / "metrics.json"
    if path.exists():
        payload = json.loads(path.read_text())
    else:
        payload = _evaluate(run, False)
    _claim(run, ["comparison.csv"], args.force)
    write_comparison(payload, run / "comparison.csv")
    print(comparison_table(payload).to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    return 0


def _fmt(v):
    return "nan" if v is None else f"{v:.3f}"


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drivestress", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    def add(name, help, inp=True, out=True, run=False):
        p = sub.add_parser(name, parents=[common], help=help)
        if inp:
            p.add_argument("--in", dest="inp", help="directory of session folders")
        if out:
            p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/{name} or runs/{name})")
        if run:
            p.add_argument("--run", required=True, help="run directory written by train")
        return p

    p = add("synth", "write synthetic MD/ND sessions", inp=False)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--list-presets", action="store_true")
    add("ingest", "validate, clean and re-export session tables")
    add("features", "window sessions into model inputs")
    p = add("stats", "phase-wise MD-ND paired tests")
    p.add_argument("--smoothing", choices=("none", "triangular", "spline"))
    p.add_argument("--param", type=float, help="triangular width or spline penalty")
    add("subspace", "PCA ranking, LDA stress axis and perturbations")
    add("train", "cross-validated training with checkpoints")
    add("eval", "score checkpoints on their test folds", inp=False, out=False, run=True)
    add("report", "comparison table from a run directory", inp=False, out=False, run=True)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "features": cmd_features,
    "stats": cmd_stats,
    "subspace": cmd_subspace,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (StressError, OSError, ValueError, KeyError, TypeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
