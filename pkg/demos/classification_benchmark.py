"""Stress classification from facial, bio and fused streams.

Builds windows from the weak_bio cohort (facial effects only), then runs
subject-wise cross-validation for the unimodal transformers, the cross-modal
fusion model and the summary-feature baselines, and prints a comparison table.
Bio AUROC should sit near chance while fusion keeps the facial performance.

    python demos/classification_benchmark.py [--epochs 20] [--quick]
"""
import argparse
import time

from drivestress.features import FeatureOptions, build_dataset
from drivestress.model import ModelConfig
from drivestress.synth import benchmark_preset, generate
from drivestress.traineval import TrainConfig, comparison_table, metrics_payload, run_experiment

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=20)
parser.add_argument("--quick", action="store_true", help="fewer subjects and a smaller model")
args = parser.parse_args()

if args.quick:
    cohort = benchmark_preset("weak_bio", n_subjects=10)
    model = ModelConfig(embed_dim=16, n_layers=1, n_heads=2, dtype="float32")
else:
    cohort = benchmark_preset("weak_bio")
    model = ModelConfig(embed_dim=32, n_layers=2, n_heads=4, dtype="float32")

t0 = time.perf_counter()
data = build_dataset(generate(cohort), FeatureOptions())
print(f"{len(data.labels)} MD windows from {len(set(data.subjects))} subjects, "
      f"stress fraction {data.labels.mean():.2f}")
print({k: v.shape[1:] for k, v in data.streams.items()})

names = ["facial", "bio", "early_facial_bio", "cross_facial_bio", "mlp_facial", "knn_facial"]
results = run_experiment(data, names, model, TrainConfig(epochs=args.epochs, seed=0))
table = comparison_table(metrics_payload(results, "demo", 0))
print()
print(table[["experiment", "auroc_mean", "auroc_std", "auprc_mean", "balanced_accuracy_mean"]].to_string(index=False, float_format="%.3f"))

for n, r in results.items():
    log = r.epoch_logs[min(r.epoch_logs)] if r.epoch_logs else []
    if log:
        print(f"{n:18s} fold 0 ran {len(log)} epochs, last val AUROC {log[-1]['val_auroc']:.3f}")
print(f"\n{time.perf_counter() - t0:.0f}s")
