"""A low-dimensional view of facial expression under load.

Pools MD facial frames, labels stressor-phase frames (P2, P4) as positive,
and looks for the stress direction two ways: the principal component that
correlates best with the label, and a Fisher discriminant axis.  Prints the
channels that load on each and the +-3 sigma expression along the LDA axis.
The stats_38 effects mostly change how fast channels move, not where they
sit, so frame-level separation is weak and the PCA correlations are small.

    python demos/stress_subspace.py [--out DIR]
"""
import argparse

import numpy as np

from drivestress.data_model import FACIAL_CHANNELS, DriveCondition, Modality
from drivestress.subspace import analyze, write_subspace_report
from drivestress.synth import STATS_38_CHANNELS, benchmark_preset, generate

parser = argparse.ArgumentParser()
parser.add_argument("--out", default=None, help="also write the CSV reports here")
args = parser.parse_args()

sessions = generate(benchmark_preset("stats_38", n_subjects=12))
frames, labels = [], []
for subj in sorted(sessions):
    f = sessions[subj][DriveCondition.MD].streams[Modality.facial]
    codes = sessions[subj][DriveCondition.MD].phase_codes(f.timestamps)
    keep = codes >= 0
    frames.append(f.values[keep])
    labels.append(np.isin(codes[keep], [1, 3]).astype(int))
X, y = np.vstack(frames), np.concatenate(labels)
print(f"{len(X)} frames, {y.mean():.2f} from stressor phases")

res = analyze(X, y, FACIAL_CHANNELS, scale=3.0, top_k=8)
print("\nprincipal components ranked by |point-biserial r|")
print(res["pca_report"].to_string(index=False, float_format="%.3f"))

axis = res["lda_axis"].assign(abs_w=lambda d: d["weight"].abs()).sort_values("abs_w", ascending=False)
top = axis.head(10)
print("\nlargest LDA weights")
print(top[["channel", "weight"]].to_string(index=False, float_format="%+.3f"))
frac = np.isin(top["channel"], STATS_38_CHANNELS).mean()
print(f"{frac:.0%} of them are channels with a synthetic effect")

coeffs = res["perturbed_coeffs"].set_index("channel")
spread = (coeffs["plus3"] - coeffs["minus3"]).abs().sort_values(ascending=False)
print(f"\nsigma along the LDA axis {res['sigma_proj']:.4f}; widest +-3 sigma swings:")
print(spread.head(5).to_string(float_format="%.3f"))

if args.out:
    for p in write_subspace_report(res, args.out):
        print("wrote", p)
