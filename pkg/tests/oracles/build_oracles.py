"""Regenerate the frozen oracle tables in this directory.

Nothing here imports the package under test.  The Student-t tail areas come
from adaptive quadrature of the density at 40 significant digits.  The LDA
table is a Monte Carlo study of the angle between the closed-form Fisher
direction ``cov^-1 (mu1 - mu0)`` and the generating axis for two spherical
Gaussian classes.

    python3 tests/oracles/build_oracles.py [t] [lda]
"""
import json
import sys
from pathlib import Path

import mpmath as mp
import numpy as np

HERE = Path(__file__).parent
mp.mp.dps = 40


def t_density(x, nu):
    c = mp.gamma((nu + 1) / 2) / (mp.sqrt(nu * mp.pi) * mp.gamma(nu / 2))
    return c * (1 + x * x / nu) ** (-(nu + 1) / 2)


def two_sided_p(t, nu):
    t = abs(mp.mpf(t))
    upper = mp.quad(lambda x: t_density(x, nu), [t, t + 1, t + 10, mp.inf])
    return 2 * upper


def t_grid():
    ts = [mp.mpf(-8) + mp.mpf(i) / 4 for i in range(65)]  # -8 .. 8 step 0.25
    rows = []
    for n in range(2, 31):
        nu = mp.mpf(n - 1)
        for t in ts:
            p = two_sided_p(t, nu)
            lower = 1 - p / 2 if t >= 0 else p / 2
            rows.append({"n": n, "t": float(t), "p_two_sided": mp.nstr(p, 25), "cdf": mp.nstr(lower, 25)})
    return rows


def fisher_angle(rng, C, sep, n):
    axis = rng.standard_normal(C)
    axis /= np.linalg.norm(axis)
    y = np.r_[np.zeros(n // 2), np.ones(n - n // 2)]
    X = rng.standard_normal((n, C)) + np.where(y[:, None] == 1, sep / 2, -sep / 2) * axis
    m0, m1 = X[y == 0].mean(0), X[y == 1].mean(0)
    S = np.cov(np.vstack([X[y == 0] - m0, X[y == 1] - m1]).T)
    w = np.linalg.solve(S, m1 - m0)
    return np.degrees(np.arccos(min(1.0, abs(w @ axis) / np.linalg.norm(w))))


def lda_angles(n=2000, reps=1000):
    rows = []
    for C in (3, 5, 10, 20, 56):
        for sep in (2.0, 3.0, 4.0):
            rng = np.random.default_rng([C, int(sep * 10)])
            a = np.array([fisher_angle(rng, C, sep, n) for _ in range(reps)])
            rows.append({
                "C": C, "separation": sep, "N": n, "replicates": reps,
                "median_deg": round(float(np.median(a)), 4),
                "p99_deg": round(float(np.percentile(a, 99)), 4),
                "frac_over_5deg": float((a > 5).mean()),
            })
    return rows


if __name__ == "__main__":
    parts = set(sys.argv[1:]) or {"t", "lda"}
    if "t" in parts:
        rows = t_grid()
        (HERE / "t_distribution.json").write_text(json.dumps(rows, indent=1) + "\n")
        print(f"wrote {len(rows)} t-distribution rows")
    if "lda" in parts:
        rows = lda_angles()
        (HERE / "lda_angle.json").write_text(json.dumps(rows, indent=1) + "\n")
        print(f"wrote {len(rows)} LDA angle rows")
