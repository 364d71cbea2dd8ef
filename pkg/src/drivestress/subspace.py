"""PCA over standardized coefficients, stress ranking of components, a binary
LDA stress axis and ±k sigma perturbations along an axis."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .data_model import FACIAL_CHANNELS
from .errors import DegenerateDataError, InsufficientDataError, ShapeError

RANK_TOL = 1e-12


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = _matrix(X)
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std < 1e-12, 1.0, std))

    def transform(self, X) -> np.ndarray:
        return (_matrix(X) - self.mean) / self.std

    def inverse(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.std + self.mean


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (C, C), columns are PCs
    eigenvalues: np.ndarray

    def transform(self, X, k: int | None = None) -> np.ndarray:
        W = self.components if k is None else self.components[:, :k]
        return (_matrix(X) - self.mean) @ W

    def inverse_transform(self, scores) -> np.ndarray:
        scores = np.asarray(scores, dtype=float)
        return scores @ self.components[:, : scores.shape[1]].T + self.mean

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        return self.eigenvalues / self.eigenvalues.sum()


@dataclass
class LdaAxis:
    direction: np.ndarray
    class_means: tuple  # (non-stress mean, stress mean)
    sigma_proj: float

    def project(self, X) -> np.ndarray:
        return _matrix(X) @ self.direction


@dataclass
class PrincipalAxis:
    """One PC wrapped so it can be used wherever an ``LdaAxis`` is accepted."""

    direction: np.ndarray
    sigma_proj: float

    @classmethod
    def from_pca(cls, pca: PcaModel, index: int) -> "PrincipalAxis":
        return cls(pca.components[:, index].copy(), float(np.sqrt(pca.eigenvalues[index])))


def _matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ShapeError(f"expected an N x C matrix, got shape {X.shape}")
    return X


def _binary_labels(labels, n) -> np.ndarray:
    y = np.asarray(labels).astype(int).ravel()
    if len(y) != n:
        raise ShapeError(f"{len(y)} labels for {n} rows")
    if not np.isin(y, (0, 1)).all():
        raise DegenerateDataError("labels must be 0/1")
    if y.min() == y.max():
        raise DegenerateDataError("labels contain a single class")
    return y


def fit_pca(X) -> PcaModel:
    """Eigendecomposition of the sample covariance of ``X``.

    Components are sorted by descending eigenvalue and each is signed so its
    largest-magnitude loading is positive.
    """
    X = _matrix(X)
    if len(X) < 2:
        raise InsufficientDataError("PCA needs at least 2 rows")
    mean = X.mean(axis=0)
    Xc = X - mean
    if not np.any(np.abs(Xc) > RANK_TOL * max(1.0, np.abs(X).max())):
        raise DegenerateDataError("all rows are identical")
    cov = Xc.T @ Xc / (len(X) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals, kind="stable")[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    lead = vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])]
    vecs = vecs * np.where(lead < 0, -1.0, 1.0)
    return PcaModel(mean, vecs, vals)


def point_biserial(scores, labels) -> np.ndarray:
    """Pearson correlation of each score column with a 0/1 label; 0 for constant columns."""
    S = np.asarray(scores, dtype=float)
    S = S[:, None] if S.ndim == 1 else S
    y = _binary_labels(labels, len(S)).astype(float)
    Sc = S - S.mean(axis=0)
    yc = y - y.mean()
    num = Sc.T @ yc
    den = np.sqrt((Sc**2).sum(axis=0) * (yc**2).sum())
    out = np.zeros(S.shape[1])
    ok = den > RANK_TOL
    out[ok] = num[ok] / den[ok]
    return out


def rank_stress_components(pca: PcaModel, X, labels) -> pd.DataFrame:
    """Components sorted by ``|r|`` with the stress label (stable on ties)."""
    r = point_biserial(pca.transform(X), labels)
    order = np.argsort(-np.abs(r), kind="stable")
    return pd.DataFrame(
        {
            "component": order + 1,
            "correlation": r[order],
            "abs_correlation": np.abs(r[order]),
            "explained_variance_ratio": pca.explained_variance_ratio[order],
        }
    )


def fit_lda(X, labels) -> LdaAxis:
    """Two-class Fisher direction with a small ridge on the within-class scatter.

    ``w ∝ (S_w + g I)^-1 (mu_1 - mu_0)`` with ``g = 1e-4 tr(S_w) / C``, unit
    norm and signed so that the stress class projects higher.
    """
    X = _matrix(X)
    y = _binary_labels(labels, len(X))
    if min((y == 0).sum(), (y == 1).sum()) < 2:
        raise InsufficientDataError("each class needs at least 2 samples")
    X0, X1 = X[y == 0], X[y == 1]
    mu0, mu1 = X0.mean(axis=0), X1.mean(axis=0)
    C = X.shape[1]
    # pooled within-class covariance
    Sw = ((X0 - mu0).T @ (X0 - mu0) + (X1 - mu1).T @ (X1 - mu1)) / (len(X) - 2)
    gamma = 1e-4 * np.trace(Sw) / C
    if gamma <= 0:
        # no within-class spread: fall back to the mean difference
        gamma = 1.0
    w = np.linalg.solve(Sw + gamma * np.eye(C), mu1 - mu0)
    norm = np.linalg.norm(w)
    if not np.isfinite(norm) or norm < RANK_TOL:
        raise DegenerateDataError("class means coincide; no discriminant direction")
    w = w / norm
    # direction is defined by mu1 - mu0, so its sign already puts stress above
    # non-stress except in pathological cases; enforce it explicitly
    if (mu1 - mu0) @ w < 0:
        w = -w
    z = X @ w
    return LdaAxis(w, (mu0, mu1), float(z.std()))


def perturb_along_axis(mean_coeffs, axis, scale: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """``mean ± scale * sigma_proj * direction``."""
    m = np.asarray(mean_coeffs, dtype=float)
    step = scale * axis.sigma_proj * np.asarray(axis.direction, dtype=float)
    if step.shape != m.shape:
        raise ShapeError(f"axis has {step.size} entries, mean has {m.size}")
    return m + step, m - step


# ---------------------------------------------------------------- exports


def analyze(frames, labels, channel_names=FACIAL_CHANNELS, scale: float = 3.0, top_k: int = 10) -> dict:
    """Standardize, fit PCA and LDA, perturb, and collect export tables.

    Perturbations are expressed back in the raw coefficient space.
    """
    X = _matrix(frames)
    names = list(channel_names)
    if X.shape[1] != len(names):
        raise ShapeError(f"{X.shape[1]} columns, {len(names)} channel names")
    std = Standardizer.fit(X)
    Z = std.transform(X)
    pca = fit_pca(Z)
    ranking = rank_stress_components(pca, Z, labels)
    lda = fit_lda(Z, labels)
    plus, minus = perturb_along_axis(np.zeros(len(names)), lda, scale)
    perturbed = pd.DataFrame(
        {
            "channel": names,
            f"minus{scale:g}": std.inverse(minus),
            "mean": std.mean,
            f"plus{scale:g}": std.inverse(plus),
        }
    )
    axis_table = pd.DataFrame({"channel": names, "weight": lda.direction})
    top = ranking.head(top_k)
    report = pd.DataFrame(
        {
            "component": top["component"].to_numpy(),
            "eigenvalue": pca.eigenvalues[top["component"].to_numpy() - 1],
            "stress_correlation": top["correlation"].to_numpy(),
            "top_loadings": [_top_loadings(pca.components[:, c - 1], names) for c in top["component"]],
        }
    )
    scores2 = pca.transform(Z, 2)
    embedding = pd.DataFrame({"pc1": scores2[:, 0], "pc2": scores2[:, 1], "label": np.asarray(labels).astype(int)})
    return {
        "pca": pca,
        "lda": lda,
        "standardizer": std,
        "pca_report": report,
        "ranking": ranking,
        "lda_axis": axis_table,
        "perturbed_coeffs": perturbed,
        "embedding": embedding,
        "sigma_proj": lda.sigma_proj,
    }


def _top_loadings(vec, names, n=3) -> str:
    idx = np.argsort(-np.abs(vec), kind="stable")[:n]
    return ";".join(f"{names[i]}:{vec[i]:+.4f}" for i in idx)


def write_subspace_report(result: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for key, fname in (
        ("pca_report", "pca_report.csv"),
        ("lda_axis", "lda_axis.csv"),
        ("perturbed_coeffs", "perturbed_coeffs.csv"),
        ("embedding", "pca_embedding.csv"),
    ):
        p = out / fname
        result[key].to_csv(p, index=False, float_format="%.10g")
        paths.append(p)
    return paths
