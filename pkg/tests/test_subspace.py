import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drivestress.errors import DegenerateDataError, InsufficientDataError, ShapeError
from drivestress.subspace import (
    PrincipalAxis,
    Standardizer,
    analyze,
    fit_lda,
    fit_pca,
    perturb_along_axis,
    point_biserial,
    rank_stress_components,
    write_subspace_report,
)


def two_class(rng, n=2000, C=10, shift=1.5, axis=None):
    axis = np.eye(C)[0] if axis is None else axis / np.linalg.norm(axis)
    y = np.r_[np.zeros(n // 2), np.ones(n - n // 2)].astype(int)
    X = rng.standard_normal((n, C)) + np.where(y[:, None] == 1, shift, -shift) * axis
    return X, y, axis


# ---------------------------------------------------------------- PCA


def test_pca_orthonormal_and_reconstructs(rng):
    X = rng.standard_normal((300, 8)) @ rng.standard_normal((8, 8))
    pca = fit_pca(X)
    W = pca.components
    np.testing.assert_allclose(W.T @ W, np.eye(8), atol=1e-8)
    np.testing.assert_allclose(pca.inverse_transform(pca.transform(X)), X, atol=1e-8)
    assert np.all(np.diff(pca.eigenvalues) <= 1e-12)
    assert pca.explained_variance_ratio.sum() == pytest.approx(1.0)


def test_pca_eigenvalues_match_svd(rng):
    X = rng.standard_normal((100, 5)) * [5, 3, 2, 1, 0.5]
    pca = fit_pca(X)
    s = np.linalg.svd(X - X.mean(0), compute_uv=False)
    np.testing.assert_allclose(pca.eigenvalues, s**2 / 99, rtol=1e-10)


def test_pca_sign_convention(rng):
    pca = fit_pca(rng.standard_normal((50, 4)))
    lead = pca.components[np.argmax(np.abs(pca.components), axis=0), np.arange(4)]
    assert np.all(lead > 0)


def test_pca_errors():
    with pytest.raises(DegenerateDataError):
        fit_pca(np.ones((10, 3)))
    with pytest.raises(InsufficientDataError):
        fit_pca(np.zeros((1, 3)))
    with pytest.raises(ShapeError):
        fit_pca(np.zeros(5))


def test_standardizer_constant_column():
    X = np.c_[np.arange(5.0), np.full(5, 3.0)]
    s = Standardizer.fit(X)
    Z = s.transform(X)
    np.testing.assert_allclose(Z[:, 1], 0.0)
    np.testing.assert_allclose(s.inverse(Z), X)


# ---------------------------------------------------------------- ranking


def test_point_biserial_matches_pearson(rng):
    S = rng.standard_normal((40, 3))
    y = rng.integers(0, 2, 40)
    y[:2] = [0, 1]
    expected = [np.corrcoef(S[:, j], y)[0, 1] for j in range(3)]
    np.testing.assert_allclose(point_biserial(S, y), expected, atol=1e-12)
    assert point_biserial(np.ones((40, 1)), y)[0] == 0.0


def test_ranking_finds_the_stress_component(rng):
    X, y, _ = two_class(rng, n=400, C=5, shift=1.0)
    X[:, 1:] *= 3.0  # larger noise elsewhere, so the stress direction is not PC1
    pca = fit_pca(X)
    r = rank_stress_components(pca, X, y)
    assert list(r.columns) == ["component", "correlation", "abs_correlation", "explained_variance_ratio"]
    top = int(r["component"].iloc[0]) - 1
    assert top > 0
    assert abs(pca.components[0, top]) > 0.9
    assert np.all(np.diff(r["abs_correlation"]) <= 0)


# ---------------------------------------------------------------- LDA


def test_lda_recovers_axis(rng):
    true = rng.standard_normal(3)
    X, y, axis = two_class(rng, C=3, shift=2.0, axis=true)
    lda = fit_lda(X, y)
    angle = np.degrees(np.arccos(np.clip(lda.direction @ axis, -1, 1)))
    assert angle < 5.0
    assert np.linalg.norm(lda.direction) == pytest.approx(1.0)
    assert lda.project(X[y == 1]).mean() > lda.project(X[y == 0]).mean()


def test_lda_label_swap_negates(rng):
    X, y, _ = two_class(rng, n=200, C=4)
    a, b = fit_lda(X, y), fit_lda(X, 1 - y)
    np.testing.assert_array_equal(b.direction, -a.direction)


def test_lda_errors(rng):
    X = rng.standard_normal((20, 3))
    with pytest.raises(DegenerateDataError):
        fit_lda(X, np.zeros(20))
    with pytest.raises(DegenerateDataError):
        fit_lda(X, np.full(20, 2))
    with pytest.raises(InsufficientDataError):
        fit_lda(X, np.r_[1, np.zeros(19)])
    with pytest.raises(ShapeError):
        fit_lda(X, np.zeros(5))
    same = np.vstack([np.ones((5, 3)), np.ones((5, 3))])
    with pytest.raises(DegenerateDataError):
        fit_lda(same, np.r_[np.zeros(5), np.ones(5)])


@given(st.integers(0, 2**31 - 1))
def test_lda_invariant_to_row_order(seed):
    rng = np.random.default_rng(seed)
    X, y, _ = two_class(rng, n=60, C=3)
    p = rng.permutation(60)
    np.testing.assert_allclose(fit_lda(X[p], y[p]).direction, fit_lda(X, y).direction, atol=1e-10)


# ---------------------------------------------------------------- perturbation and exports


def test_perturbation_symmetric(rng):
    X, y, _ = two_class(rng, n=200, C=4)
    lda = fit_lda(X, y)
    mean = X.mean(0)
    plus, minus = perturb_along_axis(mean, lda, 3.0)
    np.testing.assert_allclose((plus + minus) / 2, mean, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(plus - mean), 3.0 * lda.sigma_proj)
    with pytest.raises(ShapeError):
        perturb_along_axis(mean[:3], lda)


def test_principal_axis_wraps_pc(rng):
    pca = fit_pca(rng.standard_normal((50, 3)))
    ax = PrincipalAxis.from_pca(pca, 0)
    plus, _ = perturb_along_axis(np.zeros(3), ax, 1.0)
    np.testing.assert_allclose(plus, np.sqrt(pca.eigenvalues[0]) * pca.components[:, 0])


def test_analyze_and_write(rng, tmp_path):
    names = [f"c{i}" for i in range(6)]
    X, y, _ = two_class(rng, n=300, C=6, shift=0.8)
    res = analyze(X * 2 + 5, y, names, top_k=4)
    assert len(res["pca_report"]) == 4
    assert list(res["perturbed_coeffs"].columns) == ["channel", "minus3", "mean", "plus3"]
    assert res["lda_axis"]["channel"].tolist() == names
    paths = write_subspace_report(res, tmp_path)
    assert [p.name for p in paths] == ["pca_report.csv", "lda_axis.csv", "perturbed_coeffs.csv", "pca_embedding.csv"]
    back = pd.read_csv(tmp_path / "lda_axis.csv")
    np.testing.assert_allclose(back["weight"], res["lda_axis"]["weight"], rtol=1e-9)
    with pytest.raises(ShapeError):
        analyze(X, y, names[:5])
