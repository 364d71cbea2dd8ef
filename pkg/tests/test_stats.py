import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy.interpolate import make_smoothing_spline
from scipy.stats import binomtest

from conftest import load_oracle
from drivestress.data_model import PhaseLabel
from drivestress.errors import ConfigError, InsufficientDataError, ZeroVarianceError
from drivestress.stats import (
    PhaseEffect,
    SmoothingOperator,
    categorize,
    default_spline_lambda,
    one_sample_ttest,
    phase_effects,
    read_stats_report,
    significance_map,
    smooth,
    spline_edf,
    spline_smooth,
    split_conditions,
    t_cdf,
    triangular_smooth,
    velocity_summary,
    write_stats_report,
)
from drivestress.synth import ChannelEffect, SynthConfig, generate

# ---------------------------------------------------------------- smoothing


def test_triangular_width_one_is_identity(rng):
    y = rng.standard_normal(20)
    s, _ = smooth(y, SmoothingOperator("triangular", 1))
    assert np.array_equal(s, y)


def test_triangular_impulse_response():
    s, _ = smooth([0, 0, 1, 0, 0], SmoothingOperator("triangular", 3))
    np.testing.assert_allclose(s, [0, 0.25, 0.5, 0.25, 0], rtol=0, atol=1e-15)


@pytest.mark.parametrize("op", [SmoothingOperator(), SmoothingOperator("triangular", 5), SmoothingOperator("spline", 10.0), SmoothingOperator("spline")])
def test_constant_signal_unchanged(op):
    s, d = smooth(np.full(30, 2.5), op, 10.0)
    np.testing.assert_allclose(s, 2.5, atol=1e-10)
    np.testing.assert_allclose(d, 0, atol=1e-9)


def test_operator_validation():
    with pytest.raises(ConfigError):
        SmoothingOperator("triangular", 4)
    with pytest.raises(ConfigError):
        SmoothingOperator("spline", -1.0)
    with pytest.raises(ConfigError):
        SmoothingOperator("spline", float("inf"))
    with pytest.raises(ConfigError):
        SmoothingOperator("gaussian")
    with pytest.raises(InsufficientDataError):
        spline_smooth(np.zeros(3), 1.0)


def test_spline_zero_penalty_interpolates(rng):
    y = rng.standard_normal(40)
    np.testing.assert_allclose(spline_smooth(y, 0.0), y, atol=1e-8)
    # a tiny positive penalty also reproduces the data closely
    np.testing.assert_allclose(spline_smooth(y, 1e-12), y, atol=1e-8)


def test_spline_huge_penalty_is_least_squares_line(rng):
    x = np.arange(50.0)
    y = 0.3 * x - 2 + rng.standard_normal(50)
    slope, intercept = np.polyfit(x, y, 1)
    np.testing.assert_allclose(spline_smooth(y, 1e12), slope * x + intercept, atol=1e-4)


@pytest.mark.parametrize("lam", [0.1, 3.0, 250.0])
def test_spline_matches_independent_implementation(rng, lam):
    y = rng.standard_normal(60)
    x = np.arange(60.0)
    ref = make_smoothing_spline(x, y, lam=lam)(x)
    np.testing.assert_allclose(spline_smooth(y, lam), ref, atol=1e-8)


def test_spline_matrix_input_is_columnwise(rng):
    Y = rng.standard_normal((25, 3))
    out = spline_smooth(Y, 5.0)
    for c in range(3):
        np.testing.assert_allclose(out[:, c], spline_smooth(Y[:, c], 5.0), atol=1e-12)


def test_default_spline_edf():
    for n in (20, 90, 270):
        assert spline_edf(n, default_spline_lambda(n)) == pytest.approx(max(n / 10, 2.5), rel=1e-6)


def test_derivative_scaled_by_rate():
    _, d = smooth(np.arange(10.0), SmoothingOperator(), 10.0)
    np.testing.assert_allclose(d, 10.0)


@given(hnp.arrays(np.float64, st.integers(2, 40), elements=st.floats(-100, 100)), st.sampled_from([3, 5, 7, 9]))
def test_triangular_never_increases_peak(y, k):
    s = triangular_smooth(y, k)
    assert np.abs(s).max() <= np.abs(y).max() + 1e-9


def test_smoothing_lowers_white_noise_velocity():
    wins = 0
    for seed in range(20):
        y = np.random.default_rng(seed).standard_normal(200)
        raw = velocity_summary(smooth(y, SmoothingOperator())[1])
        tri = velocity_summary(smooth(y, SmoothingOperator("triangular", 5))[1])
        wins += tri < raw
    assert wins == 20


# ---------------------------------------------------------------- velocity summary


def test_velocity_summary_examples():
    assert velocity_summary(np.zeros(5)) == 0
    assert velocity_summary(smooth(np.arange(8.0))[1]) == 1.0
    assert velocity_summary([1, -1, 1]) == 1.0
    with pytest.raises(InsufficientDataError):
        velocity_summary([])


# ---------------------------------------------------------------- t-test


def test_symmetric_sample():
    t, p = one_sample_ttest([-1, 1])
    assert t == 0 and p == 1.0


def test_zero_variance_is_error():
    with pytest.raises(ZeroVarianceError):
        one_sample_ttest([1, 1, 1, 1])
    with pytest.raises(InsufficientDataError):
        one_sample_ttest([1.0])


def test_one_to_five_against_oracle():
    rows = {(r["n"], r["t"]): r for r in load_oracle("t_distribution.json")}
    t, p = one_sample_ttest([1, 2, 3, 4, 5])
    assert t == pytest.approx(np.sqrt(18), rel=1e-12)  # mean 3, s = sqrt(2.5)
    assert p == pytest.approx(0.01324, abs=5e-6)
    # oracle at the neighbouring grid points brackets it
    assert float(rows[(5, 4.25)]["p_two_sided"]) < p < float(rows[(5, 4.0)]["p_two_sided"])


def test_cdf_against_oracle_sample():
    for r in load_oracle("t_distribution.json")[::37]:
        assert abs(t_cdf(r["t"], r["n"] - 1) - float(r["cdf"])) < 1e-12


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=20), st.floats(1e-3, 1e3))
def test_ttest_scale_invariant(diffs, c):
    x = np.array(diffs)
    if np.ptp(x) < 1e-6 * max(1.0, np.abs(x).max()):
        return
    t1, p1 = one_sample_ttest(x)
    t2, p2 = one_sample_ttest(c * x)
    assert abs(t1 - t2) <= 1e-9 * max(1.0, abs(t1))
    assert abs(p1 - p2) < 1e-9


# ---------------------------------------------------------------- phase effects


def _two_sigma_sessions(n_subjects=24, seed=3):
    cfg = SynthConfig(
        n_subjects=n_subjects,
        modalities=("facial", "bio"),
        sample_rate_hz={"facial": 5.0, "bio": 5.0, "gaze": 15.0},
        phase_durations_s=(30.0,) * 5,
        effects=[ChannelEffect("exp_03", "mean_shift", 2.0)],
        seed=seed,
    )
    return split_conditions(generate(cfg))


def test_two_sigma_mean_shift_detected_only_in_stressor_phases():
    md, nd = _two_sigma_sessions()
    eff = phase_effects(md, nd, SmoothingOperator())
    cell = {(e.feature, e.phase, e.summary_kind): e for e in eff}
    for ph in (PhaseLabel.P2, PhaseLabel.P4):
        assert cell[("exp_03", ph, "mean_level")].p_value < 1e-3
    assert cell[("exp_03", PhaseLabel.P3, "mean_level")].p_value > 0.05
    assert cell[("exp_03", PhaseLabel.P2, "mean_level")].n == 24


def test_single_subject_all_invalid():
    md, nd = _two_sigma_sessions(n_subjects=1)
    eff = phase_effects(md, nd)
    assert eff and not any(e.valid for e in eff)
    assert set(significance_map(eff).grid.stack()) == {"invalid"}


def test_null_false_positive_rate_near_alpha():
    cfg = SynthConfig(n_subjects=10, modalities=("facial",), sample_rate_hz={"facial": 2.0, "bio": 2.0, "gaze": 2.0}, phase_durations_s=(10.0,) * 5, seed=11)
    md, nd = split_conditions(generate(cfg))
    p = np.array([e.p_value for e in phase_effects(md, nd, modalities=("facial",)) if e.valid])
    hits = int((p < 0.05).sum())
    assert binomtest(hits, len(p), 0.05).pvalue > 0.001


def _effect(feature, phase, p, valid=True):
    return PhaseEffect(feature, PhaseLabel(phase), "velocity", np.array([]), 5, 0.1, 1.0, p, valid, "none")


def test_all_p_one_counts_zero():
    eff = [_effect(f, ph, 1.0) for f in ("a", "b") for ph in ("P1", "P2", "P3", "P4", "P5")]
    m = significance_map(eff)
    assert set(m.grid.stack()) == {"ns"}
    assert all(v == 0 for v in m.counts.values())


def test_categories_and_counts():
    assert categorize(0.0005) == "p<0.001"
    assert categorize(0.01) == "p<0.05"
    assert categorize(0.5) == "ns"
    assert categorize(float("nan")) == "invalid"
    eff = [_effect("a", "P2", 1e-4), _effect("a", "P4", 1e-5), _effect("b", "P2", 0.01), _effect("b", "P4", 0.2)]
    m = significance_map(eff)
    assert m.counts["velocity|p<0.001|both_P2_P4"] == 1
    assert m.counts["velocity|p<0.05|either_P2_P4"] == 2
    assert m.counts["velocity|p<0.05|only_one_of_P2_P4"] == 1
    assert m.stressor_features("velocity", 0.001) == ["a"]


def test_report_round_trip(tmp_path):
    eff = [_effect("a", "P2", 1e-4), _effect("a", "P3", 0.3), _effect("b", "P4", float("nan"), valid=False)]
    df = write_stats_report(eff, tmp_path / "stats_report.csv")
    assert list(df.columns) == ["feature", "phase", "summary_kind", "smoothing", "n", "mean_diff", "t", "p", "category"]
    back = read_stats_report(tmp_path / "stats_report.csv")
    a, b = significance_map(eff), significance_map(back)
    assert a.grid.equals(b.grid) and a.counts == b.counts
    assert [e.p_value for e in back[:2]] == [1e-4, 0.3]
