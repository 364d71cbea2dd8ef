"""Phase-wise MD-ND paired analysis.

Per subject, phase and channel the (optionally smoothed) signal is reduced to
a mean level and a velocity summary (mean absolute derivative).  MD minus ND
differences across subjects are tested against zero with a two-sided
one-sample t-test.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import linalg, optimize, special

from .data_model import (
    BIO_CHANNELS,
    FACIAL_CHANNELS,
    PHASE_ORDER,
    DriveCondition,
    Modality,
    PhaseLabel,
    SessionRecording,
)
from .errors import ConfigError, InsufficientDataError, ZeroVarianceError

SUMMARY_KINDS = ("mean_level", "velocity")
CATEGORIES = ("invalid", "ns", "p<0.05", "p<0.001")


@dataclass(frozen=True)
class SmoothingOperator:
    """``kind`` is ``none``, ``triangular`` (``param`` = odd width) or
    ``spline`` (``param`` = penalty weight; ``None`` picks it so that the
    effective degrees of freedom are about T/10)."""

    kind: str = "none"
    param: float | None = None

    def __post_init__(self):
        if self.kind not in ("none", "triangular", "spline"):
            raise ConfigError(f"unknown smoothing kind {self.kind!r}")
        if self.kind == "triangular":
            k = 5 if self.param is None else self.param
            if int(k) != k or k < 1 or int(k) % 2 == 0:
                raise ConfigError(f"triangular width must be an odd integer >= 1, got {k}")
            object.__setattr__(self, "param", int(k))
        if self.kind == "spline" and self.param is not None:
            if not math.isfinite(self.param) or self.param < 0:
                raise ConfigError(f"spline penalty must be finite and >= 0, got {self.param}")

    @property
    def name(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "triangular":
            return f"triangular_k{self.param}"
        return "spline_auto" if self.param is None else f"spline_lam{self.param:g}"


# ---------------------------------------------------------------- smoothing


def triangular_kernel(k: int) -> np.ndarray:
    h = (k - 1) // 2
    w = (h + 1 - np.abs(np.arange(-h, h + 1))).astype(float)
    return w / w.sum()


def triangular_smooth(y: np.ndarray, k: int) -> np.ndarray:
    """Convolve along axis 0 with a normalised triangular kernel, reflect padded."""
    if k == 1:
        return y.copy()
    w = triangular_kernel(k)
    h = len(w) // 2
    pad = [(h, h)] + [(0, 0)] * (y.ndim - 1)
    yp = np.pad(y, pad, mode="reflect") if len(y) > 1 else np.pad(y, pad, mode="edge")
    out = np.zeros_like(y, dtype=float)
    for j, wj in enumerate(w):
        out += wj * yp[j : j + len(y)]
    return out


def _spline_bands(n: int):
    """Reinsch matrices on a unit-spaced grid as dense-band helpers.

    Q is n x (n-2) with columns (1, -2, 1); R is (n-2) x (n-2) tridiagonal
    with 2/3 on the diagonal and 1/6 off it.
    """
    m = n - 2
    # upper banded storage for R + lam * Q^T Q (bandwidth 2)
    qtq = np.zeros((3, m))
    qtq[2] = 6.0
    qtq[1, 1:] = -4.0
    qtq[0, 2:] = 1.0
    r = np.zeros((3, m))
    r[2] = 2.0 / 3.0
    r[1, 1:] = 1.0 / 6.0
    return r, qtq


def spline_smooth(y: np.ndarray, lam: float) -> np.ndarray:
    """Natural cubic smoothing spline at the sample points (unit spacing).

    Minimises ``sum (y - f)^2 + lam * integral f''^2`` via the Reinsch
    form: ``(R + lam Q^T Q) gamma = Q^T y`` and ``f = y - lam Q gamma``.
    """
    n = len(y)
    if n < 4:
        raise InsufficientDataError("spline smoothing needs at least 4 samples")
    if lam == 0:
        return np.array(y, dtype=float, copy=True)
    y2 = y.reshape(n, -1).astype(float)
    r, qtq = _spline_bands(n)
    ab = r + lam * qtq
    qty = y2[:-2] - 2.0 * y2[1:-1] + y2[2:]
    gamma = linalg.solveh_banded(ab, qty)
    qg = np.zeros_like(y2)
    qg[:-2] += gamma
    qg[1:-1] -= 2.0 * gamma
    qg[2:] += gamma
    return (y2 - lam * qg).reshape(y.shape)


@functools.lru_cache(maxsize=256)
def _penalty_eigenvalues(n: int) -> np.ndarray:
    Q = np.zeros((n, n - 2))
    idx = np.arange(n - 2)
    Q[idx, idx] = 1.0
    Q[idx + 1, idx] = -2.0
    Q[idx + 2, idx] = 1.0
    R = np.diag(np.full(n - 2, 2.0 / 3.0)) + np.diag(np.full(n - 3, 1.0 / 6.0), 1) + np.diag(np.full(n - 3, 1.0 / 6.0), -1)
    K = Q @ np.linalg.solve(R, Q.T)
    return np.clip(np.linalg.eigvalsh((K + K.T) / 2), 0.0, None)


def spline_edf(n: int, lam: float) -> float:
    """Effective degrees of freedom (trace of the smoother matrix)."""
    return float(np.sum(1.0 / (1.0 + lam * _penalty_eigenvalues(n))))


@functools.lru_cache(maxsize=256)
def spline_lambda_for_edf(n: int, edf: float) -> float:
    edf = min(max(edf, 2.0 + 1e-6), n - 1e-6)
    f = lambda loglam: spline_edf(n, math.exp(loglam)) - edf
    return math.exp(optimize.brentq(f, -30.0, 60.0, xtol=1e-10))


def default_spline_lambda(n: int) -> float:
    return spline_lambda_for_edf(n, max(n / 10.0, 2.5))


def smooth(signal, op: SmoothingOperator = SmoothingOperator(), sample_rate_hz: float = 1.0):
    """Return ``(smoothed, derivative)`` along axis 0.

    The derivative uses central differences of the smoothed signal (one-sided
    at the ends) multiplied by the sample rate.
    """
    y = np.asarray(signal, dtype=float)
    if len(y) < 2:
        raise InsufficientDataError("smoothing needs at least 2 samples")
    if op.kind == "none":
        s = y.copy()
    elif op.kind == "triangular":
        s = triangular_smooth(y, op.param)
    else:
        lam = default_spline_lambda(len(y)) if op.param is None else op.param
        s = spline_smooth(y, lam)
    return s, np.gradient(s, axis=0) * sample_rate_hz


def velocity_summary(derivative) -> float | np.ndarray:
    d = np.asarray(derivative, dtype=float)
    if d.shape[0] == 0:
        raise InsufficientDataError("velocity summary of an empty signal")
    return np.abs(d).mean(axis=0)


# ---------------------------------------------------------------- t-test


def t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` of Student's t.

    Uses the regularized incomplete beta form ``I_{df/(df+t^2)}(df/2, 1/2)``,
    which avoids the cancellation in ``2 * (1 - cdf)``.
    """
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def t_cdf(t: float, df: float) -> float:
    half = 0.5 * t_sf2(t, df)
    return 1.0 - half if t >= 0 else half


def one_sample_ttest(diffs) -> tuple[float, float]:
    x = np.asarray(diffs, dtype=float)
    n = len(x)
    if n < 2:
        raise InsufficientDataError("t-test needs at least 2 values")
    if np.all(x == x[0]):
        raise ZeroVarianceError("all differences are identical")
    s = x.std(ddof=1)
    if s == 0:
        raise ZeroVarianceError("zero sample variance")
    t = float(x.mean() / (s / math.sqrt(n)))
    return t, t_sf2(t, n - 1)


# ---------------------------------------------------------------- phase effects


@dataclass
class PhaseEffect:
    feature: str
    phase: PhaseLabel
    summary_kind: str
    diffs: np.ndarray
    n: int
    mean_diff: float
    t_stat: float
    p_value: float
    valid: bool = True
    smoothing: str = "none"


def phase_summaries(session: SessionRecording, modality: Modality, op: SmoothingOperator, min_frames: int = 2):
    """``{phase: (mean_level[C], velocity[C])}`` for one session and modality."""
    stream = session.streams.get(modality)
    if stream is None:
        return {}
    codes = session.phase_codes(stream.timestamps)
    out = {}
    for phase in PHASE_ORDER:
        seg = stream.values[codes == phase.code]
        if len(seg) < min_frames:
            continue
        s, d = smooth(seg, op, stream.sample_rate_hz)
        out[phase] = (s.mean(axis=0), velocity_summary(d))
    return out


def phase_effects(md_sessions, nd_sessions, op: SmoothingOperator = SmoothingOperator(), modalities=(Modality.facial, Modality.bio)):
    """Paired MD-ND t-tests for every (feature, phase, summary kind).

    ``md_sessions``/``nd_sessions`` are lists (or dicts keyed by subject) of
    sessions; pairing is by ``subject_id``.  Facial channels use ``op``; bio
    channels are always summarised unsmoothed.  Cells with fewer than two
    paired subjects, or with zero spread, are returned with ``valid=False``.
    """
    md = _by_subject(md_sessions)
    nd = _by_subject(nd_sessions)
    subjects = sorted(set(md) & set(nd))
    effects = []
    for modality in map(Modality, modalities):
        mod_op = op if modality is Modality.facial else SmoothingOperator("none")
        min_frames = 4 if mod_op.kind == "spline" else 2
        channels = FACIAL_CHANNELS if modality is Modality.facial else BIO_CHANNELS
        summ = {
            s: (phase_summaries(md[s], modality, mod_op, min_frames), phase_summaries(nd[s], modality, mod_op, min_frames))
            for s in subjects
        }
        for phase in PHASE_ORDER:
            paired = [(a[phase], b[phase]) for a, b in summ.values() if phase in a and phase in b]
            for k, kind in enumerate(SUMMARY_KINDS):
                D = np.array([a[k] - b[k] for a, b in paired]).reshape(len(paired), len(channels))
                for c, name in enumerate(channels):
                    effects.append(_cell(name, phase, kind, D[:, c], op.name if modality is Modality.facial else "none"))
    return effects


def _cell(feature, phase, kind, diffs, smoothing) -> PhaseEffect:
    n = len(diffs)
    mean_diff = float(diffs.mean()) if n else float("nan")
    if n < 2:
        return PhaseEffect(feature, phase, kind, diffs, n, mean_diff, float("nan"), float("nan"), False, smoothing)
    try:
        t, p = one_sample_ttest(diffs)
    except ZeroVarianceError:
        return PhaseEffect(feature, phase, kind, diffs, n, mean_diff, float("nan"), float("nan"), False, smoothing)
    return PhaseEffect(feature, phase, kind, diffs, n, mean_diff, t, p, True, smoothing)


def _by_subject(sessions) -> dict[str, SessionRecording]:
    if isinstance(sessions, dict):
        return dict(sessions)
    return {s.subject_id: s for s in sessions}


def split_conditions(sessions: dict):
    """Split ``{subject: {condition: session}}`` into (MD list, ND list)."""
    md = [v[DriveCondition.MD] for v in sessions.values() if DriveCondition.MD in v]
    nd = [v[DriveCondition.ND] for v in sessions.values() if DriveCondition.ND in v]
    return md, nd


# ---------------------------------------------------------------- significance maps


def categorize(p: float, valid: bool = True, thresholds=(0.05, 0.001)) -> str:
    if not valid or not np.isfinite(p):
        return "invalid"
    label = "ns"
    for th in sorted(thresholds, reverse=True):
        if p < th:
            label = f"p<{th:g}"
    return label


@dataclass
class SignificanceMap:
    grid: pd.DataFrame  # index (feature, summary_kind), columns P1..P5, category strings
    counts: dict
    pvalues: pd.DataFrame

    def stressor_features(self, kind: str, threshold: float, mode: str = "both", features=None) -> list[str]:
        """Features with p < threshold in both (or either) of P2 and P4."""
        return _stressor_hits(self.pvalues, kind, threshold, mode, features)


def significance_map(effects, thresholds=(0.05, 0.001)) -> SignificanceMap:
    rows = {}
    pvals = {}
    for e in effects:
        key = (e.feature, e.summary_kind)
        rows.setdefault(key, {})[e.phase.value] = categorize(e.p_value, e.valid, thresholds)
        pvals.setdefault(key, {})[e.phase.value] = e.p_value if e.valid else np.nan
    grid = pd.DataFrame.from_dict(rows, orient="index").reindex(columns=[p.value for p in PHASE_ORDER]).fillna("invalid")
    grid.index = pd.MultiIndex.from_tuples(grid.index, names=["feature", "summary_kind"])
    pgrid = pd.DataFrame.from_dict(pvals, orient="index").reindex(columns=[p.value for p in PHASE_ORDER])
    pgrid.index = grid.index

    counts = {}
    kinds = sorted({k for _, k in grid.index})
    for kind in kinds:
        for th in thresholds:
            both = _stressor_hits(pgrid, kind, th, "both")
            either = _stressor_hits(pgrid, kind, th, "either")
            counts[f"{kind}|p<{th:g}|both_P2_P4"] = len(both)
            counts[f"{kind}|p<{th:g}|either_P2_P4"] = len(either)
            counts[f"{kind}|p<{th:g}|only_one_of_P2_P4"] = len(set(either) - set(both))
    return SignificanceMap(grid, counts, pgrid)


def _stressor_hits(pgrid: pd.DataFrame, kind: str, threshold: float, mode: str, features=None) -> list[str]:
    sub = pgrid.xs(kind, level="summary_kind")
    if features is not None:
        sub = sub.loc[[f for f in features if f in sub.index]]
    hit = sub[["P2", "P4"]].lt(threshold)
    mask = hit.all(axis=1) if mode == "both" else hit.any(axis=1)
    return list(sub.index[mask])


# ---------------------------------------------------------------- report IO

REPORT_COLUMNS = ["feature", "phase", "summary_kind", "smoothing", "n", "mean_diff", "t", "p", "category"]


def effects_table(effects, thresholds=(0.05, 0.001)) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "feature": e.feature,
                "phase": e.phase.value,
                "summary_kind": e.summary_kind,
                "smoothing": e.smoothing,
                "n": e.n,
                "mean_diff": e.mean_diff,
                "t": e.t_stat,
                "p": e.p_value,
                "category": categorize(e.p_value, e.valid, thresholds),
            }
            for e in effects
        ],
        columns=REPORT_COLUMNS,
    )


def write_stats_report(effects, path, thresholds=(0.05, 0.001)) -> pd.DataFrame:
    df = effects_table(effects, thresholds)
    df.to_csv(path, index=False, lineterminator="\n")
    return df


def read_stats_report(path) -> list[PhaseEffect]:
    df = pd.read_csv(path, keep_default_na=True)
    return [
        PhaseEffect(
            r.feature, PhaseLabel(r.phase), r.summary_kind, np.array([]), int(r.n), float(r.mean_diff),
            float(r.t), float(r.p), r.category != "invalid", r.smoothing,
        )
        for r in df.itertuples(index=False)
    ]
