"""Engineered features: facial derivatives, gaze dynamics, windows, baseline
descriptors, model-input assembly and train-only normalization."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data_model import (
    FACIAL_CHANNELS,
    NO_PHASE,
    PHASE_ORDER,
    DriveCondition,
    FeatureSequence,
    Modality,
    PhaseLabel,
    SessionRecording,
    align_to_reference,
    nearest_indices,
)
from .errors import ConfigError, InsufficientDataError, SchemaError, ShapeError

log = logging.getLogger(__name__)

N_FACIAL = len(FACIAL_CHANNELS)
GAZE_DYNAMICS_CHANNELS = [
    "v_x", "v_y", "speed", "a_x", "a_y", "a_mag",
    "roll_mean_1s", "roll_std_1s", "roll_mean_3s", "roll_std_3s", "dispersion_2s",
]
STD_FLOOR = 1e-8


def facial_derivatives(seq: FeatureSequence) -> FeatureSequence:
    if seq.values.shape[1] != N_FACIAL:
        raise SchemaError(f"expected {N_FACIAL} facial channels, got {seq.values.shape[1]}")
    d = np.zeros_like(seq.values)
    d[1:] = np.diff(seq.values, axis=0)
    return FeatureSequence(
        d, [f"d_{c}" for c in seq.channel_names], seq.sample_rate_hz,
        seq.phase_of_frame.copy(), seq.timestamps.copy(), seq.missing.copy(),
    )


def _trailing(x: np.ndarray, n: int):
    r = pd.Series(x).rolling(max(int(n), 1), min_periods=1)
    return r.mean().to_numpy(), r.std(ddof=0).fillna(0.0).to_numpy()


def gaze_dynamics(seq: FeatureSequence) -> FeatureSequence:
    """Velocity, acceleration and trailing-window gaze statistics.

    Differences are trailing; frames without enough history are zero-filled
    (velocity at frame 0, acceleration at frames 0 and 1).
    """
    if len(seq) < 2:
        raise InsufficientDataError("gaze dynamics need at least 2 frames")
    fs = seq.sample_rate_hz
    if not fs > 0:
        raise ConfigError("sample rate must be positive")
    xy = seq.channels(["gaze_x", "gaze_y"]) if "gaze_x" in seq.channel_names else seq.values[:, :2]
    dt = 1.0 / fs

    v = np.zeros_like(xy)
    v[1:] = np.diff(xy, axis=0) / dt
    a = np.zeros_like(xy)
    a[2:] = np.diff(v[1:], axis=0) / dt
    speed = np.hypot(v[:, 0], v[:, 1])
    a_mag = np.hypot(a[:, 0], a[:, 1])

    m1, s1 = _trailing(speed, round(1.0 * fs))
    m3, s3 = _trailing(speed, round(3.0 * fs))
    _, sx = _trailing(xy[:, 0], round(2.0 * fs))
    _, sy = _trailing(xy[:, 1], round(2.0 * fs))
    disp = np.hypot(sx, sy)

    out = np.column_stack([v[:, 0], v[:, 1], speed, a[:, 0], a[:, 1], a_mag, m1, s1, m3, s3, disp])
    return FeatureSequence(
        out, list(GAZE_DYNAMICS_CHANNELS), fs, seq.phase_of_frame.copy(), seq.timestamps.copy(), seq.missing.copy()
    )


# ---------------------------------------------------------------- windows


@dataclass
class Window:
    subject_id: str
    condition: DriveCondition
    phase_mode: PhaseLabel | None
    window_index: int
    frames: np.ndarray
    label: int
    stress_ratio: float
    baseline_descriptor: np.ndarray | None = None
    phase_window_index: int = 0
    start_frame: int = 0
    secondary: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.frames)


def window_length(window_s: float, sample_rate_hz: float) -> int:
    return int(round(window_s * sample_rate_hz))


def _phase_mode(codes: np.ndarray) -> PhaseLabel | None:
    valid = codes[codes != NO_PHASE]
    if len(valid) == 0:
        return None
    counts = np.bincount(valid, minlength=len(PHASE_ORDER))
    return PHASE_ORDER[int(np.argmax(counts))]  # argmax picks the earliest on ties


def segment_windows(
    seq: FeatureSequence,
    window_s: float = 9.0,
    stress_threshold: float = 0.4,
    subject_id: str = "",
    condition=DriveCondition.MD,
    secondary: dict[str, FeatureSequence] | None = None,
) -> list[Window]:
    """Cut ``seq`` into consecutive non-overlapping windows from frame 0.

    The trailing remainder is dropped.  Windows touching a missing frame in
    ``seq`` or any ``secondary`` stream are skipped, but keep their index slot.
    A window is labelled stress (1) iff its share of P2/P4 frames is strictly
    greater than ``stress_threshold``.
    """
    if not window_s > 0:
        raise ConfigError("window_s must be positive")
    T = window_length(window_s, seq.sample_rate_hz)
    if T < 2:
        raise ConfigError(f"window of {T} frames is too short")
    secondary = secondary or {}
    for name, s in secondary.items():
        if len(s) != len(seq):
            raise ShapeError(f"secondary stream {name} has {len(s)} frames, expected {len(seq)}")

    stress_codes = [p.code for p in PHASE_ORDER if p.is_stressor]
    missing = seq.missing.copy()
    for s in secondary.values():
        missing |= s.missing

    windows = []
    per_phase = defaultdict(int)
    for w in range(len(seq) // T):
        sl = slice(w * T, (w + 1) * T)
        codes = seq.phase_of_frame[sl]
        mode = _phase_mode(codes)
        if missing[sl].any():
            continue
        ratio = float(np.isin(codes, stress_codes).mean())
        windows.append(
            Window(
                subject_id=subject_id,
                condition=DriveCondition(condition),
                phase_mode=mode,
                window_index=w,
                frames=seq.values[sl].copy(),
                label=int(ratio > stress_threshold),
                stress_ratio=ratio,
                phase_window_index=per_phase[mode],
                start_frame=w * T,
                secondary={k: s.values[sl].copy() for k, s in secondary.items()},
            )
        )
        per_phase[mode] += 1
    return windows


def _mean_frame_difference(frames: np.ndarray) -> np.ndarray:
    return np.diff(frames, axis=0).mean(axis=0)


def velocity_difference_descriptor(md_frames, nd_frames) -> np.ndarray:
    """Mean over t = 2..T of the MD minus ND frame-to-frame differences."""
    md = np.asarray(getattr(md_frames, "frames", md_frames), dtype=float)
    nd = np.asarray(getattr(nd_frames, "frames", nd_frames), dtype=float)
    if md.shape != nd.shape or md.ndim != 2 or md.shape[0] < 2:
        raise ShapeError(f"window shapes {md.shape} and {nd.shape} are not compatible")
    return (np.diff(md, axis=0) - np.diff(nd, axis=0)).mean(axis=0)


def attach_baseline_descriptors(md_windows: list[Window], nd_windows: list[Window]) -> list[str]:
    """Fill ``baseline_descriptor`` on every MD window from its paired ND window.

    Pairing key is (subject, phase, ordinal within phase).  An unmatched MD
    window falls back to the phase-mean ND frame difference, and to zeros when
    the ND drive has no window in that phase.  Returns the warnings raised.
    """
    nd_by_key = {(w.subject_id, w.phase_mode, w.phase_window_index): w for w in nd_windows}
    nd_phase_mean = {}
    for (subj, phase, _), w in nd_by_key.items():
        nd_phase_mean.setdefault((subj, phase), []).append(_mean_frame_difference(w.frames))
    nd_phase_mean = {k: np.mean(v, axis=0) for k, v in nd_phase_mean.items()}

    warnings = []
    for w in md_windows:
        nd = nd_by_key.get((w.subject_id, w.phase_mode, w.phase_window_index))
        if nd is not None and nd.frames.shape == w.frames.shape:
            w.baseline_descriptor = velocity_difference_descriptor(w.frames, nd.frames)
        elif (w.subject_id, w.phase_mode) in nd_phase_mean:
            w.baseline_descriptor = _mean_frame_difference(w.frames) - nd_phase_mean[(w.subject_id, w.phase_mode)]
        else:
            w.baseline_descriptor = np.zeros(w.frames.shape[1])
            phase = w.phase_mode.value if w.phase_mode else "none"
            warnings.append(f"{w.subject_id}: no ND window in phase {phase}; zero baseline descriptor")
    for msg in sorted(set(warnings)):
        log.warning(msg)
    return warnings


def assemble_model_input(
    window: Window,
    include_delta: bool = True,
    include_baseline: bool = True,
    secondary: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Per-frame ``[facial | deltas | baseline descriptor | secondary]`` matrix.

    The baseline descriptor is broadcast to every frame; a window without one
    (e.g. an ND window) gets zeros.
    """
    frames = np.asarray(window.frames, dtype=float)
    T = len(frames)
    parts = [frames]
    if include_delta:
        d = np.zeros_like(frames)
        d[1:] = np.diff(frames, axis=0)
        parts.append(d)
    if include_baseline:
        desc = window.baseline_descriptor
        desc = np.zeros(frames.shape[1]) if desc is None else np.asarray(desc, dtype=float)
        parts.append(np.broadcast_to(desc, (T, len(desc))))
    if secondary is not None:
        secondary = np.asarray(secondary, dtype=float)
        if secondary.ndim == 1:
            secondary = secondary[:, None]
        if len(secondary) != T:
            raise ShapeError(f"secondary stream has {len(secondary)} frames, window has {T}")
        parts.append(secondary)
    X = np.concatenate(parts, axis=1)
    return X, X.shape[1]


# ---------------------------------------------------------------- normalization


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray


def fit_normalization(train) -> NormalizationStats:
    """Per-channel z-score statistics over every frame of the training windows.

    ``train`` is an ``(N, T, F)`` or ``(N, F)`` array or a list of windows.
    Population standard deviation; values below ``1e-8`` are replaced by 1.
    """
    X = _as_array(train)
    if len(X) < 2:
        raise InsufficientDataError("normalization needs at least 2 training windows")
    flat = X.reshape(-1, X.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return NormalizationStats(mean, std)


def apply_normalization(stats: NormalizationStats, X) -> np.ndarray:
    return (_as_array(X) - stats.mean) / stats.std


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x
    if len(x) and isinstance(x[0], Window):
        return np.stack([w.frames for w in x])
    return np.asarray(x, dtype=float)


# ---------------------------------------------------------------- datasets


@dataclass
class FeatureOptions:
    window_s: float = 9.0
    stress_threshold: float = 0.4
    include_delta: bool = True
    include_baseline: bool = True
    gaze_dynamics: bool = True
    include_nd_windows: bool = False
    max_gap_s: float | None = None


@dataclass
class WindowDataset:
    """Stacked per-stream model inputs for every classified window.

    ``streams`` maps ``facial``/``bio``/``gaze`` to ``(N, T, F)`` arrays;
    ``meta`` has one row per window with the key columns.
    """

    streams: dict[str, np.ndarray]
    channel_names: dict[str, list[str]]
    labels: np.ndarray
    subjects: np.ndarray
    meta: pd.DataFrame
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "WindowDataset":
        idx = np.asarray(idx)
        return WindowDataset(
            {k: v[idx] for k, v in self.streams.items()},
            self.channel_names,
            self.labels[idx],
            self.subjects[idx],
            self.meta.iloc[idx].reset_index(drop=True),
            list(self.warnings),
        )


def session_windows(session: SessionRecording, opts: FeatureOptions) -> list[Window]:
    aligned = align_to_reference(session, Modality.facial, opts.max_gap_s)
    secondary = {}
    if Modality.bio in aligned:
        secondary["bio"] = aligned[Modality.bio]
    if Modality.gaze in session.streams:
        if opts.gaze_dynamics:
            g = session.streams[Modality.gaze]
            raw = FeatureSequence(g.values, list(g.channel_names), g.sample_rate_hz, timestamps=g.timestamps)
            dyn = gaze_dynamics(raw)
            # reuse the alignment result for the dynamics channels
            ref = aligned[Modality.gaze]
            idx, _ = nearest_indices(g.timestamps, ref.timestamps)
            secondary["gaze"] = FeatureSequence(
                dyn.values[idx], dyn.channel_names, ref.sample_rate_hz, ref.phase_of_frame, ref.timestamps, ref.missing
            )
        else:
            secondary["gaze"] = aligned[Modality.gaze]
    return segment_windows(
        aligned[Modality.facial], opts.window_s, opts.stress_threshold,
        session.subject_id, session.condition, secondary,
    )


def build_dataset(sessions: dict, opts: FeatureOptions | None = None) -> WindowDataset:
    """Windows for every subject with baseline descriptors and stacked inputs.

    ``sessions`` maps subject id to ``{DriveCondition: SessionRecording}``.
    Only MD windows are classified unless ``opts.include_nd_windows``.
    """
    opts = opts or FeatureOptions()
    rows, warnings = [], []
    for subject in sorted(sessions):
        by_cond = {DriveCondition(k): v for k, v in sessions[subject].items()}
        md = session_windows(by_cond[DriveCondition.MD], opts) if DriveCondition.MD in by_cond else []
        nd = session_windows(by_cond[DriveCondition.ND], opts) if DriveCondition.ND in by_cond else []
        if opts.include_baseline:
            warnings += attach_baseline_descriptors(md, nd)
        rows += md
        if opts.include_nd_windows:
            rows += nd
    if not rows:
        raise InsufficientDataError("no complete windows in any session")

    T = {w.T for w in rows}
    if len(T) != 1:
        raise ShapeError(f"inconsistent window lengths {sorted(T)}")
    names = {
        "facial": list(FACIAL_CHANNELS)
        + ([f"d_{c}" for c in FACIAL_CHANNELS] if opts.include_delta else [])
        + ([f"dv_{c}" for c in FACIAL_CHANNELS] if opts.include_baseline else [])
    }
    streams = {"facial": np.stack([assemble_model_input(w, opts.include_delta, opts.include_baseline)[0] for w in rows])}
    for key in ("bio", "gaze"):
        if all(key in w.secondary for w in rows):
            streams[key] = np.stack([w.secondary[key] for w in rows])
            names[key] = (
                list(GAZE_DYNAMICS_CHANNELS) if key == "gaze" and opts.gaze_dynamics
                else (["gaze_x", "gaze_y"] if key == "gaze" else ["pp", "hr", "br"])
            )
    meta = windows_table(rows, summary=False)
    return WindowDataset(
        streams, names,
        np.array([w.label for w in rows], dtype=int),
        np.array([w.subject_id for w in rows]),
        meta, warnings,
    )


def windows_table(windows: list[Window], summary: bool = True, channel_names=FACIAL_CHANNELS) -> pd.DataFrame:
    """One row per window: key columns plus per-channel mean/std of the frames."""
    keys = pd.DataFrame(
        {
            "subject": [w.subject_id for w in windows],
            "condition": [w.condition.value for w in windows],
            "phase_mode": [w.phase_mode.value if w.phase_mode else "" for w in windows],
            "window_index": [w.window_index for w in windows],
            "label": [w.label for w in windows],
            "stress_ratio": [w.stress_ratio for w in windows],
        }
    )
    if not summary:
        return keys
    frames = np.stack([w.frames for w in windows])
    means = pd.DataFrame(frames.mean(axis=1), columns=[f"{c}_mean" for c in channel_names])
    stds = pd.DataFrame(frames.std(axis=1), columns=[f"{c}_std" for c in channel_names])
    return pd.concat([keys, means, stds], axis=1)


def summary_features(X: np.ndarray) -> np.ndarray:
    """Per-window channel mean and std: ``(N, T, F) -> (N, 2F)``."""
    return np.concatenate([X.mean(axis=1), X.std(axis=1)], axis=1)
