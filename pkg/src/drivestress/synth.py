"""Deterministic synthetic MD/ND session pairs with controllable stress effects.

Every channel is an AR(1) process with a subject-specific offset.  Effects are
applied to the MD drive only, inside their phases:

* ``mean_shift`` adds ``magnitude * sigma``;
* ``velocity_boost`` rescales the deviation from the phase mean by
  ``1 + magnitude``, which scales every frame-to-frame difference by the same
  factor while leaving the phase mean untouched.

Bio effects are shifted later in time by ``bio_lag_s``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .data_model import (
    BIO_CHANNELS,
    CHANNELS,
    FACIAL_CHANNELS,
    GAZE_CHANNELS,
    PHASE_ORDER,
    DriveCondition,
    Modality,
    PhaseInterval,
    PhaseLabel,
    RawStream,
    SessionRecording,
    session_dirname,
    write_session,
)
from .errors import ConfigError

EFFECT_KINDS = ("mean_shift", "velocity_boost")

# stationary level and AR(1) noise sigma per non-facial channel
_BIO_LEVEL = {"pp": 0.005, "hr": 75.0, "br": 16.0}
_BIO_SIGMA = {"pp": 0.001, "hr": 3.0, "br": 1.5}
_GAZE_SIGMA = {"gaze_x": 0.05, "gaze_y": 0.05}


@dataclass
class ChannelEffect:
    channel: str
    kind: str
    magnitude: float
    phases: tuple = (PhaseLabel.P2, PhaseLabel.P4)

    def __post_init__(self):
        if self.kind not in EFFECT_KINDS:
            raise ConfigError(f"unknown effect kind {self.kind!r}")
        if not np.isfinite(self.magnitude):
            raise ConfigError("effect magnitude must be finite")
        self.phases = tuple(PhaseLabel(p) for p in self.phases)


@dataclass
class SynthConfig:
    n_subjects: int = 24
    sample_rate_hz: dict = field(default_factory=lambda: {"facial": 10.0, "bio": 10.0, "gaze": 30.0})
    phase_durations_s: tuple = (54.0, 54.0, 54.0, 54.0, 54.0)
    ar_rho: float = 0.9
    noise_sigma: dict = field(default_factory=dict)  # per-channel override of the AR(1) sigma
    subject_offset_sigma: float = 1.0  # in units of the channel sigma
    effects: list = field(default_factory=list)
    bio_lag_s: float = 2.0
    modalities: tuple = ("facial", "bio", "gaze")
    seed: int = 0

    def __post_init__(self):
        self.effects = [e if isinstance(e, ChannelEffect) else ChannelEffect(**e) for e in self.effects]
        if len(self.phase_durations_s) != len(PHASE_ORDER) or any(d <= 0 for d in self.phase_durations_s):
            raise ConfigError("need five positive phase durations")
        if not 0.0 <= self.ar_rho < 1.0:
            raise ConfigError("ar_rho must be in [0, 1)")
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if any(r <= 0 for r in self.sample_rate_hz.values()):
            raise ConfigError("sample rates must be positive")
        known = set(FACIAL_CHANNELS) | set(BIO_CHANNELS) | set(GAZE_CHANNELS)
        for e in self.effects:
            if e.channel not in known:
                raise ConfigError(f"effect on unknown channel {e.channel!r}")

    def channel_sigma(self, name: str) -> float:
        if name in self.noise_sigma:
            return float(self.noise_sigma[name])
        if name in _BIO_SIGMA:
            return _BIO_SIGMA[name]
        if name in _GAZE_SIGMA:
            return _GAZE_SIGMA[name]
        return 0.1 if name.startswith("pose") else 1.0

    def phase_intervals(self) -> list[PhaseInterval]:
        edges = np.concatenate([[0.0], np.cumsum(self.phase_durations_s)])
        return [PhaseInterval(p, float(a), float(b)) for p, a, b in zip(PHASE_ORDER, edges[:-1], edges[1:])]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["effects"] = [{**asdict(e), "phases": [p.value for p in e.phases]} for e in self.effects]
        d["phase_durations_s"] = list(self.phase_durations_s)
        d["modalities"] = list(self.modalities)
        return d


def subject_id(i: int) -> str:
    return f"S{i:03d}"


def _ar1(rng, n, sigmas, rho):
    eps = rng.standard_normal((n, len(sigmas))) * np.sqrt(1.0 - rho**2)
    x0 = rng.standard_normal(len(sigmas))
    x = lfilter([1.0], [1.0, -rho], eps, axis=0, zi=(rho * x0)[None, :])[0]
    return x * sigmas


def _stream(cfg: SynthConfig, modality: Modality, offsets, rng, condition, intervals, duration):
    names = CHANNELS[modality]
    fs = float(cfg.sample_rate_hz[modality.value])
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    sig = np.array([cfg.channel_sigma(c) for c in names])
    x = _ar1(rng, n, sig, cfg.ar_rho)
    if condition is DriveCondition.MD:
        lag = cfg.bio_lag_s if modality is Modality.bio else 0.0
        bounds = {p.label: (p.start_s + lag, p.end_s + lag) for p in intervals}
        for e in cfg.effects:
            if e.channel not in names:
                continue
            c = names.index(e.channel)
            for ph in e.phases:
                lo, hi = bounds[ph]
                m = (t >= lo) & (t < hi)
                if not m.any():
                    continue
                if e.kind == "mean_shift":
                    x[m, c] += e.magnitude * sig[c]
                else:
                    seg = x[m, c]
                    x[m, c] = seg.mean() + (1.0 + e.magnitude) * (seg - seg.mean())
    base = np.array([_BIO_LEVEL.get(c, 0.0) for c in names])
    return RawStream(modality, t, x + base + offsets, fs)


def generate(cfg: SynthConfig) -> dict[str, dict[DriveCondition, SessionRecording]]:
    """``{subject_id: {MD: session, ND: session}}``, deterministic per ``cfg.seed``."""
    intervals = cfg.phase_intervals()
    duration = intervals[-1].end_s
    out = {}
    for i in range(cfg.n_subjects):
        ss = np.random.SeedSequence([int(cfg.seed), i])
        offset_rng, md_rng, nd_rng = (np.random.default_rng(s) for s in ss.spawn(3))
        offsets = {
            m: offset_rng.standard_normal(len(CHANNELS[m]))
            * cfg.subject_offset_sigma
            * np.array([cfg.channel_sigma(c) for c in CHANNELS[m]])
            for m in Modality
        }
        sessions = {}
        for cond, rng in ((DriveCondition.MD, md_rng), (DriveCondition.ND, nd_rng)):
            streams = {
                Modality(m): _stream(cfg, Modality(m), offsets[Modality(m)], rng, cond, intervals, duration)
                for m in cfg.modalities
            }
            sessions[cond] = SessionRecording(subject_id(i), cond, streams, intervals)
        out[subject_id(i)] = sessions
    return out


def write_sessions(sessions: dict, root) -> list:
    root = Path(root)
    written = []
    for subj in sorted(sessions):
        for cond in sorted(sessions[subj], key=lambda c: c.value):
            written.append(write_session(sessions[subj][cond], root / session_dirname(subj, cond)))
    return written


# ---------------------------------------------------------------- presets

# the 32 expression channels plus all six pose channels carry the velocity effect
STATS_38_CHANNELS = [f"exp_{i:02d}" for i in range(31)] + ["exp_40"] + [f"pose_{i:02d}" for i in range(6)]
STRONG_VELOCITY_CHANNELS = STATS_38_CHANNELS
STRONG_MEAN_CHANNELS = ["exp_03", "exp_18", "exp_20", "exp_40", "pose_00", "exp_10", "exp_25", "exp_33", "exp_45", "pose_03"]

_CLASSIFICATION_RATES = {"facial": 5.0, "bio": 5.0, "gaze": 15.0}


def _strong_facial_effects():
    return [ChannelEffect(c, "velocity_boost", 1.0) for c in STRONG_VELOCITY_CHANNELS] + [
        ChannelEffect(c, "mean_shift", 1.0) for c in STRONG_MEAN_CHANNELS
    ]


def benchmark_preset(name: str, **overrides) -> SynthConfig:
    """Named configurations used by the benchmarks.

    * ``stats_38``: 24 subjects, velocity effects on exactly 38 facial channels.
    * ``separable_strong``: 25 subjects, strong facial effects, moderate bio
      and gaze effects.
    * ``weak_bio``: the ``separable_strong`` facial and gaze effects with no
      bio effect at all.
    * ``null``: no effects anywhere.
    """
    if name == "stats_38":
        cfg = dict(
            n_subjects=24,
            effects=[ChannelEffect(c, "velocity_boost", 0.6) for c in STATS_38_CHANNELS],
        )
    elif name == "separable_strong":
        cfg = dict(
            n_subjects=25,
            sample_rate_hz=dict(_CLASSIFICATION_RATES),
            effects=_strong_facial_effects()
            + [ChannelEffect(c, "mean_shift", 1.0) for c in BIO_CHANNELS]
            + [ChannelEffect(c, "velocity_boost", 0.5) for c in GAZE_CHANNELS],
        )
    elif name == "weak_bio":
        cfg = dict(
            n_subjects=25,
            sample_rate_hz=dict(_CLASSIFICATION_RATES),
            effects=_strong_facial_effects() + [ChannelEffect(c, "velocity_boost", 0.5) for c in GAZE_CHANNELS],
        )
    elif name == "null":
        cfg = dict(n_subjects=24, effects=[])
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    cfg.update(overrides)
    return SynthConfig(**cfg)


PRESETS = ("stats_38", "separable_strong", "weak_bio", "null")
