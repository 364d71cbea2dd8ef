"""Session, stream and phase types plus CSV/manifest ingestion and alignment.

A session is one subject driving under one condition (normal ``ND`` or
sensorimotor-distracted ``MD``).  Each modality arrives as its own table with
its own clock; :func:`align_to_reference` puts them on the facial clock.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import EmptyStreamError, ManifestError, SchemaError

log = logging.getLogger(__name__)


class PhaseLabel(str, Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"
    P4 = "P4"
    P5 = "P5"

    @property
    def code(self) -> int:
        return PHASE_ORDER.index(self)

    @property
    def is_stressor(self) -> bool:
        return self in STRESSOR_PHASES


PHASE_ORDER = list(PhaseLabel)
STRESSOR_PHASES = frozenset({PhaseLabel.P2, PhaseLabel.P4})
NO_PHASE = -1  # phase code for frames outside every interval


class DriveCondition(str, Enum):
    ND = "ND"
    MD = "MD"


class Modality(str, Enum):
    facial = "facial"
    bio = "bio"
    gaze = "gaze"


FACIAL_CHANNELS = [f"exp_{i:02d}" for i in range(50)] + [f"pose_{i:02d}" for i in range(6)]
BIO_CHANNELS = ["pp", "hr", "br"]
GAZE_CHANNELS = ["gaze_x", "gaze_y"]
CHANNELS = {
    Modality.facial: FACIAL_CHANNELS,
    Modality.bio: BIO_CHANNELS,
    Modality.gaze: GAZE_CHANNELS,
}
TIMESTAMP_COLUMN = "timestamp_s"


@dataclass
class RawStream:
    modality: Modality
    timestamps: np.ndarray
    values: np.ndarray
    sample_rate_hz: float
    channel_names: list[str] = None

    def __post_init__(self):
        self.modality = Modality(self.modality)
        if self.channel_names is None:
            self.channel_names = list(CHANNELS[self.modality])
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.channel_names):
            raise SchemaError(
                f"{self.modality.value}: values shape {self.values.shape} does not match "
                f"{len(self.channel_names)} channels"
            )
        if list(self.channel_names) != CHANNELS[self.modality]:
            raise SchemaError(f"{self.modality.value}: unexpected channel layout")
        if len(self.timestamps) != len(self.values):
            raise SchemaError(f"{self.modality.value}: timestamp/value length mismatch")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise SchemaError(f"{self.modality.value}: timestamps not strictly increasing")
        if not self.sample_rate_hz > 0:
            raise ManifestError(f"{self.modality.value}: sample rate must be positive")

    def __len__(self):
        return len(self.timestamps)


@dataclass(frozen=True)
class PhaseInterval:
    label: PhaseLabel
    start_s: float
    end_s: float


@dataclass
class SessionRecording:
    subject_id: str
    condition: DriveCondition
    streams: dict[Modality, RawStream]
    phase_intervals: list[PhaseInterval]
    cleaning: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.subject_id:
            raise ManifestError("subject_id must be non-empty")
        self.condition = DriveCondition(self.condition)
        self.streams = {Modality(k): v for k, v in self.streams.items()}
        self.phase_intervals = [
            p if isinstance(p, PhaseInterval) else PhaseInterval(PhaseLabel(p[0]), float(p[1]), float(p[2]))
            for p in self.phase_intervals
        ]
        check_phase_intervals(self.phase_intervals)

    def phase_codes(self, timestamps) -> np.ndarray:
        return assign_phases(timestamps, self.phase_intervals)


@dataclass
class FeatureSequence:
    """Uniformly sampled multichannel series.

    ``phase_of_frame`` holds integer phase codes (0..4 for P1..P5, ``NO_PHASE``
    otherwise).  ``missing`` flags frames that had no source sample within the
    alignment gap; their values repeat the nearest sample and must not be used.
    """

    values: np.ndarray
    channel_names: list[str]
    sample_rate_hz: float
    phase_of_frame: np.ndarray = None
    timestamps: np.ndarray = None
    missing: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        n = len(self.values)
        if len(set(self.channel_names)) != len(self.channel_names):
            raise SchemaError("channel names must be unique")
        if self.values.shape[1] != len(self.channel_names):
            raise SchemaError("channel count does not match channel names")
        if self.phase_of_frame is None:
            self.phase_of_frame = np.full(n, NO_PHASE, dtype=np.int8)
        self.phase_of_frame = np.asarray(self.phase_of_frame, dtype=np.int8)
        if self.missing is None:
            self.missing = np.zeros(n, dtype=bool)
        if self.timestamps is None:
            self.timestamps = np.arange(n) / self.sample_rate_hz

    def __len__(self):
        return len(self.values)

    def channels(self, names) -> np.ndarray:
        idx = [self.channel_names.index(n) for n in names]
        return self.values[:, idx]


def check_phase_intervals(intervals) -> None:
    prev_end = -np.inf
    for p in intervals:
        if not p.end_s > p.start_s:
            raise ManifestError(f"phase {p.label.value} has non-positive duration")
        if p.start_s < prev_end:
            raise ManifestError(f"phase {p.label.value} overlaps or precedes the previous phase")
        prev_end = p.end_s


def assign_phases(timestamps, intervals) -> np.ndarray:
    """Phase code per timestamp using half-open ``[start, end)`` membership."""
    t = np.asarray(timestamps, dtype=float)
    codes = np.full(len(t), NO_PHASE, dtype=np.int8)
    for p in intervals:
        codes[(t >= p.start_s) & (t < p.end_s)] = p.label.code
    return codes


# ---------------------------------------------------------------- ingestion


def clean_table(df: pd.DataFrame, modality) -> tuple[np.ndarray, np.ndarray, dict]:
    """Validate columns and drop non-finite or non-monotonic rows.

    Returns timestamps, values and a per-reason drop summary.
    """
    modality = Modality(modality)
    required = [TIMESTAMP_COLUMN] + CHANNELS[modality]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"{modality.value}: missing columns {missing[:5]}{'...' if len(missing) > 5 else ''}")

    arr = df[required].to_numpy(dtype=float)
    finite = np.isfinite(arr).all(axis=1)
    arr = arr[finite]
    t = arr[:, 0]

    # keep a row only if it is later than everything kept before it
    prev_max = np.maximum.accumulate(np.concatenate([[-np.inf], t]))[:-1]
    keep = t > prev_max
    summary = {
        "non_finite": int((~finite).sum()),
        "duplicate": int((t == prev_max).sum()),
        "non_monotonic": int((t < prev_max).sum()),
    }
    arr = arr[keep]
    if len(arr) == 0:
        raise EmptyStreamError(f"{modality.value}: no rows left after cleaning")
    return arr[:, 0], arr[:, 1:], summary


def parse_manifest(manifest) -> dict:
    if isinstance(manifest, (str, Path)):
        manifest = json.loads(Path(manifest).read_text())
    try:
        subject_id = str(manifest["subject_id"])
        condition = DriveCondition(manifest["condition"])
        rates = {Modality(k): float(v) for k, v in manifest["sample_rate_hz"].items()}
        phases = [
            PhaseInterval(PhaseLabel(p["label"]), float(p["start_s"]), float(p["end_s"]))
            for p in manifest["phases"]
        ]
    except (KeyError, ValueError, TypeError) as exc:
        raise ManifestError(f"invalid manifest: {exc}") from exc
    check_phase_intervals(phases)
    return {"subject_id": subject_id, "condition": condition, "sample_rate_hz": rates, "phases": phases}


def ingest_session(paths: Mapping, manifest) -> SessionRecording:
    """Load per-modality CSV tables into a cleaned :class:`SessionRecording`.

    ``paths`` maps modality names to CSV files; ``manifest`` is a dict or a
    path to ``manifest.json``.
    """
    meta = parse_manifest(manifest)
    streams, cleaning = {}, {}
    for mod, path in paths.items():
        mod = Modality(mod)
        if mod not in meta["sample_rate_hz"]:
            raise ManifestError(f"manifest declares no sample rate for {mod.value}")
        df = pd.read_csv(path, float_precision="round_trip")
        t, v, summary = clean_table(df, mod)
        streams[mod] = RawStream(mod, t, v, meta["sample_rate_hz"][mod])
        cleaning[mod.value] = summary
        dropped = sum(summary.values())
        if dropped:
            log.info("%s/%s %s: dropped %s", meta["subject_id"], meta["condition"].value, mod.value, summary)
    return SessionRecording(meta["subject_id"], meta["condition"], streams, meta["phases"], cleaning)


def load_session_dir(path) -> SessionRecording:
    path = Path(path)
    paths = {m: path / f"{m.value}.csv" for m in Modality if (path / f"{m.value}.csv").exists()}
    return ingest_session(paths, path / "manifest.json")


def session_manifest(session: SessionRecording) -> dict:
    return {
        "subject_id": session.subject_id,
        "condition": session.condition.value,
        "sample_rate_hz": {m.value: s.sample_rate_hz for m, s in session.streams.items()},
        "phases": [
            {"label": p.label.value, "start_s": p.start_s, "end_s": p.end_s} for p in session.phase_intervals
        ],
    }


def write_session(session: SessionRecording, path, float_format: str = "%.7g") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for mod, stream in session.streams.items():
        df = pd.DataFrame(stream.values, columns=stream.channel_names)
        df.insert(0, TIMESTAMP_COLUMN, stream.timestamps)
        df.to_csv(path / f"{mod.value}.csv", index=False, float_format=float_format, lineterminator="\n")
    (path / "manifest.json").write_text(json.dumps(session_manifest(session), indent=2) + "\n")
    return path


def session_dirname(subject_id: str, condition) -> str:
    return f"{subject_id}_{DriveCondition(condition).value}"


def load_sessions(root) -> dict[str, dict[DriveCondition, SessionRecording]]:
    """Load every session directory (one containing ``manifest.json``) under ``root``."""
    out: dict[str, dict[DriveCondition, SessionRecording]] = {}
    for manifest in sorted(Path(root).rglob("manifest.json")):
        s = load_session_dir(manifest.parent)
        out.setdefault(s.subject_id, {})[s.condition] = s
    if not out:
        raise EmptyStreamError(f"no sessions found under {root}")
    return out


# ---------------------------------------------------------------- alignment


def align_to_reference(session: SessionRecording, reference=Modality.facial, max_gap_s: float | None = None):
    """Resample every stream onto the reference stream's timestamps.

    Nearest-neighbour lookup; a reference frame whose nearest source sample is
    further than ``max_gap_s`` (default: one reference period) is flagged
    missing.  Returns ``{modality: FeatureSequence}``.
    """
    reference = Modality(reference)
    ref = session.streams.get(reference)
    if ref is None or len(ref) == 0:
        raise EmptyStreamError(f"reference stream {reference.value} is empty")
    t_ref = ref.timestamps
    gap = 1.0 / ref.sample_rate_hz if max_gap_s is None else max_gap_s
    phases = session.phase_codes(t_ref)

    out = {}
    for mod, stream in session.streams.items():
        if mod is reference:
            values, missing = stream.values.copy(), np.zeros(len(t_ref), dtype=bool)
        else:
            idx, dist = nearest_indices(stream.timestamps, t_ref)
            values = stream.values[idx]
            missing = dist > gap * (1 + 1e-9)
        out[mod] = FeatureSequence(
            values, list(stream.channel_names), ref.sample_rate_hz, phases.copy(), t_ref.copy(), missing
        )
    return out


def nearest_indices(src_t: np.ndarray, query_t: np.ndarray):
    right = np.searchsorted(src_t, query_t).clip(0, len(src_t) - 1)
    left = (right - 1).clip(0, len(src_t) - 1)
    d_left = np.abs(query_t - src_t[left])
    d_right = np.abs(src_t[right] - query_t)
    # ties go to the earlier sample
    idx = np.where(d_left <= d_right, left, right)
    return idx, np.minimum(d_left, d_right)
