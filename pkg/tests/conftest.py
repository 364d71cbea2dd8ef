import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from drivestress.data_model import (
    BIO_CHANNELS,
    FACIAL_CHANNELS,
    GAZE_CHANNELS,
    PHASE_ORDER,
    DriveCondition,
    PhaseInterval,
    RawStream,
    SessionRecording,
)
from drivestress.synth import ChannelEffect, SynthConfig, generate

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ORACLES = Path(__file__).parent / "oracles"

# lines collected by the acceptance suite, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def load_oracle(name):
    return json.loads((ORACLES / name).read_text())


def phases(duration=10.0):
    return [PhaseInterval(p, i * duration, (i + 1) * duration) for i, p in enumerate(PHASE_ORDER)]


def make_session(subject="S000", condition="MD", n=100, fs=10.0, rng=None, modalities=("facial", "bio", "gaze"), phase_s=None):
    """Session whose streams all start at t=0 and share one clock."""
    rng = rng or np.random.default_rng(0)
    t = np.arange(n) / fs
    widths = {"facial": len(FACIAL_CHANNELS), "bio": len(BIO_CHANNELS), "gaze": len(GAZE_CHANNELS)}
    streams = {m: RawStream(m, t, rng.standard_normal((n, widths[m])), fs) for m in modalities}
    return SessionRecording(subject, DriveCondition(condition), streams, phases(phase_s or n / fs / 5))


@pytest.fixture(scope="session")
def small_sessions():
    """Six subjects, 18 s phases, strong facial velocity effects."""
    cfg = SynthConfig(
        n_subjects=6,
        phase_durations_s=(18.0,) * 5,
        sample_rate_hz={"facial": 5.0, "bio": 5.0, "gaze": 15.0},
        effects=[ChannelEffect(c, "velocity_boost", 1.0) for c in FACIAL_CHANNELS[:20]],
        seed=7,
    )
    return generate(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
