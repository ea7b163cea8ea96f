import sys
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

GOLDEN = Path(__file__).parent / "golden"
T0 = datetime(2026, 3, 1, 12, 0, 0, tzinfo=timezone.utc)


class StepClock:
    """Returns T0, T0+1s, T0+2s, ... on successive calls."""

    def __init__(self, start=T0, step=timedelta(seconds=1)):
        self.t = start
        self.step = step

    def __call__(self):
        now = self.t
        self.t += self.step
        return now


class ManualClock:
    def __init__(self, t=0.0):
        self.t = t

    def __call__(self):
        return self.t


@pytest.fixture
def golden():
    return GOLDEN
