import datetime as dt
import warnings
from pathlib import Path

import pytest

from busdensity.data import SplitConfig, chronological_split, mad_filter
from busdensity.synth import SynthConfig, generate

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"


def small_config(**kw) -> SynthConfig:
    """Eight routes over four weeks: enough for every estimator, fast to fit."""
    base = SynthConfig.from_dict({"n_routes": 8, "n_weeks": 4, "record_prob": 0.3})
    return base if not kw else SynthConfig(**{**base.__dict__, **kw})


@pytest.fixture(scope="session")
def small_trips():
    return generate(small_config(), 11)


@pytest.fixture(scope="session")
def small_split(small_trips):
    kept = mad_filter(small_trips).kept
    # weeks 35-36 train, week 37 gap, week 38 test
    return chronological_split(kept, SplitConfig(train_end=dt.date(2017, 9, 8)))


@pytest.fixture(autouse=True)
def _quiet_sklearn():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*OOB.*")
        yield


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
