import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_model():
    """The 500-step toy model: trained once per session and shared."""
    from aotvos.engine import EngineConfig
    from aotvos.train import TrainConfig, make_clips, train_toy

    ecfg = EngineConfig.preset("aot-s", channels=32, heads=2, window=7, identities=10)
    tcfg = TrainConfig()
    params, report = train_toy(tcfg, ecfg)
    held = make_clips(tcfg, ecfg, held_out=True)
    return {"ecfg": ecfg, "tcfg": tcfg, "params": params, "report": report, "held": held}


# Outcome lines for the acceptance criteria, printed after the run.
CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
