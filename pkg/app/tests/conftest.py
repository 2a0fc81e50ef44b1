import os

import hypothesis
import numpy as np
import pytest

from app.models.model import SynthConfig
from app.services import synth
from app.services.event_service import init_event_service, reset_event_service

# generated cases reuse the autouse event-service fixture
_SHARED = {"deadline": None, "suppress_health_check": [hypothesis.HealthCheck.function_scoped_fixture]}
hypothesis.settings.register_profile("fast", max_examples=10, **_SHARED)
hypothesis.settings.register_profile("thorough", max_examples=200, **_SHARED)
hypothesis.settings.register_profile("ci", max_examples=1000, **_SHARED)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture(autouse=True)
def event_service(tmp_path):
    service = init_event_service("test", tmp_path / "run")
    yield service
    reset_event_service()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """Two trials, four classes, well separated; enough rows for quick clustering and training."""
    config = SynthConfig(trials=2, classes=4, signatures_per_class=60, critical_classes=(2,), seed=7)
    return synth.generate(config)
