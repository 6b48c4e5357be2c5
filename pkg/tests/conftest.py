import numpy as np
import pytest
from hypothesis import settings

from avcanvas.model import DiT, ModelConfig

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture
def tiny_config():
    # 2 blocks, 4 heads of dim 6: the smallest width the rotary layout allows
    return ModelConfig(depth=2, width=24, heads=4, patch=(1, 2, 2), audio_features=4, ff_mult=2)


@pytest.fixture
def tiny_model(tiny_config):
    return DiT.init(tiny_config, seed=3, zero_init=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
