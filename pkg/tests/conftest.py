import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tempodistill.corpus import ClassSpec, CorpusConfig, generate

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


def tiny_corpus_config(seed=0, **kw):
    """Four classes (two static, two moving) on 8x8 frames, 4 videos per class per split."""
    classes = [
        ClassSpec(0, "circle", "none", 0.0),
        ClassSpec(1, "square", "none", 0.0),
        ClassSpec(2, "dot", "left", 2.0),
        ClassSpec(3, "dot", "right", 2.0),
    ]
    base = dict(classes=classes, per_class_train=4, per_class_test=4, per_class_reward=4,
                T=8, H=8, W=8, C=1, seed=seed)
    base.update(kw)
    return CorpusConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate(tiny_corpus_config())


@pytest.fixture(scope="session")
def default_corpus():
    return generate(CorpusConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from .acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
