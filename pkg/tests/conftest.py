import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from paftta.nn_core import ArchSpec, init_stack, train_source
from paftta.stream import StreamConfig, make_task

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_stream(**kw) -> StreamConfig:
    base = dict(num_domains=3, batches_per_domain=8, batch_size=40, source_per_class=60, holdout_per_class=30)
    base.update(kw)
    return StreamConfig(**base)


@pytest.fixture(scope="session")
def small_task():
    return make_task(small_stream())


@pytest.fixture(scope="session")
def small_source(small_task):
    cfg = small_task.config
    return train_source(small_task.source_x, small_task.source_y, ArchSpec(cfg.dim, cfg.num_classes, (32, 32)),
                        epochs=3, seed=0)


@pytest.fixture
def tiny_stack():
    return init_stack(ArchSpec(5, 4, (6, 7)), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
