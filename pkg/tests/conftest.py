import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from specflow import synth
from specflow.model import FlowModel, ModelConfig

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset():
    cfg = synth.GeneratorConfig(n_train=400, n_val=100)
    return synth.build_dataset(cfg, seed=11)


@pytest.fixture(scope="session")
def small_basis(small_dataset):
    from specflow import manifold

    return manifold.fit([s.future for s in small_dataset.train], 6)


def random_model(cfg: ModelConfig, seed: int = 0, out_scale: float = 0.3) -> FlowModel:
    """Model with a non-zero output layer so Jacobians and gradients are non-trivial."""
    m = FlowModel.initialize(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    m.params["head.w_out"] = rng.normal(0.0, out_scale / np.sqrt(cfg.hidden), size=m.params["head.w_out"].shape)
    m.params["head.b_out"] = rng.normal(0.0, 0.1, size=cfg.k)
    return m


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
