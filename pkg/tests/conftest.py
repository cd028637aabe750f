import numpy as np
import pytest

from hasn.model import ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(dim=8, num_blocks=2, dw_kernel=3, esa_channels=4)


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=3)


def random_params(cfg, seed, dtype=np.float64, scale=0.3):
    """Random (not He-scaled) parameters that keep activations in a sane range."""
    r = np.random.default_rng(seed)
    params = init_params(cfg, seed, dtype)
    return {k: (r.standard_normal(v.shape) * scale).astype(dtype) for k, v in params.items()}


# ---- acceptance reporting --------------------------------------------------

ACCEPTANCE_LINES: list = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the summary."""

    def record(number: int, passed: bool, detail: str, skipped: bool = False):
        status = "SKIP" if skipped else ("PASS" if passed else "FAIL")
        ACCEPTANCE_LINES.append((number, f"criterion {number:>2} {status}: {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
