import numpy as np
import pytest
import torch

from casdm.data import ToyConfig, generate_toy_pairs
from casdm.diffusion import make_schedule


@pytest.fixture(scope="session")
def schedule():
    return make_schedule("linear", 1000)


@pytest.fixture(scope="session")
def small_schedule():
    return make_schedule("linear", 10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_pairs():
    return generate_toy_pairs(ToyConfig(num_train=24, num_test=8), 24, seed=3, prefix="train_")


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


TINY = {
    "denoiser": {"base_width": 8, "num_levels": 2, "time_embed_dim": 16, "spade_hidden": 4},
    "training": {"batch_size": 4, "steps": 6, "checkpoint_every": 3, "learning_rate": 1e-3},
    "mapgen": {"embed_dim": 8},
    "sampling": {"num_inference_steps": 3, "batch_size": 8},
    "eval": {"seeds": [0, 1], "segmenter": {"width": 8, "steps": 5, "batch_size": 4}},
}


@pytest.fixture
def tiny_cfg():
    from casdm.config import load_config, merge_overrides

    def make(**sections):
        return load_config(overrides=merge_overrides(TINY, sections))

    return make


VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and assert on it."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} | {detail}"
        VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
