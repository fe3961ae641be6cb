import numpy as np
import pytest
import torch

from _support import randomize
from jointflow.model import JointModel, ModelConfig, build_base

torch.set_num_threads(1)

TINY = dict(image_size=8, patch=2, d_model=16, heads=2, mm_blocks=1, p_blocks=1, num_classes=6)


def tiny_cfg(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


@pytest.fixture
def tiny_base():
    base = build_base(tiny_cfg(), torch.Generator().manual_seed(0))
    randomize(base, 1)
    return base


@pytest.fixture
def tiny_joint(tiny_base):
    return JointModel(tiny_base, torch.Generator().manual_seed(2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from _support import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
