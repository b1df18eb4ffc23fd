import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from visft import backbone as bb
from visft.core import ViTConfig, make_rng_stream

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def tiny_vit():
    return ViTConfig(layers=1, hidden_size=8, patch_size=8, mlp_size=16, num_heads=2, image_size=16)


@pytest.fixture
def small_vit():
    return ViTConfig(layers=2, hidden_size=16, patch_size=8, mlp_size=32, num_heads=2, image_size=32)


@pytest.fixture
def tiny_backbone(tiny_vit):
    return bb.build_backbone(tiny_vit, make_rng_stream(0, "backbone")).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
