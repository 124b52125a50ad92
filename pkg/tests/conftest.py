import numpy as np
import pytest
import torch

from diffseg.backbone import build_toy_backbone
from diffseg.schedule import build_schedule

torch.set_num_threads(1)

# criterion number -> (passed, description); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")


@pytest.fixture(scope="session")
def schedule():
    return build_schedule()


@pytest.fixture(scope="session")
def small_backbone():
    # 64-pixel patches keep UNet passes cheap; structure matches the default toy stack
    return build_toy_backbone(0, patch_size=64)


@pytest.fixture(scope="session")
def backbone256():
    return build_toy_backbone(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h, w=None):
    w = h if w is None else w
    return rng.random((h, w, 3), dtype=np.float32)
