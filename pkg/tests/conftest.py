import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from acdistill.denoiser import DenoiserConfig, init_denoiser  # noqa: E402
from acdistill.schedule import make_linear_schedule  # noqa: E402

TINY = DenoiserConfig(target_channels=3, condition_channels=1, base_width=8, depth=1, tile_size=8)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return init_denoiser(TINY, seed=0).eval()


@pytest.fixture
def sched20():
    return make_linear_schedule(20, 1e-3, 0.2)


def rand_batch(b=4, size=8, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(b, 3, size, size, generator=g, dtype=dtype) * 2 - 1
    cond = torch.rand(b, 1, size, size, generator=g, dtype=dtype) * 2 - 1
    return x0, cond


CRITERIA_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
