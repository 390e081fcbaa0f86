import numpy as np
import pytest
import torch

from dfmrestore.media import DegradedTriple, FrameClip, find_encoder


@pytest.fixture(scope="session")
def encoder():
    return find_encoder()


def random_clip(seed: int, n: int = 8, h: int = 16, w: int = 16) -> FrameClip:
    rng = np.random.default_rng(seed)
    return FrameClip(rng.integers(0, 256, (n, h, w, 3), dtype=np.uint8), source_id=f"r{seed}")


def toy_triple(seed: int = 0, n: int = 10, h: int = 16, w: int = 16, scale: int = 2) -> DegradedTriple:
    """Encoder-free triple: z is a box-filtered y, x is z plus noise."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 256, (n, h * scale, w * scale, 3)).astype(np.uint8)
    z = y.reshape(n, h, scale, w, scale, 3).mean(axis=(2, 4)).round().astype(np.uint8)
    x = np.clip(z.astype(int) + rng.integers(-8, 9, z.shape), 0, 255).astype(np.uint8)
    return DegradedTriple(
        y=FrameClip(y, source_id=f"t{seed}"),
        x=FrameClip(x, source_id=f"t{seed}"),
        z=FrameClip(z, source_id=f"t{seed}"),
        scale=scale,
        qp=30,
    )


@pytest.fixture
def triple():
    return toy_triple()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_configure(config):
    config.criteria_lines = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict line; it is echoed now and again in the terminal summary."""
    store = request.config.criteria_lines

    def record(num: int, passed: bool, detail: str) -> bool:
        line = f"criterion {num:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        store[num] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "criteria_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
