import numpy as np
import pytest

from costal.core_data import Stack


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_stack(sid="s0", f=3, h=8, w=8, masks=True, t=12.5, split="pool", seed=0):
    r = np.random.default_rng(seed)
    frames = r.normal(size=(f, h, w)).astype(np.float32)
    gt = (r.random((f, h, w)) < 0.2).astype(np.uint8) if masks else None
    return Stack(sid, frames, gt, t if masks else None, split)


@pytest.fixture
def stack_factory():
    return make_stack
