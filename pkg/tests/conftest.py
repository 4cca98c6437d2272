import numpy as np
import pytest
import torch

from radfm.vit import build_encoder

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_encoder():
    torch.manual_seed(0)
    return build_encoder("tiny")


def rel_err(a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    return ((a - b).norm() / b.norm().clamp_min(1e-12)).item()


def finite_difference(fn, param, eps=1e-6, n_coords=None, generator=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``param`` (float64)."""
    flat = param.data.view(-1)
    idx = range(flat.numel())
    if n_coords is not None and n_coords < flat.numel():
        g = generator or torch.Generator().manual_seed(0)
        idx = torch.randperm(flat.numel(), generator=g)[:n_coords].tolist()
    idx = list(idx)
    out = torch.zeros(len(idx), dtype=torch.float64)
    for k, i in enumerate(idx):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        out[k] = (up - down) / (2 * eps)
    return idx, out
