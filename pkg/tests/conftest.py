import dataclasses

import pytest
import torch

from lgtd.common import randomize_
from lgtd.model import ModelConfig

# N=2, C=16, two LSABs, r=4
MICRO = ModelConfig(channels=16, lsab_blocks=2)

# N=1, C=4, r=2, runs on 8x8 inputs; small enough for finite differences
TINY = ModelConfig(n=1, channels=4, scale=2, extract_blocks=1, lsab_blocks=1, msa_heads=2, window_size=4,
                   ca_reduction=2)


@pytest.fixture
def micro_cfg():
    return dataclasses.replace(MICRO)


@pytest.fixture
def tiny_cfg():
    return dataclasses.replace(TINY)


def f64(module, seed=None, std=0.2):
    """Cast to float64 and optionally overwrite every parameter with seeded noise."""
    module = module.double()
    if seed is not None:
        randomize_(module, seed, std)
    return module


def rand(*shape, seed=0, dtype=torch.float64, requires_grad=False):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(*shape, generator=g, dtype=dtype)
    return x.requires_grad_(requires_grad)


def randn(*shape, seed=0, dtype=torch.float64, requires_grad=False):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(*shape, generator=g, dtype=dtype)
    return x.requires_grad_(requires_grad)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
