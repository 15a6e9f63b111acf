import numpy as np
import pytest
import torch

from foleyflow.config import preset
from foleyflow.syncmod import Conditions

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    return preset("tiny")


def random_conditions(cfg, batch, duration=2.0, seed=0, dtype=torch.float32):
    from foleyflow.syncmod import sync_seq_len
    g = torch.Generator().manual_seed(seed)
    return Conditions(
        visual=torch.randn(batch, cfg.visual_len(duration), cfg.visual_feat_dim, generator=g),
        sync=torch.randn(batch, sync_seq_len(duration), cfg.sync_feat_dim, generator=g),
        text=torch.randn(batch, cfg.text_len, cfg.text_feat_dim, generator=g),
        has_video=torch.ones(batch, dtype=torch.bool),
        has_text=torch.ones(batch, dtype=torch.bool),
    ).to(dtype)


def perturb_all(model, scale=0.05, seed=1):
    """Move every parameter off its initial value (zero-init layers included)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * scale)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        def order(line):
            tag = line.split()[2].rstrip(":")
            return (0, int(tag)) if tag.isdigit() else (1, tag)
        for line in sorted(mod.RESULTS, key=order):
            terminalreporter.write_line(line)
