import numpy as np
import pytest
import torch

from crfgan.trainer import TrainConfig

# small but valid geometry: 32^3 volumes, 8^3 embedding, slabs of 2
TINY = dict(
    resolution=32,
    embed_channels=8,
    latent_dim=16,
    g1_base_channels=16,
    g2_channels=(8, 4),
    d_channels=(4, 8, 8, 8),
    crf_max_patches=64,
    log_every=0,
    checkpoint_every=0,
)


@pytest.fixture
def tiny_config():
    return TrainConfig(**TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        _acceptance[name] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    from test_acceptance import DETAILS, LABELS

    terminalreporter.section("acceptance")
    for name, (num, text) in LABELS.items():
        if name in _acceptance:
            detail = DETAILS.get(name, "")
            terminalreporter.write_line(f"[{num:>2}] {_acceptance[name]:4}  {text}" + (f": {detail}" if detail else ""))
