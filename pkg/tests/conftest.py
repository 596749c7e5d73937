import numpy as np
import pytest

from ondevice_stt.dataset import Sample
from ondevice_stt.model import ModelConfig, init_model

# Acceptance outcomes, printed in the terminal summary.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")


TINY = ModelConfig(
    input_dim=6,
    conv_channels=(2, 3),
    conv_kernels=((3, 3), (3, 1)),
    num_blstm_layers=2,
    blstm_units=4,
    fc_units=5,
    alphabet_size=4,
)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_params():
    """Float64 tiny model with small random biases so every path carries signal."""
    params = init_model(TINY, seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    for name in params:
        if name.endswith("bias"):
            params.tensors[name] = rng.normal(scale=0.1, size=params[name].shape)
    return params


def random_sample(rng, T, input_dim, label, sid="s"):
    feats = rng.normal(size=(T, input_dim))
    return Sample(sid, feats, "", label=np.asarray(label, dtype=np.int64))


@pytest.fixture
def make_sample():
    return random_sample
