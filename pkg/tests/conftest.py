from __future__ import annotations

import numpy as np
import pytest

from decaps.config import ModelConfig
from decaps.dataio import synth_generate
from decaps.tensor import Tensor


def numeric_grad(fn, arrays, k, eps=1e-6):
    """Central differences of scalar fn(*arrays) w.r.t. arrays[k]."""
    x = arrays[k]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = fn(*arrays)
        x[i] = old - eps
        lo = fn(*arrays)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(op, arrays, seed=0, eps=1e-6, wrt=None):
    """Largest relative error between backprop and central differences.

    The scalar objective is sum(op(*inputs) * R) for a fixed random R, so every
    output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    probe = op(*[Tensor(a) for a in arrays]).data
    weights = np.random.default_rng([seed, 7919]).normal(size=probe.shape)

    def scalar(*xs):
        return float((op(*[Tensor(x) for x in xs]).data * weights).sum())

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    (out * weights).sum().backward()
    worst = 0.0
    for k in wrt:
        num = numeric_grad(scalar, arrays, k, eps)
        ana = ts[k].grad if ts[k].grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, rel_error(ana, num))
    return worst


def tiny_config(**kw) -> ModelConfig:
    """Smallest complete network: 24 px input, one residual stage, 6x6 primary grid."""
    base = dict(input_size=24, backbone_blocks=1, backbone_out_channels=8, projection_channels=8,
                primary_heads=2, conv1_heads=2, conv2_heads=2, pose_dim=4, classes=2,
                batch_size=4, seed=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A few synthetic images per class for plumbing tests."""
    root = tmp_path_factory.mktemp("synth_small")
    return synth_generate(root, n_train=20, n_test=8, size=96, seed=5)


# acceptance verdicts, echoed once more in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(n: int, title: str, ok: bool, detail: str) -> bool:
    line = f"acceptance {n}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
