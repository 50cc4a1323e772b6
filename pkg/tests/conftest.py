import numpy as np
import pytest

from memecap.synthetic import generate_synthetic_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """16-record synthetic corpus shared by read-only tests."""
    root = tmp_path_factory.mktemp("corpus16")
    manifest, records = generate_synthetic_corpus(root, size=16, seed=7)
    return root, manifest, records


def relative_grad_error(analytic: dict, numeric: dict, zero_floor: float = 1e-8) -> float:
    """Tensor-level relative error: worst over tensors of
    max|a - n| / max(max|a|, max|n|, tiny). Tensors whose analytic and
    numeric gradients are both below zero_floor carry only finite-difference
    noise (the true gradient is zero) and score 0."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        err = float(np.abs(a - n).max())
        scale = max(float(np.abs(a).max()), float(np.abs(n).max()))
        if scale <= zero_floor:
            continue
        worst = max(worst, err / max(scale, 1e-12))
    return worst
