import numpy as np
import pytest

from stacklab import kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Trigger jit compilation once so individual tests measure steady-state."""
    x = np.random.default_rng(0).normal(size=(4, 8))
    g = np.ones(8)
    out, ir = kernels.rmsnorm_fwd(x, g, 1e-6)
    kernels.rmsnorm_bwd(x, g, ir, out)
    kernels.swiglu_bwd(x, x, kernels.swiglu_fwd(x, x))
    p = kernels.softmax_fwd(x)
    kernels.softmax_bwd(p, x)
    t = np.arange(4, dtype=np.int64)
    _, pr = kernels.cross_entropy_fwd(x, t)
    kernels.cross_entropy_bwd(pr, t, 0.25)
    kernels.rope_rotate(x, np.ones((4, 4)), np.zeros((4, 4)))
    buf = [np.zeros(8) for _ in range(4)]
    kernels.adamw_update(buf[0], buf[1], buf[2], buf[3], 1e-3, 0.9, 0.95, 1e-8, 0.1, 0.1, 0.05)
    kernels.sq_sum(x.ravel())
    ids = np.array([1, 2, 1, 2], dtype=np.int32)
    kernels.merge_pair(ids, 1, 2, 300)
    kernels.encode_merges(ids, np.array([1], dtype=np.int32),
                          np.array([2], dtype=np.int32), np.array([300], dtype=np.int32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
