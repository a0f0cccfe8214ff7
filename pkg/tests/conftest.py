import numpy as np
import pytest

from dnnfm.nn import NetworkSpec, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def random_params(rng, d=3, widths=(5, 4)):
    spec = NetworkSpec(d, len(widths), widths)
    p = init_params(spec, int(rng.integers(2**31)))
    # non-zero biases so kinks are not all at the origin
    return p.map(lambda a: a + 0.1 * rng.standard_normal(a.shape))


def random_spd(rng, J, k=None):
    k = J if k is None else k
    A = rng.standard_normal((J, k))
    return A @ A.T / k + np.diag(rng.uniform(0.2, 1.0, J))


def random_psd(rng, J, rank):
    B = rng.standard_normal((J, rank))
    return B @ B.T


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
