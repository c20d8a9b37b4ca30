import importlib.util
from pathlib import Path

import numpy as np
import pytest

from radcamfuse import kernels

pytestmark = pytest.mark.skipif(kernels.numba_impl is None, reason="numba not installed")

_spec = importlib.util.spec_from_file_location("bench_kernels", Path(__file__).parents[1] / "benchmarks" /
                                               "bench_kernels.py")
bench = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(bench)


@pytest.mark.parametrize("name", list(bench.workloads(np.random.default_rng(0))))
def test_numba_matches_numpy(name):
    args = bench.workloads(np.random.default_rng(1))[name]
    a = getattr(kernels.numpy_impl, name)(*args)
    b = getattr(kernels.numba_impl, name)(*args)
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    for x, y in zip(a, b):
        np.testing.assert_allclose(np.asarray(x), np.asarray(y), rtol=1e-10, atol=1e-10)


def test_fallback_switch_is_read_at_import():
    assert kernels.USE_NUMBA == (kernels._impl is kernels.numba_impl)
