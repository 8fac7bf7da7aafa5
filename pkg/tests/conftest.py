import numpy as np
import pytest

from eegtrm.montage import compact_montage, shipped_montage


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ebdsdd():
    return shipped_montage("ebdsdd_55ch_7x9")


@pytest.fixture(scope="session")
def hgd():
    return shipped_montage("hgd_44ch_7x7")


@pytest.fixture(scope="session")
def toy():
    return shipped_montage("toy_20ch_5x6")


@pytest.fixture(scope="session")
def tiny_montage():
    """3x4 grid with 6 electrodes."""
    return compact_montage(3, 4, 6, name="tiny")


def conv2d_loop_reference(x, weight, bias=None):
    """Six nested loops, no vectorisation."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    out = np.zeros((n, cout, h - kh + 1, w - kw + 1))
    for b in range(n):
        for o in range(cout):
            for i in range(h - kh + 1):
                for j in range(w - kw + 1):
                    acc = 0.0
                    for c in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += x[b, c, i + di, j + dj] * weight[o, c, di, dj]
                    out[b, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out
