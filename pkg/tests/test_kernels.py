import numpy as np
import pytest

from neurofuscate.kernels import BACKEND, compiled_backend, numpy_backend


def cases():
    rng = np.random.default_rng(0)
    for f, c, k, h, stride, pad in [
        (8, 1, 3, 16, 1, 1),
        (8, 8, 3, 16, 1, 1),
        (4, 2, 5, 11, 2, 2),
        (3, 3, 1, 7, 1, 0),
        (6, 4, 3, 9, 3, 1),
    ]:
        x = rng.standard_normal((c, h, h)).astype(np.float32)
        w = rng.normal(0, 0.3, (f, c, k, k)).astype(np.float32)
        b = rng.normal(0, 0.1, f).astype(np.float32)
        yield x, w, b, stride, pad


def test_numpy_backend_matches_loop_reference():
    for x, w, b, stride, pad in cases():
        got = numpy_backend.conv2d_forward(x, w, b, stride, pad).astype(np.float64)
        want = _loop_conv(x, w, b, stride, pad)
        assert np.max(np.abs(got - want)) <= 1e-6


@pytest.mark.skipif(compiled_backend is None, reason="compiled kernel not built")
def test_compiled_backend_matches_numpy_backend():
    for x, w, b, stride, pad in cases():
        a = compiled_backend.conv2d_forward(x, w, b, stride, pad)
        c = numpy_backend.conv2d_forward(x, w, b, stride, pad)
        assert a.shape == c.shape
        assert np.max(np.abs(a.astype(np.float64) - c.astype(np.float64))) <= 1e-6


def test_backend_selection_is_reported():
    assert BACKEND in ("compiled", "numpy")


def _loop_conv(x, w, b, stride, pad):
    f, c, kh, kw = w.shape
    _, h, ww = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((f, oh, ow))
    for fi in range(f):
        for i in range(oh):
            for j in range(ow):
                acc = float(b[fi])
                for ci in range(c):
                    for u in range(kh):
                        ih = i * stride - pad + u
                        if not 0 <= ih < h:
                            continue
                        for v in range(kw):
                            iw = j * stride - pad + v
                            if not 0 <= iw < ww:
                                continue
                            acc += float(x[ci, ih, iw]) * float(w[fi, ci, u, v])
                out[fi, i, j] = acc
    return out
