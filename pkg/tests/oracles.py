"""Independent nested-loop reference implementations used by the tests.

Everything here is deliberately written with plain Python loops and float
arithmetic so it shares no code path with the library under test.
"""

from itertools import product
from math import prod

import numpy as np


def loop_contract(u, w, r):
    """Reference for contract(): six-plus nested loops over all index tuples.

    Input axis (rank_u - 1 - t) pairs with weight axis t.
    """
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    nu = u.ndim - r
    out_shape = u.shape[:nu] + w.shape[r:]
    out = np.zeros(out_shape, dtype=np.float64)
    for a_idx in product(*(range(e) for e in u.shape[:nu])):
        for p_idx in product(*(range(e) for e in w.shape[r:])):
            acc = 0.0
            for c_idx in product(*(range(e) for e in w.shape[:r])):
                # u's trailing axes hold the contracted index reversed
                u_idx = a_idx + tuple(reversed(c_idx))
                acc += float(u[u_idx]) * float(w[c_idx + p_idx])
            out[a_idx + p_idx] = acc
    return out


def loop_sum(tensors):
    """Reference for linear_combine(): scalar accumulation per entry."""
    first = np.asarray(tensors[0])
    out = np.zeros(first.shape, dtype=np.float64)
    for idx in product(*(range(e) for e in first.shape)):
        acc = 0.0
        for t in tensors:
            acc += float(np.asarray(t)[idx])
        out[idx] = acc
    return out


def loop_elementwise(fn, a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    out = np.zeros(a.shape, dtype=np.float64)
    for idx in product(*(range(e) for e in a.shape)):
        out[idx] = fn(float(a[idx]), float(b[idx]))
    return out


def loop_tensor_conv(x, weight, r, stride, pad, out_cell):
    """Reference tensor convolution: explicit windows, loop_contract per cell.

    x:      [N, m, H, W, *cell_in]
    weight: [oc, m, k, k, *w_cell]
    Output cell (oy, ox) = sum over (ic, ky, kx) of the contraction of the
    input cell at (oy*stride - pad + ky, ox*stride - pad + kx) with the
    matching weight cell; out-of-image cells count as zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    n, m, h, w = x.shape[:4]
    oc, _, k, _ = weight.shape[:4]
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, oc, oh, ow) + tuple(out_cell), dtype=np.float64)
    for ni, oci, oy, ox in product(range(n), range(oc), range(oh), range(ow)):
        acc = np.zeros(tuple(out_cell), dtype=np.float64)
        for ic, ky, kx in product(range(m), range(k), range(k)):
            iy = oy * stride - pad + ky
            ix = ox * stride - pad + kx
            if iy < 0 or ix < 0 or iy >= h or ix >= w:
                continue
            acc = acc + loop_contract(x[ni, ic, iy, ix], weight[oci, ic, ky, kx], r)
        out[ni, oci, oy, ox] = acc
    return out


def loop_scalar_conv(x, weight, bias, stride, pad):
    """Reference scalar conv2d: five nested loops."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    n, m, h, w = x.shape
    oc, _, k, _ = weight.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for ni, oci, oy, ox in product(range(n), range(oc), range(oh), range(ow)):
        acc = float(bias[oci])
        for ic, ky, kx in product(range(m), range(k), range(k)):
            iy = oy * stride - pad + ky
            ix = ox * stride - pad + kx
            if iy < 0 or ix < 0 or iy >= h or ix >= w:
                continue
            acc += float(x[ni, ic, iy, ix]) * float(weight[oci, ic, ky, kx])
        out[ni, oci, oy, ox] = acc
    return out


def central_difference(f, params, name, index, step=1e-5):
    """Central finite difference of scalar f() w.r.t. params[name].flat[index]."""
    arr = params[name]
    old = arr.flat[index]
    arr.flat[index] = old + step
    plus = f()
    arr.flat[index] = old - step
    minus = f()
    arr.flat[index] = old
    return (plus - minus) / (2.0 * step)


def random_tensor(rng, shape, dtype=np.float64):
    return rng.standard_normal(prod(shape)).reshape(shape).astype(dtype)
