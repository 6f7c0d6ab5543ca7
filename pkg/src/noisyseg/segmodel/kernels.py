"""Hot loops: 3x3 'same' convolution (forward and both gradients) and 8-connected
component labelling.

Each kernel has a numba implementation and a numpy one. The public functions
dispatch on ``noisyseg._accel.BACKEND``; the ``*_numba`` / ``*_numpy`` variants
stay importable so the two paths can be compared directly.

Layouts: activations are (N, C, H, W); padded inputs are (N, C, H+2, W+2);
weights are (Cout, Cin, 3, 3).
"""

from __future__ import annotations

import numpy as np

from .. import _accel
from .._accel import njit


def pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


# -- numba ---------------------------------------------------------------

@njit
def _conv_forward_nb(xp, w, b, out):
    n_batch, c_in, hp, wp = xp.shape
    c_out = w.shape[0]
    h = hp - 2
    width = wp - 2
    acc = np.empty(width, dtype=out.dtype)
    for n in range(n_batch):
        for y in range(h):
            for co in range(c_out):
                for x in range(width):
                    acc[x] = b[co]
                for ci in range(c_in):
                    for ky in range(3):
                        row = xp[n, ci, y + ky]
                        w0 = w[co, ci, ky, 0]
                        w1 = w[co, ci, ky, 1]
                        w2 = w[co, ci, ky, 2]
                        for x in range(width):
                            acc[x] += w0 * row[x] + w1 * row[x + 1] + w2 * row[x + 2]
                for x in range(width):
                    out[n, co, y, x] = acc[x]


@njit
def _conv_grad_weight_nb(xp, g, dw):
    # per-row partials in the working dtype, accumulated into float64 dw
    n_batch, c_in, hp, wp = xp.shape
    c_out = g.shape[1]
    h = hp - 2
    width = wp - 2
    zero = xp.dtype.type(0)
    for n in range(n_batch):
        for y in range(h):
            for co in range(c_out):
                grow = g[n, co, y]
                for ci in range(c_in):
                    for ky in range(3):
                        row = xp[n, ci, y + ky]
                        s0 = zero
                        s1 = zero
                        s2 = zero
                        for x in range(width):
                            gv = grow[x]
                            s0 += gv * row[x]
                            s1 += gv * row[x + 1]
                            s2 += gv * row[x + 2]
                        dw[co, ci, ky, 0] += s0
                        dw[co, ci, ky, 1] += s1
                        dw[co, ci, ky, 2] += s2


@njit
def _label8_nb(mask):
    h, w = mask.shape
    parent = np.arange(h * w)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            me = y * w + x
            for dy, dx in ((-1, -1), (-1, 0), (-1, 1), (0, -1)):
                yy = y + dy
                xx = x + dx
                if yy < 0 or xx < 0 or xx >= w or not mask[yy, xx]:
                    continue
                a = me
                while parent[a] != a:
                    a = parent[a]
                b = yy * w + xx
                while parent[b] != b:
                    b = parent[b]
                if a != b:
                    if a < b:
                        parent[b] = a
                    else:
                        parent[a] = b
    labels = np.zeros((h, w), dtype=np.int32)
    ids = np.zeros(h * w, dtype=np.int32)
    count = 0
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            r = y * w + x
            while parent[r] != r:
                r = parent[r]
            if ids[r] == 0:
                count += 1
                ids[r] = count
            labels[y, x] = ids[r]
    return labels, count


# -- numpy ---------------------------------------------------------------

def _columns(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """(N, Cin*9, H*W) patch matrix; column order matches w.reshape(Cout, -1)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, 3, 3, h, w), dtype=xp.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + h, kx:kx + w]
    return cols.reshape(n, c * 9, h * w)


def conv_forward_numpy(xp, w, b):
    n, _, hp, wp = xp.shape
    h, width = hp - 2, wp - 2
    out = np.matmul(w.reshape(w.shape[0], -1), _columns(xp, h, width))
    out += b.reshape(1, -1, 1)
    return out.reshape(n, w.shape[0], h, width)


def conv_grad_weight_numpy(xp, g):
    n, c_out, h, width = g.shape
    cols = _columns(xp, h, width).astype(np.float64)
    gm = g.reshape(n, c_out, h * width).astype(np.float64)
    dw = np.einsum("nok,nck->oc", gm, cols)
    return dw.reshape(c_out, xp.shape[1], 3, 3)


def label8_numpy(mask):
    from scipy import ndimage

    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    return labels.astype(np.int32), int(count)


def conv_forward_numba(xp, w, b):
    n, _, hp, wp = xp.shape
    out = np.empty((n, w.shape[0], hp - 2, wp - 2), dtype=xp.dtype)
    _conv_forward_nb(np.ascontiguousarray(xp), np.ascontiguousarray(w, dtype=xp.dtype),
                     np.ascontiguousarray(b, dtype=xp.dtype), out)
    return out


def conv_grad_weight_numba(xp, g):
    dw = np.zeros((g.shape[1], xp.shape[1], 3, 3), dtype=np.float64)
    _conv_grad_weight_nb(np.ascontiguousarray(xp), np.ascontiguousarray(g, dtype=xp.dtype), dw)
    return dw


def label8_numba(mask):
    labels, count = _label8_nb(np.ascontiguousarray(mask, dtype=np.bool_))
    return labels, int(count)


# -- dispatch -------------------------------------------------------------

def conv_forward(xp, w, b):
    """'Same' 3x3 convolution (cross-correlation) of a pre-padded batch."""
    if _accel.use_numba():
        return conv_forward_numba(xp, w, b)
    return conv_forward_numpy(xp, w, b)


def conv_grad_weight(xp, g):
    """dL/dW in float64 given the padded input and the output gradient."""
    if _accel.use_numba():
        return conv_grad_weight_numba(xp, g)
    return conv_grad_weight_numpy(xp, g)


def conv_grad_input(w, g):
    """dL/dx (unpadded) as a correlation of the padded output gradient with the
    spatially flipped, channel-transposed kernel."""
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), dtype=g.dtype)
    return conv_forward(pad1(g), w_t, np.zeros(w.shape[1], dtype=g.dtype))


def label8(mask):
    """8-connected labels numbered 1..n in raster order of first pixel."""
    if _accel.use_numba():
        return label8_numba(mask)
    return label8_numpy(mask)
