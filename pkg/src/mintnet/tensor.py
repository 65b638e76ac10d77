"""Dense rank-4 float64 tensors and the numerical kernels built on them.

A ``Tensor4`` is a C-contiguous ``numpy.ndarray`` of dtype float64 with shape
``(n, c, h, w)``. Flattening a single example always means channel-major,
then raster order: ``index = c*H*W + y*W + x``. Every module relies on this
one convention; it is the ordering under which masked convolutions are
triangular.

Convolutions are cross-correlations with zero padding ``r // 2`` so the
spatial shape is preserved.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

Tensor4 = np.ndarray
ConvWeight = np.ndarray


def as_tensor4(x, name="x"):
    """Return ``x`` as a contiguous float64 rank-4 array, validating its shape."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {arr.shape}")
    return arr


def check_conv_weight(w, name="w"):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (c_out, c_in, r, r), got shape {w.shape}")
    c_out, c_in, r, r2 = w.shape
    if r != r2:
        raise ShapeError(f"{name} kernel must be square, got {r}x{r2}")
    if r % 2 == 0:
        raise ShapeError(f"{name} kernel size must be odd, got {r}")
    if c_out < 1 or c_in < 1:
        raise ShapeError(f"{name} needs at least one input and output channel, got {w.shape}")
    return w


def _im2col(x, r):
    """Patch matrix of shape (c*r*r, n*h*w) for a same-padded r x r kernel."""
    n, c, h, w = x.shape
    p = r // 2
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    xp[:, :, p:p + h, p:p + w] = x
    cols = sliding_window_view(xp, (r, r), axis=(2, 3))  # (n, c, h, w, r, r)
    return cols.transpose(1, 4, 5, 0, 2, 3).reshape(c * r * r, n * h * w)


def conv2d(x, w, bias=None, pad=None):
    """Same-shape 2D cross-correlation of ``x`` (n, c_in, h, w) with ``w`` (c_out, c_in, r, r)."""
    x = as_tensor4(x)
    w = check_conv_weight(w)
    c_out, c_in, r, _ = w.shape
    if pad is not None and pad != r // 2:
        raise ShapeError(f"only same padding is supported: pad must be {r // 2} for r={r}, got {pad}")
    if x.shape[1] != c_in:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {x.shape} vs weight shape {w.shape}"
        )
    n, _, h, wpx = x.shape
    out = w.reshape(c_out, -1) @ _im2col(x, r)
    out = np.ascontiguousarray(out.reshape(c_out, n, h, wpx).transpose(1, 0, 2, 3))
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} does not match c_out={c_out}")
        out += bias[None, :, None, None]
    return out


def conv2d_grad_input(g, w):
    """Vector-Jacobian product of :func:`conv2d` with respect to its input."""
    w = check_conv_weight(w)
    # correlation with the spatially flipped, channel-transposed kernel
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d(g, wt)


def conv2d_grad_weight(x, g, r):
    """Vector-Jacobian product of :func:`conv2d` with respect to its weight."""
    x = as_tensor4(x)
    g = as_tensor4(g, "g")
    c_in, c_out = x.shape[1], g.shape[1]
    gm = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
    return (gm @ _im2col(x, r).T).reshape(c_out, c_in, r, r)


def dense_conv_operator(w, h, wpx):
    """Assemble the (c_out*h*w) x (c_in*h*w) matrix of a same-padded convolution.

    Built entry by entry from the weights with explicit loops, independent of
    :func:`conv2d`, so it can serve as an oracle for it.
    """
    w = check_conv_weight(w)
    c_out, c_in, r, _ = w.shape
    p = r // 2
    mat = np.zeros((c_out * h * wpx, c_in * h * wpx))
    for o in range(c_out):
        for y in range(h):
            for x in range(wpx):
                row = o * h * wpx + y * wpx + x
                for c in range(c_in):
                    for m in range(r):
                        yy = y + m - p
                        if yy < 0 or yy >= h:
                            continue
                        for n in range(r):
                            xx = x + n - p
                            if xx < 0 or xx >= wpx:
                                continue
                            mat[row, c * h * wpx + yy * wpx + xx] += w[o, c, m, n]
    return mat


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def elementwise(x, f):
    return np.ascontiguousarray(f(np.asarray(x, dtype=np.float64)))


def add(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    return a + b


def mul(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    return a * b


def scale(x, s):
    return np.asarray(x, dtype=np.float64) * float(s)


def reduce_sum(x, axes=None):
    return np.sum(np.asarray(x, dtype=np.float64), axis=axes)


def flatten_example(x):
    """Flatten a single example (c, h, w) or (1, c, h, w) in channel-major raster order."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ShapeError(f"expected a single example, got batch of {x.shape[0]}")
        x = x[0]
    return x.reshape(-1)


def normalized_l2(a, b):
    """Per-example ``||a - b||^2 / D`` for batches shaped (n, ...)."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d.reshape(d.shape[0], -1)
    return np.mean(d * d, axis=1)
