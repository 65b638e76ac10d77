"""Binary masks that make convolutions triangular under channel-major raster order."""

from enum import Enum
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ShapeError

# dense operators above this size are refused by the oracle
MAX_ORACLE_DIM = 4096


class Orientation(str, Enum):
    LOWER = "lower"
    UPPER = "upper"


def _orientation(o):
    return Orientation(o.value if isinstance(o, Orientation) else o)


@lru_cache(maxsize=None)
def _base_mask_cached(c, r, o):
    p = r // 2
    i = np.arange(c)[:, None, None, None]
    j = np.arange(c)[None, :, None, None]
    m = np.arange(r)[None, None, :, None]
    n = np.arange(r)[None, None, None, :]
    if o is Orientation.LOWER:
        zero = (i < j) | ((i == j) & (m > p)) | ((i == j) & (m == p) & (n > p))
    else:
        zero = (i > j) | ((i == j) & (m < p)) | ((i == j) & (m == p) & (n < p))
    mask = np.where(zero, 0.0, 1.0)
    mask.setflags(write=False)
    return mask


def base_mask(c, r, o=Orientation.LOWER):
    """Mask of shape (c, c, r, r) whose masked convolution is lower/upper triangular.

    Lower: entry (i, j, m, n) is zero iff ``i < j``, or ``i == j`` and the
    kernel offset (m, n) lies after the center in raster order. Upper is the
    point reflection of lower.
    """
    if r % 2 == 0 or r < 1:
        raise ShapeError(f"kernel size must be odd, got {r}")
    if c < 1:
        raise ShapeError(f"need at least one channel, got {c}")
    return _base_mask_cached(int(c), int(r), _orientation(o))


@lru_cache(maxsize=None)
def _grouped_cached(c, g_out, g_in, r, o):
    mask = np.tile(base_mask(c, r, o), (g_out, g_in, 1, 1))
    mask.setflags(write=False)
    return mask


def grouped_mask(c, g_out, g_in, r, o=Orientation.LOWER):
    """``g_out`` x ``g_in`` block replication of :func:`base_mask`.

    Entry (a*c + i, b*c + j, m, n) equals ``base_mask(c, r, o)[i, j, m, n]``.
    """
    if g_out < 1 or g_in < 1:
        raise ShapeError(f"group counts must be positive, got g_out={g_out}, g_in={g_in}")
    return _grouped_cached(int(c), int(g_out), int(g_in), int(r), _orientation(o))


def is_triangular(mat, o, atol=0.0):
    o = _orientation(o)
    part = np.triu(mat, 1) if o is Orientation.LOWER else np.tril(mat, -1)
    return bool(np.all(np.abs(part) <= atol))


def triangularity_oracle(w, mask, o, h, wpx):
    """Whether the dense operator of ``conv(mask * w)`` on an h x wpx image is triangular in ``o``.

    Only square operators (c_out == c_in) are meaningful here.
    """
    w = T.check_conv_weight(w)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != w.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match weight shape {w.shape}")
    c_out, c_in = w.shape[:2]
    if c_out != c_in:
        raise ShapeError(f"triangularity needs a square operator, got c_out={c_out}, c_in={c_in}")
    dim = c_out * h * wpx
    if dim > MAX_ORACLE_DIM:
        raise ShapeError(f"dense operator of size {dim}x{dim} exceeds oracle limit {MAX_ORACLE_DIM}")
    return is_triangular(T.dense_conv_operator(mask * w, h, wpx), o)
