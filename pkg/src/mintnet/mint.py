"""The Mint layer: three masked convolutions around a per-channel affine skip.

    L(x) = t * x + conv(W3, h(conv(V2, h(conv(W1, x) + b1)) + b2)) + b3

All weights are used through their grouped masks. ``V2`` is ``W2`` with each
(block, column) rescaled by a sign so that every product of center diagonals
``d3[i,c] * d2[i,j,c] * d1[j,c]`` is non-negative. With ``t > 0`` and a
monotone ``h`` the Jacobian diagonal is then bounded below by ``t``.

The functions here work on plain arrays and on :class:`~mintnet.autodiff.Var`
parameters alike; with ``Var`` parameters every step lands on the tape.
"""

from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .masks import Orientation, grouped_mask

TENSOR_FIELDS = ("w1", "w2", "w3", "b1", "b2", "b3", "log_t")


@dataclass(frozen=True)
class MintParams:
    w1: Any  # (K*C, C, R, R)
    w2: Any  # (K*C, K*C, R, R)
    w3: Any  # (C, K*C, R, R)
    b1: Any
    b2: Any
    b3: Any
    log_t: Any  # per-channel; t = exp(log_t)
    k_groups: int
    orientation: Orientation = Orientation.LOWER
    activation: str = "elu"

    @property
    def channels(self):
        return self.w3.shape[0]

    @property
    def kernel(self):
        return self.w1.shape[-1]

    @property
    def t(self):
        return np.exp(ad.value_of(self.log_t))

    def tensors(self):
        return {name: getattr(self, name) for name in TENSOR_FIELDS}

    def with_tensors(self, **tensors):
        return replace(self, **tensors)

    def validate(self):
        C, K, R = self.channels, self.k_groups, self.kernel
        expected = {
            "w1": (K * C, C, R, R),
            "w2": (K * C, K * C, R, R),
            "w3": (C, K * C, R, R),
            "b1": (K * C,),
            "b2": (K * C,),
            "b3": (C,),
            "log_t": (C,),
        }
        for name, shape in expected.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise ShapeError(f"MintParams.{name} has shape {got}, expected {shape}")
        if R % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {R}")
        return self


def masks(params):
    C, K, R, o = params.channels, params.k_groups, params.kernel, params.orientation
    return (
        grouped_mask(C, K, 1, R, o),
        grouped_mask(C, K, K, R, o),
        grouped_mask(C, 1, K, R, o),
    )


def _diag_index(C, K, R):
    p = R // 2
    c = np.arange(C)
    k = np.arange(K)
    i1 = ((k[:, None] * C + c[None, :]), np.broadcast_to(c, (K, C)), p, p)
    rows2 = np.broadcast_to(k[:, None, None] * C + c[None, None, :], (K, K, C))
    cols2 = np.broadcast_to(k[None, :, None] * C + c[None, None, :], (K, K, C))
    i2 = (rows2, cols2, p, p)
    i3 = (np.broadcast_to(c, (K, C)), k[:, None] * C + c[None, :], p, p)
    return i1, i2, i3


def center_diags(w1, w2, w3, C, K):
    """Same-channel center weights: d1 (K, C), d2 (K, K, C), d3 (K, C)."""
    i1, i2, i3 = _diag_index(C, K, ad.value_of(w1).shape[-1])
    return ad.take(w1, i1), ad.take(w2, i2), ad.take(w3, i3)


def _sign_factors(d1, d2, d3):
    d1, d2, d3 = ad.value_of(d1), ad.value_of(d2), ad.value_of(d3)
    return np.sign(d2) * np.sign(d3[:, None, :] * d1[None, :, :])


def _effective_weights(params):
    m1, m2, m3 = masks(params)
    C, K = params.channels, params.k_groups
    w1 = ad.mul(params.w1, m1)
    w2 = ad.mul(params.w2, m2)
    w3 = ad.mul(params.w3, m3)
    d1, d2, d3 = center_diags(w1, w2, w3, C, K)
    # sign factors are treated as constants by the backward pass
    s = _sign_factors(d1, d2, d3)
    s_full = np.broadcast_to(s[:, None, :, :], (K, C, K, C)).reshape(K * C, K * C)
    v2 = ad.mul(w2, s_full[:, :, None, None])
    return w1, v2, w3, d1, ad.mul(d2, s), d3


def reparam_w2(params):
    """Masked ``W2`` with the sign correction applied (the ``V2`` of the layer)."""
    return _effective_weights(params)[1]


def _channel(v):
    return ad.reshape(v, (1, -1, 1, 1))


def _pass(params, x, want_diag, effective=None):
    C, K = params.channels, params.k_groups
    if x.shape[1] != C:
        raise ShapeError(f"Mint layer expects {C} channels, got input shape {tuple(x.shape)}")
    act = params.activation
    w1, v2, w3, d1, d2, d3 = effective or _effective_weights(params)
    u1 = ad.conv2d(x, w1) + _channel(params.b1)
    u2 = ad.conv2d(ad.act(u1, act), v2) + _channel(params.b2)
    t = _channel(ad.exp(params.log_t))
    y = t * x + ad.conv2d(ad.act(u2, act), w3) + _channel(params.b3)
    if not want_diag:
        return y, None
    n, _, h, w = x.shape
    grouped = (n, K, C, h, w)
    b = ad.reshape(ad.act_grad(u1, act), grouped) * ad.reshape(d1, (1, K, C, 1, 1))
    inner = ad.einsum("ijc,njchw->nichw", d2, b)
    a = ad.reshape(ad.act_grad(u2, act), grouped) * ad.reshape(d3, (1, K, C, 1, 1))
    diag = ad.sum(a * inner, axis=1) + t
    return y, diag


def forward(params, x):
    return _pass(params, x, False)[0]


def jac_diag(params, x):
    """Diagonal of the layer Jacobian at ``x``, shaped like ``x``."""
    return _pass(params, x, True)[1]


def forward_and_log_det(params, x):
    """Layer output and the exact per-example log|det J|."""
    y, diag = _pass(params, x, True)
    return y, ad.sum(ad.log(diag), axis=(1, 2, 3))


def forward_and_jac_diag(params, x):
    return _pass(params, x, True)


def log_det(params, x):
    return forward_and_log_det(params, x)[1]


class PreparedLayer:
    """Untaped layer with its masked, sign-corrected weights computed once.

    Use for repeated evaluation at fixed parameters (inversion, sampling).
    """

    def __init__(self, params):
        self.params = params
        self.t = params.t
        self._effective = _effective_weights(params)

    def forward(self, x):
        return _pass(self.params, x, False, self._effective)[0]

    def forward_and_jac_diag(self, x):
        return _pass(self.params, x, True, self._effective)

    def jac_diag(self, x):
        return self.forward_and_jac_diag(x)[1]


def prepare(params):
    return PreparedLayer(params)


def init(C, K, R, orientation=Orientation.LOWER, rng=None, scheme="identity",
         activation="elu", scale=None):
    """Fresh layer parameters.

    ``scheme="identity"`` gives a near-identity layer: weights drawn with
    std ``0.05 / sqrt(fan_in)``, zero biases and ``t = 1``.
    ``scheme="random"`` draws weights with std ``scale / sqrt(fan_in)``
    (scale defaults to 1), biases with std 0.1 and ``log_t`` with std 0.2;
    it is meant for property tests that need non-trivial layers.
    """
    if R % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {R}")
    rng = np.random.default_rng(rng)
    KC = K * C
    shapes = {"w1": (KC, C, R, R), "w2": (KC, KC, R, R), "w3": (C, KC, R, R)}
    if scheme == "identity":
        std = 0.05 if scale is None else scale
        weights = {k: rng.normal(0.0, std / np.sqrt(np.prod(s[1:])), s) for k, s in shapes.items()}
        biases = {"b1": np.zeros(KC), "b2": np.zeros(KC), "b3": np.zeros(C), "log_t": np.zeros(C)}
    elif scheme == "random":
        std = 1.0 if scale is None else scale
        weights = {k: rng.normal(0.0, std / np.sqrt(np.prod(s[1:])), s) for k, s in shapes.items()}
        biases = {
            "b1": rng.normal(0.0, 0.1, KC),
            "b2": rng.normal(0.0, 0.1, KC),
            "b3": rng.normal(0.0, 0.1, C),
            "log_t": rng.normal(0.0, 0.2, C),
        }
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return MintParams(
        k_groups=K, orientation=Orientation(orientation), activation=activation,
        **weights, **biases,
    ).validate()


def zero_residual(params):
    """Copy of ``params`` with ``w3 = 0``: the layer becomes ``t * x + b3``."""
    return params.with_tensors(w3=np.zeros_like(ad.value_of(params.w3)))

