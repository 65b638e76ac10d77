"""Stacking Mint layers into a normalizing flow.

A model is a list of blocks, each either a lower/upper pair of Mint layers or
a 2x2 squeeze, followed by a standard normal base density. Pixel data go
through uniform dequantization and a logit transform before entering the
network; the Jacobian of that map is charged to the likelihood so bits per
dimension are comparable with the usual continuous-image convention.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import mint
from .errors import DivergenceError, ShapeError
from .masks import Orientation
from .solver import SolverConfig, invert_mint
from .tensor import as_tensor4, normalized_l2

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PreprocessConfig:
    lam: float = 0.05
    levels: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.lam < 0.5:
            raise ValueError(f"lambda must lie in (0, 0.5), got {self.lam}")


@dataclass(frozen=True)
class PairedMint:
    lower: mint.MintParams
    upper: mint.MintParams

    def __post_init__(self):
        lo, up = self.lower, self.upper
        if Orientation(lo.orientation) is not Orientation.LOWER or Orientation(up.orientation) is not Orientation.UPPER:
            raise ValueError("a pair needs one lower and one upper layer, in that order")
        if (lo.channels, lo.k_groups, lo.kernel) != (up.channels, up.k_groups, up.kernel):
            raise ValueError("paired layers must share channels, group count and kernel size")


@dataclass(frozen=True)
class Squeeze:
    k: int = 2


@dataclass(frozen=True)
class FlowModel:
    blocks: tuple
    input_shape: tuple  # (C, H, W)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def __post_init__(self):
        c, h, w = self.input_shape
        for i, block in enumerate(self.blocks):
            if isinstance(block, Squeeze):
                if h % block.k or w % block.k:
                    raise ShapeError(f"block {i}: cannot squeeze {h}x{w} by {block.k}")
                c, h, w = c * block.k ** 2, h // block.k, w // block.k
            elif isinstance(block, PairedMint):
                if block.lower.channels != c:
                    raise ShapeError(f"block {i}: layer has {block.lower.channels} channels, stream has {c}")
            else:
                raise TypeError(f"block {i}: unknown block type {type(block).__name__}")

    @property
    def dim(self):
        return int(np.prod(self.input_shape))

    @property
    def latent_shape(self):
        c, h, w = self.input_shape
        for block in self.blocks:
            if isinstance(block, Squeeze):
                c, h, w = c * block.k ** 2, h // block.k, w // block.k
        return (c, h, w)

    def layers(self):
        """Mint layers in forward order."""
        for block in self.blocks:
            if isinstance(block, PairedMint):
                yield block.lower
                yield block.upper

    def parameters(self):
        """Named parameter tensors, in a fixed order."""
        out = {}
        for i, block in enumerate(self.blocks):
            if isinstance(block, PairedMint):
                for side in ("lower", "upper"):
                    for name, value in getattr(block, side).tensors().items():
                        out[f"blocks.{i}.{side}.{name}"] = value
        return out

    def with_parameters(self, params):
        """Copy of the model with parameter tensors replaced by ``params`` (arrays or Vars)."""
        blocks = []
        for i, block in enumerate(self.blocks):
            if isinstance(block, PairedMint):
                sides = {}
                for side in ("lower", "upper"):
                    layer = getattr(block, side)
                    new = {name: params.get(f"blocks.{i}.{side}.{name}", value)
                           for name, value in layer.tensors().items()}
                    sides[side] = layer.with_tensors(**new)
                block = PairedMint(**sides)
            blocks.append(block)
        return replace(self, blocks=tuple(blocks))

    def architecture(self):
        arch = []
        for block in self.blocks:
            if isinstance(block, Squeeze):
                arch.append({"type": "squeeze", "k": block.k})
            else:
                lo = block.lower
                arch.append({"type": "pair", "channels": lo.channels, "k_groups": lo.k_groups,
                             "kernel": lo.kernel, "activation": lo.activation})
        return arch


def stage_groups(channels, k_groups, filters):
    """Group count for a stage: at least ``k_groups`` and at least ``filters`` hidden channels."""
    return max(k_groups, -(-filters // channels))


def build_model(input_shape=(1, 8, 8), pairs_per_stage=3, squeezes=1, k_groups=3, filters=8,
                kernel=3, activation="elu", rng=None, scheme="identity", scale=None,
                preprocess=None):
    """Desk-scale architecture: ``squeezes + 1`` stages of paired Mint layers separated by 2x2 squeezes."""
    rng = np.random.default_rng(rng)
    c, h, w = input_shape
    blocks = []
    for stage in range(squeezes + 1):
        if stage:
            blocks.append(Squeeze(2))
            c, h, w = c * 4, h // 2, w // 2
        K = stage_groups(c, k_groups, filters)
        for _ in range(pairs_per_stage):
            lower = mint.init(c, K, kernel, Orientation.LOWER, rng, scheme, activation, scale)
            upper = mint.init(c, K, kernel, Orientation.UPPER, rng, scheme, activation, scale)
            blocks.append(PairedMint(lower, upper))
    return FlowModel(tuple(blocks), tuple(input_shape), preprocess or PreprocessConfig())


def from_architecture(arch, input_shape, preprocess=None):
    """Zero-initialised model skeleton matching an :meth:`FlowModel.architecture` listing."""
    blocks = []
    for entry in arch:
        if entry["type"] == "squeeze":
            blocks.append(Squeeze(entry["k"]))
        elif entry["type"] == "pair":
            C, K, R = entry["channels"], entry["k_groups"], entry["kernel"]
            sides = {}
            for o in (Orientation.LOWER, Orientation.UPPER):
                p = mint.init(C, K, R, o, 0, "identity", entry.get("activation", "elu"), scale=0.0)
                sides[o.value] = p
            blocks.append(PairedMint(**sides))
        else:
            raise ValueError(f"unknown block type {entry['type']!r}")
    return FlowModel(tuple(blocks), tuple(input_shape), preprocess or PreprocessConfig())


def squeeze(x, k=2):
    """Space-to-depth: (n, c, h, w) -> (n, c*k*k, h/k, w/k), sub-pixel order (c, dy, dx)."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"cannot squeeze spatial shape {h}x{w} by factor {k}")
    y = ad.reshape(x, (n, c, h // k, k, w // k, k))
    y = ad.transpose(y, (0, 1, 3, 5, 2, 4))
    return ad.reshape(y, (n, c * k * k, h // k, w // k))


def unsqueeze(x, k=2):
    n, c, h, w = x.shape
    if c % (k * k):
        raise ShapeError(f"cannot unsqueeze {c} channels by factor {k}")
    y = ad.reshape(x, (n, c // (k * k), k, k, h, w))
    y = ad.transpose(y, (0, 1, 4, 2, 5, 3))
    return ad.reshape(y, (n, c // (k * k), h * k, w * k))


def forward(model, x):
    """Push ``x`` through every block; returns ``(z, log|det J|)`` per example."""
    logdet = 0.0
    for block in model.blocks:
        if isinstance(block, Squeeze):
            x = squeeze(x, block.k)
        else:
            x, ld = mint.forward_and_log_det(block.lower, x)
            logdet = logdet + ld
            x, ld = mint.forward_and_log_det(block.upper, x)
            logdet = logdet + ld
    return x, logdet


def standard_normal_logpdf(z):
    zv = ad.value_of(z)
    d = int(np.prod(zv.shape[1:]))
    sq = ad.sum(ad.square(z), axis=tuple(range(1, zv.ndim)))
    return -0.5 * sq - 0.5 * d * LOG_2PI


def log_prob(model, x):
    """Exact log-density of preprocessed inputs under the flow, per example."""
    xv = ad.value_of(x)
    if tuple(xv.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"input shape {tuple(xv.shape[1:])} does not match model {model.input_shape}")
    z, logdet = forward(model, x)
    return standard_normal_logpdf(z) + logdet


@dataclass
class InverseReport:
    x: np.ndarray
    layer_iterations: list
    layer_errors: list
    traces: list = None


def inverse(model, z, cfg=SolverConfig()):
    """Invert the flow layer by layer (upper then lower inside each pair)."""
    x = as_tensor4(z, "z")
    iters, errors, traces = [], [], []
    layer_index = 2 * sum(isinstance(b, PairedMint) for b in model.blocks)
    for block in reversed(model.blocks):
        if isinstance(block, Squeeze):
            x = unsqueeze(x, block.k)
            continue
        for layer in (block.upper, block.lower):
            layer_index -= 1
            try:
                res = invert_mint(layer, x, cfg)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"layer {layer_index} diverged at iteration {exc.iteration}",
                    iteration=exc.iteration, layer=layer_index,
                ) from exc
            x = res.x
            iters.append(res.iterations_used)
            errors.append(res.final_error)
            traces.append(res.trace)
    return InverseReport(x, iters[::-1], errors[::-1], traces[::-1] if cfg.record_trace else None)


def dequantize(raw, rng):
    raw = np.asarray(raw, dtype=np.float64)
    return raw + rng.random(raw.shape)


def preprocess(raw, cfg=PreprocessConfig(), rng=None, noise=None):
    """Pixels in [0, 255] -> logit space, plus the per-example log-Jacobian of that map.

    ``noise`` (uniform in [0, 1), same shape as ``raw``) overrides drawing from ``rng``.
    """
    raw = as_tensor4(raw, "raw")
    if raw.min() < 0 or raw.max() > cfg.levels - 1:
        raise ValueError(f"pixel values must lie in [0, {cfg.levels - 1}], got [{raw.min()}, {raw.max()}]")
    if noise is None:
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
        noise = rng.random(raw.shape)
    lam = cfg.lam
    s = lam + (1.0 - 2.0 * lam) * (raw + noise) / cfg.levels
    y = np.log(s) - np.log1p(-s)
    per_dim = math.log(1.0 - 2.0 * lam) - math.log(cfg.levels) - np.log(s) - np.log1p(-s)
    return y, per_dim.reshape(raw.shape[0], -1).sum(axis=1)


def postprocess(y, cfg=PreprocessConfig()):
    """Inverse of :func:`preprocess`: logit space -> dequantized pixel value in [0, levels)."""
    s = 1.0 / (1.0 + np.exp(-np.asarray(y, dtype=np.float64)))
    return (s - cfg.lam) / (1.0 - 2.0 * cfg.lam) * cfg.levels


def to_pixels(v, levels=256):
    """Floor and clamp dequantized values; returns ``(pixels, out_of_range_fraction)``."""
    v = np.asarray(v, dtype=np.float64)
    outside = float(np.mean((v < 0) | (v >= levels)))
    return np.clip(np.floor(v), 0, levels - 1), outside


def bpd_from_log_prob(log_prob_y, logdet_pre, dim):
    return -float(np.mean(np.asarray(log_prob_y) + np.asarray(logdet_pre))) / (dim * math.log(2.0))


def bpd(model, raw, cfg=None, rng=None):
    """Bits per dimension of a raw pixel batch, dequantization and logit included."""
    raw = as_tensor4(raw, "raw")
    if raw.shape[0] == 0:
        raise ValueError("bpd needs a non-empty batch")
    cfg = cfg or model.preprocess
    y, ldp = preprocess(raw, cfg, rng)
    return bpd_from_log_prob(log_prob(model, y), ldp, model.dim)


@dataclass
class SampleResult:
    pixels: np.ndarray
    y: np.ndarray
    z: np.ndarray
    out_of_range: float
    report: InverseReport


def sample(model, n, cfg=SolverConfig(), rng=None):
    """Draw ``n`` images: Gaussian latents decoded by layer-wise fixed-point inversion."""
    rng = np.random.default_rng(rng)
    z = rng.standard_normal((n, *model.latent_shape))
    report = inverse(model, z, cfg)
    pixels, outside = to_pixels(postprocess(report.x, model.preprocess), model.preprocess.levels)
    return SampleResult(pixels, report.x, z, outside, report)


def interpolation_angles(grid_n=8):
    return [k * math.pi / 14.0 for k in range(grid_n)]


def interpolate(model, xs, grid_n=8, cfg=SolverConfig()):
    """Decode the grid ``cos(p)(cos(q)z1 + sin(q)z2) + sin(p)(cos(q)z3 + sin(q)z4)``.

    ``xs`` holds four preprocessed inputs (4, C, H, W). Rows index ``p`` and
    columns ``q``, both over ``0, pi/14, ...``. Returns an array of shape
    (grid_n, grid_n, C, H, W) in model space.
    """
    xs = as_tensor4(xs, "xs")
    if xs.shape[0] != 4:
        raise ShapeError(f"interpolation needs exactly four inputs, got {xs.shape[0]}")
    z, _ = forward(model, xs)
    angles = interpolation_angles(grid_n)
    latents = []
    for p in angles:
        for q in angles:
            a = math.cos(q) * z[0] + math.sin(q) * z[1]
            b = math.cos(q) * z[2] + math.sin(q) * z[3]
            latents.append(math.cos(p) * a + math.sin(p) * b)
    report = inverse(model, np.stack(latents), cfg)
    return report.x.reshape(grid_n, grid_n, *model.input_shape)


def reconstruction_error(model, x, cfg=SolverConfig()):
    """Per-example normalized L2 between ``x`` and the inverse of its latent."""
    z, _ = forward(model, x)
    return normalized_l2(x, inverse(model, z, cfg).x)
